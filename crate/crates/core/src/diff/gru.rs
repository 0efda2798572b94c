//! Gated recurrent unit cell, composed from tape primitives.

use super::{DiffError, NodeId, Tape};

/// Node ids of one GRU cell's weights, as recorded on a tape.
///
/// Input matrices are `[d_in, d_h]`, recurrent matrices `[d_h, d_h]`, biases
/// `[d_h]`, so the forward pass is plain row-batched matmul.
#[derive(Clone, Copy, Debug)]
pub struct GruWeights {
    pub w_update: NodeId,
    pub u_update: NodeId,
    pub b_update: NodeId,
    pub w_reset: NodeId,
    pub u_reset: NodeId,
    pub b_reset: NodeId,
    pub w_cand: NodeId,
    pub u_cand: NodeId,
    pub b_cand: NodeId,
}

/// Standard update/reset-gate cell:
///
/// z = sigmoid(x Wz + h Uz + bz)
/// r = sigmoid(x Wr + h Ur + br)
/// c = tanh(x Wh + (r * h) Uh + bh)
/// h' = (1 - z) * c + z * h
///
/// `x` is `[B, d_in]`, `h_prev` is `[B, d_h]`; returns `[B, d_h]`.
pub fn gru_cell(
    tape: &mut Tape,
    x: NodeId,
    h_prev: NodeId,
    w: &GruWeights,
) -> Result<NodeId, DiffError> {
    let gate = |tape: &mut Tape, wx: NodeId, uh: NodeId, b: NodeId| -> Result<NodeId, DiffError> {
        let xs = tape.matmul(x, wx)?;
        let hs = tape.matmul(h_prev, uh)?;
        let pre = tape.add(xs, hs)?;
        tape.add_bias(pre, b)
    };

    let z_pre = gate(tape, w.w_update, w.u_update, w.b_update)?;
    let z = tape.sigmoid(z_pre)?;
    let r_pre = gate(tape, w.w_reset, w.u_reset, w.b_reset)?;
    let r = tape.sigmoid(r_pre)?;

    let rh = tape.mul(r, h_prev)?;
    let xs = tape.matmul(x, w.w_cand)?;
    let hs = tape.matmul(rh, w.u_cand)?;
    let pre = tape.add(xs, hs)?;
    let pre = tape.add_bias(pre, w.b_cand)?;
    let cand = tape.tanh(pre)?;

    // (1 - z) * cand + z * h_prev
    let neg_z = tape.scale(z, -1.0)?;
    let one_minus_z = tape.add_scalar(neg_z, 1.0)?;
    let a = tape.mul(one_minus_z, cand)?;
    let b = tape.mul(z, h_prev)?;
    tape.add(a, b)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::diff::{ParamStore, Tensor};

    fn zero_weights(tape: &mut Tape, store: &mut ParamStore, d_in: usize, d_h: usize) -> GruWeights {
        let mut ins = |name: &str, shape: &[usize]| {
            store.insert(name, Tensor::zeros(shape)).unwrap();
        };
        ins("wz", &[d_in, d_h]);
        ins("uz", &[d_h, d_h]);
        ins("bz", &[d_h]);
        ins("wr", &[d_in, d_h]);
        ins("ur", &[d_h, d_h]);
        ins("br", &[d_h]);
        ins("wh", &[d_in, d_h]);
        ins("uh", &[d_h, d_h]);
        ins("bh", &[d_h]);
        GruWeights {
            w_update: tape.param(store, "wz").unwrap(),
            u_update: tape.param(store, "uz").unwrap(),
            b_update: tape.param(store, "bz").unwrap(),
            w_reset: tape.param(store, "wr").unwrap(),
            u_reset: tape.param(store, "ur").unwrap(),
            b_reset: tape.param(store, "br").unwrap(),
            w_cand: tape.param(store, "wh").unwrap(),
            u_cand: tape.param(store, "uh").unwrap(),
            b_cand: tape.param(store, "bh").unwrap(),
        }
    }

    #[test]
    fn zero_params_halve_previous_hidden() {
        let mut tape = Tape::new();
        let mut store = ParamStore::new();
        let w = zero_weights(&mut tape, &mut store, 3, 2);
        let x = tape.constant(Tensor::new(vec![1, 3], vec![0.4, -1.0, 2.5]).unwrap());
        let h = tape.constant(Tensor::new(vec![1, 2], vec![0.8, -0.6]).unwrap());
        let h_new = gru_cell(&mut tape, x, h, &w).unwrap();
        assert_eq!(tape.value(h_new).data(), &[0.4, -0.3]);
    }

    #[test]
    fn zero_hidden_and_zero_params_stay_zero() {
        let mut tape = Tape::new();
        let mut store = ParamStore::new();
        let w = zero_weights(&mut tape, &mut store, 3, 2);
        let x = tape.constant(Tensor::new(vec![1, 3], vec![0.4, -1.0, 2.5]).unwrap());
        let h = tape.constant(Tensor::zeros(&[1, 2]));
        let h_new = gru_cell(&mut tape, x, h, &w).unwrap();
        assert_eq!(tape.value(h_new).data(), &[0.0, 0.0]);
    }

    #[test]
    fn rejects_mismatched_hidden_width() {
        let mut tape = Tape::new();
        let mut store = ParamStore::new();
        let w = zero_weights(&mut tape, &mut store, 3, 2);
        let x = tape.constant(Tensor::new(vec![1, 3], vec![0.0; 3]).unwrap());
        let h_bad = tape.constant(Tensor::zeros(&[1, 5]));
        assert!(gru_cell(&mut tape, x, h_bad, &w).is_err());
    }
}
