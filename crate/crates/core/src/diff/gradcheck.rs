//! Central-difference verification of tape gradients.

use super::{DiffError, NodeId, ParamStore, Tape};

/// Objective under test: records a scalar loss for the current store values.
pub type Objective<'a> = dyn Fn(&mut Tape, &ParamStore) -> Result<NodeId, DiffError> + 'a;

/// Compares tape gradients against central differences, coordinate by
/// coordinate, over every parameter in the store.
///
/// Returns the worst relative error
/// `|analytic - numeric| / max(1e-8, |analytic| + |numeric|)`.
pub fn grad_check(f: &Objective<'_>, store: &mut ParamStore, h: f64) -> Result<f64, DiffError> {
    if h.is_nan() || h <= 0.0 {
        return Err(DiffError::InvalidArg(format!(
            "step size must be positive, got {}",
            h
        )));
    }

    store.zero_grads();
    let mut tape = Tape::new();
    let loss = f(&mut tape, store)?;
    let base = tape.value(loss).item()?;
    if !base.is_finite() {
        return Err(DiffError::NonFinite("grad_check objective".to_string()));
    }
    tape.backward(loss, store)?;
    let analytic: Vec<Vec<f64>> = store
        .iter()
        .map(|(_, t)| t.grad().expect("params always carry grad slots").to_vec())
        .collect();

    let mut max_rel: f64 = 0.0;
    for p in 0..store.len() {
        for c in 0..store.by_index(p).numel() {
            let orig = store.by_index(p).data()[c];
            store.by_index_mut(p).data_mut()[c] = orig + h;
            let f_plus = eval_scalar(f, store)?;
            store.by_index_mut(p).data_mut()[c] = orig - h;
            let f_minus = eval_scalar(f, store)?;
            store.by_index_mut(p).data_mut()[c] = orig;

            let numeric = (f_plus - f_minus) / (2.0 * h);
            let a = analytic[p][c];
            let rel = (a - numeric).abs() / f64::max(1e-8, a.abs() + numeric.abs());
            if rel > max_rel {
                max_rel = rel;
            }
        }
    }
    Ok(max_rel)
}

fn eval_scalar(f: &Objective<'_>, store: &ParamStore) -> Result<f64, DiffError> {
    let mut tape = Tape::new();
    let loss = f(&mut tape, store)?;
    let v = tape.value(loss).item()?;
    if !v.is_finite() {
        return Err(DiffError::NonFinite("grad_check objective".to_string()));
    }
    Ok(v)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::diff::Tensor;

    #[test]
    fn quadratic_is_exact_up_to_rounding() {
        let mut store = ParamStore::new();
        store
            .insert("theta", Tensor::new(vec![4], vec![0.3, -1.1, 0.7, 2.0]).unwrap())
            .unwrap();
        let f: &Objective = &|tape, store| {
            let t = tape.param(store, "theta")?;
            let sq = tape.mul(t, t)?;
            tape.sum(sq)
        };
        let err = grad_check(f, &mut store, 1e-5).unwrap();
        assert!(err <= 1e-9, "quadratic grad check error {}", err);
    }

    #[test]
    fn constant_function_has_zero_error() {
        let mut store = ParamStore::new();
        store.insert("theta", Tensor::from_vec(vec![1.0, 2.0])).unwrap();
        let f: &Objective = &|tape, store| {
            let t = tape.param(store, "theta")?;
            let z = tape.scale(t, 0.0)?;
            tape.sum(z)
        };
        let err = grad_check(f, &mut store, 1e-5).unwrap();
        assert_eq!(err, 0.0);
    }

    #[test]
    fn tanh_gradient_close_to_finite_difference() {
        let mut store = ParamStore::new();
        store
            .insert("x", Tensor::new(vec![3], vec![0.21, -0.77, 1.13]).unwrap())
            .unwrap();
        let f: &Objective = &|tape, store| {
            let x = tape.param(store, "x")?;
            let y = tape.tanh(x)?;
            let w = tape.constant(Tensor::new(vec![3], vec![1.0, -2.0, 0.5]).unwrap());
            let prod = tape.mul(y, w)?;
            tape.sum(prod)
        };
        let err = grad_check(f, &mut store, 1e-5).unwrap();
        assert!(err <= 1e-6, "tanh grad check error {}", err);
    }

    #[test]
    fn composed_conv_relu_matmul_softmax_chain() {
        let mut store = ParamStore::new();
        let mut v = 0.456f64;
        let mut next = || {
            v = (v * 71.71 + 0.2113).fract();
            v - 0.5
        };
        store
            .insert(
                "kernel",
                Tensor::new(vec![2, 1, 2, 2], (0..8).map(|_| next()).collect()).unwrap(),
            )
            .unwrap();
        store
            .insert(
                "w",
                Tensor::new(vec![8, 3], (0..24).map(|_| next()).collect()).unwrap(),
            )
            .unwrap();
        let image: Vec<f64> = (0..9).map(|_| next()).collect();

        let f: &Objective = &|tape, store| {
            let x = tape.constant(Tensor::new(vec![1, 3, 3], image.clone()).unwrap());
            let k = tape.param(store, "kernel")?;
            let conv = tape.conv2d(x, k, 1)?; // [2,2,2]
            let act = tape.relu(conv)?;
            let flat = tape.reshape(act, vec![1, 8])?;
            let w = tape.param(store, "w")?;
            let logits = tape.matmul(flat, w)?;
            let probs = tape.softmax(logits, 1)?;
            let target = tape.constant(Tensor::new(vec![1, 3], vec![0.2, 0.5, 0.3]).unwrap());
            let err = tape.sub(probs, target)?;
            let sq = tape.mul(err, err)?;
            tape.sum(sq)
        };
        let err = grad_check(f, &mut store, 1e-5).unwrap();
        assert!(err <= 1e-4, "composed chain grad check error {}", err);
    }

    #[test]
    fn clipped_surrogate_op_chain_passes_grad_check() {
        // exp, sub, minimum, clamp, mul, mean: the clipped-surrogate op set.
        // Fixture values keep ratios away from the clamp edges and branch
        // ties, where subgradients would break finite differences.
        let mut store = ParamStore::new();
        store
            .insert(
                "logp",
                Tensor::new(vec![5], vec![-1.31, -0.42, -2.05, -0.77, -1.6]).unwrap(),
            )
            .unwrap();
        let old = vec![-1.5, -0.5, -1.9, -0.9, -1.4];
        let adv = vec![0.8, -1.2, 0.5, 2.0, -0.7];
        let f: &Objective = &|tape, store| {
            let logp = tape.param(store, "logp")?;
            let old = tape.constant(Tensor::from_vec(old.clone()));
            let adv = tape.constant(Tensor::from_vec(adv.clone()));
            let diff = tape.sub(logp, old)?;
            let ratio = tape.exp(diff)?;
            let s1 = tape.mul(ratio, adv)?;
            let clipped = tape.clamp(ratio, 0.8, 1.25)?;
            let s2 = tape.mul(clipped, adv)?;
            let m = tape.minimum(s1, s2)?;
            let mean = tape.mean(m)?;
            tape.scale(mean, -1.0)
        };
        let err = grad_check(f, &mut store, 1e-5).unwrap();
        assert!(err <= 1e-6, "surrogate chain grad check error {}", err);
    }

    #[test]
    fn log_softmax_gather_entropy_chain_passes_grad_check() {
        let mut store = ParamStore::new();
        store
            .insert(
                "logits",
                Tensor::new(vec![2, 4], vec![0.3, -1.0, 0.7, 0.1, 2.0, -0.4, 0.0, 1.1]).unwrap(),
            )
            .unwrap();
        let f: &Objective = &|tape, store| {
            let logits = tape.param(store, "logits")?;
            let lsm = tape.log_softmax_rows(logits)?;
            let picked = tape.gather_rows(lsm, vec![2, 0])?;
            let picked_sum = tape.sum(picked)?;
            let probs = tape.exp(lsm)?;
            let plogp = tape.mul(probs, lsm)?;
            let ent = tape.sum(plogp)?;
            let ent_term = tape.scale(ent, -0.02)?;
            tape.add(picked_sum, ent_term)
        };
        let err = grad_check(f, &mut store, 1e-5).unwrap();
        assert!(err <= 1e-6, "log-softmax chain grad check error {}", err);
    }

    #[test]
    fn rejects_non_positive_step() {
        let mut store = ParamStore::new();
        store.insert("x", Tensor::from_vec(vec![1.0])).unwrap();
        let f: &Objective = &|tape, store| {
            let x = tape.param(store, "x")?;
            tape.sum(x)
        };
        assert!(grad_check(f, &mut store, 0.0).is_err());
    }

    #[test]
    fn rejects_non_finite_objective() {
        let mut store = ParamStore::new();
        store.insert("x", Tensor::from_vec(vec![0.0])).unwrap();
        let f: &Objective = &|tape, store| {
            let x = tape.param(store, "x")?;
            let y = tape.ln(x)?; // ln(0) = -inf
            tape.sum(y)
        };
        assert!(matches!(
            grad_check(f, &mut store, 1e-5),
            Err(DiffError::NonFinite(_))
        ));
    }
}
