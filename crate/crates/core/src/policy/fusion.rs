//! Audio-visual feature fusion: concatenation, element-wise product and mean,
//! and token-level feature self-attention.

use super::PolicyError;
use crate::diff::{NodeId, Tape};

use super::FusionKind;

/// The three parameter-free fusion baselines. `v` and `a` are `[B, D]`;
/// Concat yields `[B, 2D]` (visual first), EMul/EM yield `[B, D]`.
pub fn simple_fuse(
    tape: &mut Tape,
    v: NodeId,
    a: NodeId,
    kind: FusionKind,
) -> Result<NodeId, PolicyError> {
    match kind {
        FusionKind::Concat => Ok(tape.concat_last(v, a)?),
        FusionKind::EMul => Ok(tape.mul(v, a)?),
        FusionKind::EM => {
            let s = tape.add(v, a)?;
            Ok(tape.scale(s, 0.5)?)
        }
        FusionKind::Fsa => Err(PolicyError::Config(
            "fsa fusion requires fsa_fuse with its weight matrices".to_string(),
        )),
    }
}

/// Feature self-attention over the concatenated embedding.
///
/// The `[B, 2D]` input is sliced into `t = 2D/d` tokens of dimension `d`
/// (visual rows first). With Q = K = V = tokens,
///
///   S = sigmoid(Q W1^T) sigmoid(K W2^T)^T / sqrt(d)
///   out = row_softmax(S) V + V
///
/// flattened back to `[B, 2D]`, so fusion preserves dimension.
pub fn fsa_fuse(
    tape: &mut Tape,
    e_in: NodeId,
    w1: NodeId,
    w2: NodeId,
    token_dim: usize,
) -> Result<NodeId, PolicyError> {
    let shape = tape.value(e_in).shape().to_vec();
    if shape.len() != 2 {
        return Err(PolicyError::Config(format!(
            "fsa_fuse expects [B, 2D], got {:?}",
            shape
        )));
    }
    let (batch, width) = (shape[0], shape[1]);
    if token_dim == 0 || width % token_dim != 0 {
        return Err(PolicyError::Config(format!(
            "token dim {} must divide embedding width {}",
            token_dim, width
        )));
    }
    let tokens = width / token_dim;

    // [B*t, d] view for the shared projections.
    let flat = tape.reshape(e_in, vec![batch * tokens, token_dim])?;
    let w1t = tape.transpose_last(w1)?;
    let w2t = tape.transpose_last(w2)?;
    let q_proj = tape.matmul(flat, w1t)?;
    let q_gate = tape.sigmoid(q_proj)?;
    let k_proj = tape.matmul(flat, w2t)?;
    let k_gate = tape.sigmoid(k_proj)?;

    let q = tape.reshape(q_gate, vec![batch, tokens, token_dim])?;
    let k = tape.reshape(k_gate, vec![batch, tokens, token_dim])?;
    let v = tape.reshape(e_in, vec![batch, tokens, token_dim])?;

    let k_t = tape.transpose_last(k)?;
    let scores = tape.bmm(q, k_t)?;
    let scaled = tape.scale(scores, 1.0 / (token_dim as f64).sqrt())?;
    let attn = tape.softmax(scaled, 2)?;
    let mixed = tape.bmm(attn, v)?;
    let residual = tape.add(mixed, v)?;
    Ok(tape.reshape(residual, vec![batch, width])?)
}

/// Forward-only reference of the attention weights, for inspection/tests:
/// returns the row-softmax attention matrix `[B, t, t]`.
pub fn fsa_attention(
    tape: &mut Tape,
    e_in: NodeId,
    w1: NodeId,
    w2: NodeId,
    token_dim: usize,
) -> Result<NodeId, PolicyError> {
    let shape = tape.value(e_in).shape().to_vec();
    let (batch, width) = (shape[0], shape[1]);
    let tokens = width / token_dim;
    let flat = tape.reshape(e_in, vec![batch * tokens, token_dim])?;
    let w1t = tape.transpose_last(w1)?;
    let w2t = tape.transpose_last(w2)?;
    let qp = tape.matmul(flat, w1t)?;
    let q_gate = tape.sigmoid(qp)?;
    let kp = tape.matmul(flat, w2t)?;
    let k_gate = tape.sigmoid(kp)?;
    let q = tape.reshape(q_gate, vec![batch, tokens, token_dim])?;
    let k = tape.reshape(k_gate, vec![batch, tokens, token_dim])?;
    let k_t = tape.transpose_last(k)?;
    let scores = tape.bmm(q, k_t)?;
    let scaled = tape.scale(scores, 1.0 / (token_dim as f64).sqrt())?;
    Ok(tape.softmax(scaled, 2)?)
}
