//! Policy forward pass and the action interface.
//!
//! The full chain is encode -> fuse -> GRU step -> actor/critic heads. All
//! entry points run on a tape, so the same kernels serve gradient-free
//! rollouts and training updates; batched rows are computed independently,
//! which keeps B=1 and B=N results bitwise identical per row.

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use super::{fsa_fuse, simple_fuse, FusionKind, PolicyError, ResolvedPolicy};
use crate::diff::{gru_cell, GruWeights, NodeId, ParamStore, Tape, Tensor};
use crate::grid::{Action, Observation, ACTIONS};

/// Handles into one forward pass, for losses and activation export.
pub struct ForwardNodes {
    pub logits: NodeId,
    pub value: NodeId,
    pub h_new: NodeId,
    pub fused: NodeId,
    /// Inspectable intermediates in forward order.
    pub named: Vec<(String, NodeId)>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ActMode {
    Sample,
    Argmax,
}

#[derive(Clone, Debug)]
pub struct ActOutput {
    pub action: Action,
    pub log_prob: f64,
    pub value: f64,
    pub h_new: Vec<f64>,
}

pub struct PolicyNet {
    cfg: ResolvedPolicy,
}

impl PolicyNet {
    pub fn new(cfg: ResolvedPolicy) -> Self {
        PolicyNet { cfg }
    }

    pub fn cfg(&self) -> &ResolvedPolicy {
        &self.cfg
    }

    /// Stacks observations into batched `[B,1,H,W]` depth and `[B,2,1,F]`
    /// audio tensors, validating shapes against the config.
    pub fn obs_to_tensors(&self, obs: &[&Observation]) -> Result<(Tensor, Tensor), PolicyError> {
        let (_, dh, dw) = self.cfg.visual.input_shape;
        let bins = self.cfg.audio.input_shape.2;
        let batch = obs.len();
        let mut depth = Vec::with_capacity(batch * dh * dw);
        let mut audio = Vec::with_capacity(batch * 2 * bins);
        for o in obs {
            if o.depth_shape != (dh, dw) || o.depth.len() != dh * dw {
                return Err(PolicyError::Config(format!(
                    "depth shape {:?} does not match configured {:?}",
                    o.depth_shape,
                    (dh, dw)
                )));
            }
            if o.audio_bins != bins || o.audio.len() != 2 * bins {
                return Err(PolicyError::Config(format!(
                    "audio bins {} do not match configured {}",
                    o.audio_bins, bins
                )));
            }
            depth.extend_from_slice(&o.depth);
            audio.extend_from_slice(&o.audio);
        }
        Ok((
            Tensor::new(vec![batch, 1, dh, dw], depth)?,
            Tensor::new(vec![batch, 2, 1, bins], audio)?,
        ))
    }

    fn encode(
        &self,
        tape: &mut Tape,
        store: &ParamStore,
        prefix: &str,
        input: NodeId,
        enc: &super::EncoderConfig,
        named: &mut Vec<(String, NodeId)>,
    ) -> Result<NodeId, PolicyError> {
        let batch = tape.value(input).shape()[0];
        let mut x = input;
        for (i, layer) in enc.conv.iter().enumerate() {
            let k = tape.param(store, &format!("{prefix}.conv{i}.kernel"))?;
            x = tape.conv2d(x, k, layer.stride)?;
            x = tape.relu(x)?;
            named.push((format!("{prefix}.conv{i}"), x));
        }
        let flat = tape.reshape(x, vec![batch, enc.flat_dim])?;
        let w = tape.param(store, &format!("{prefix}.linear.w"))?;
        let b = tape.param(store, &format!("{prefix}.linear.b"))?;
        let proj = tape.matmul(flat, w)?;
        let feat = tape.add_bias(proj, b)?;
        named.push((format!("{prefix}.feature"), feat));
        Ok(feat)
    }

    /// Full batched forward: depth `[B,1,H,W]`, audio `[B,2,1,F]`, hidden
    /// `[B,hidden]`.
    pub fn forward(
        &self,
        tape: &mut Tape,
        store: &ParamStore,
        depth: Tensor,
        audio: Tensor,
        h_prev: Tensor,
    ) -> Result<ForwardNodes, PolicyError> {
        let depth_id = tape.constant(depth);
        let audio_id = tape.constant(audio);
        let h_id = tape.constant(h_prev);
        self.forward_nodes(tape, store, depth_id, audio_id, h_id)
    }

    /// Forward over already-recorded nodes, so callers can chain the hidden
    /// state across steps (gradients then flow through time).
    pub fn forward_nodes(
        &self,
        tape: &mut Tape,
        store: &ParamStore,
        depth_id: NodeId,
        audio_id: NodeId,
        h_id: NodeId,
    ) -> Result<ForwardNodes, PolicyError> {
        let mut named = Vec::new();

        let v_feat = self.encode(tape, store, "visual", depth_id, &self.cfg.visual, &mut named)?;
        let a_feat = self.encode(tape, store, "audio", audio_id, &self.cfg.audio, &mut named)?;

        let fused = match self.cfg.fusion {
            FusionKind::Fsa => {
                let e_in = tape.concat_last(v_feat, a_feat)?;
                named.push(("e_i".to_string(), e_in));
                let w1 = tape.param(store, "fsa.w1")?;
                let w2 = tape.param(store, "fsa.w2")?;
                fsa_fuse(tape, e_in, w1, w2, self.cfg.token_dim)?
            }
            FusionKind::Concat => {
                let e = simple_fuse(tape, v_feat, a_feat, FusionKind::Concat)?;
                named.push(("e_i".to_string(), e));
                e
            }
            kind => simple_fuse(tape, v_feat, a_feat, kind)?,
        };
        named.push(("e_o".to_string(), fused));

        let gru = GruWeights {
            w_update: tape.param(store, "gru.w_update")?,
            u_update: tape.param(store, "gru.u_update")?,
            b_update: tape.param(store, "gru.b_update")?,
            w_reset: tape.param(store, "gru.w_reset")?,
            u_reset: tape.param(store, "gru.u_reset")?,
            b_reset: tape.param(store, "gru.b_reset")?,
            w_cand: tape.param(store, "gru.w_cand")?,
            u_cand: tape.param(store, "gru.u_cand")?,
            b_cand: tape.param(store, "gru.b_cand")?,
        };
        let h_new = gru_cell(tape, fused, h_id, &gru)?;
        named.push(("s_t".to_string(), h_new));

        let actor_w = tape.param(store, "actor.w")?;
        let actor_b = tape.param(store, "actor.b")?;
        let logits_pre = tape.matmul(h_new, actor_w)?;
        let logits = tape.add_bias(logits_pre, actor_b)?;
        named.push(("logits".to_string(), logits));

        let critic_w = tape.param(store, "critic.w")?;
        let critic_b = tape.param(store, "critic.b")?;
        let value_pre = tape.matmul(h_new, critic_w)?;
        let value2 = tape.add_bias(value_pre, critic_b)?;
        let batch = tape.value(value2).shape()[0];
        let value = tape.reshape(value2, vec![batch])?;
        named.push(("value".to_string(), value));

        Ok(ForwardNodes {
            logits,
            value,
            h_new,
            fused,
            named,
        })
    }

    /// Batched act: one forward pass, then per-row sampling (in row order,
    /// from the provided stream) or deterministic argmax with index-order
    /// tie-breaking.
    pub fn act_batch(
        &self,
        store: &ParamStore,
        obs: &[&Observation],
        h_prev: &[Vec<f64>],
        mode: ActMode,
        rng: &mut ChaCha8Rng,
    ) -> Result<Vec<ActOutput>, PolicyError> {
        let batch = obs.len();
        let hidden = self.cfg.hidden_dim;
        let (depth, audio) = self.obs_to_tensors(obs)?;
        let mut h_flat = Vec::with_capacity(batch * hidden);
        for h in h_prev {
            debug_assert_eq!(h.len(), hidden);
            h_flat.extend_from_slice(h);
        }
        let h_tensor = Tensor::new(vec![batch, hidden], h_flat)?;

        let mut tape = Tape::new();
        let fwd = self.forward(&mut tape, store, depth, audio, h_tensor)?;
        if !tape.value(fwd.logits).all_finite() || !tape.value(fwd.value).all_finite() {
            return Err(PolicyError::Divergence(
                "non-finite activations in policy forward".to_string(),
            ));
        }
        let log_probs = tape.log_softmax_rows(fwd.logits)?;

        let lp = tape.value(log_probs).data();
        let values = tape.value(fwd.value).data();
        let hs = tape.value(fwd.h_new).data();
        let mut out = Vec::with_capacity(batch);
        for b in 0..batch {
            let row = &lp[b * 4..(b + 1) * 4];
            let action_idx = match mode {
                ActMode::Argmax => argmax(row),
                ActMode::Sample => {
                    let u: f64 = rng.gen();
                    let mut cum = 0.0;
                    let mut picked = 3;
                    for (i, &l) in row.iter().enumerate() {
                        cum += l.exp();
                        if u < cum {
                            picked = i;
                            break;
                        }
                    }
                    picked
                }
            };
            out.push(ActOutput {
                action: ACTIONS[action_idx],
                log_prob: row[action_idx],
                value: values[b],
                h_new: hs[b * hidden..(b + 1) * hidden].to_vec(),
            });
        }
        Ok(out)
    }

    /// Single-observation act.
    pub fn act(
        &self,
        store: &ParamStore,
        obs: &Observation,
        h_prev: &[f64],
        mode: ActMode,
        rng: &mut ChaCha8Rng,
    ) -> Result<ActOutput, PolicyError> {
        let mut res = self.act_batch(store, &[obs], &[h_prev.to_vec()], mode, rng)?;
        Ok(res.remove(0))
    }

    /// State values for a batch, used for bootstrap targets.
    pub fn values(
        &self,
        store: &ParamStore,
        obs: &[&Observation],
        h_prev: &[Vec<f64>],
    ) -> Result<Vec<f64>, PolicyError> {
        let (depth, audio) = self.obs_to_tensors(obs)?;
        let hidden = self.cfg.hidden_dim;
        let mut h_flat = Vec::with_capacity(obs.len() * hidden);
        for h in h_prev {
            h_flat.extend_from_slice(h);
        }
        let h_tensor = Tensor::new(vec![obs.len(), hidden], h_flat)?;
        let mut tape = Tape::new();
        let fwd = self.forward(&mut tape, store, depth, audio, h_tensor)?;
        Ok(tape.value(fwd.value).data().to_vec())
    }

    pub fn zero_hidden(&self) -> Vec<f64> {
        vec![0.0; self.cfg.hidden_dim]
    }
}

fn argmax(row: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate().skip(1) {
        if v > row[best] {
            best = i;
        }
    }
    best
}
