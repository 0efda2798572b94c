//! The clipped-surrogate policy update and its optimizer.

use serde::{Deserialize, Serialize};

use super::{compute_gae, normalize_advantages, PPOConfig, RolloutBuffer, TrainError};
use crate::diff::{ParamStore, Tape, Tensor};
use crate::policy::PolicyNet;

/// Per-update telemetry (loss terms averaged over the epochs).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct UpdateStats {
    pub update: usize,
    pub env_steps: usize,
    pub policy_loss: f64,
    pub value_loss: f64,
    pub entropy: f64,
    pub clip_fraction: f64,
    /// Global gradient norm before clipping.
    pub grad_norm: f64,
    /// Mean total reward over the recent completed-episode window.
    pub mean_episode_reward: f64,
    pub episodes_completed: usize,
}

/// Adam with bias correction; moments are checkpointable.
#[derive(Clone, Debug)]
pub struct Adam {
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
    t: u64,
    beta1: f64,
    beta2: f64,
    eps: f64,
}

impl Adam {
    pub fn new(store: &ParamStore) -> Adam {
        let m = store.iter().map(|(_, t)| vec![0.0; t.numel()]).collect();
        let v = store.iter().map(|(_, t)| vec![0.0; t.numel()]).collect();
        Adam {
            m,
            v,
            t: 0,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }

    pub fn step_count(&self) -> u64 {
        self.t
    }

    /// One update from the gradients currently in the store.
    pub fn step(&mut self, store: &mut ParamStore, lr: f64) {
        self.t += 1;
        let bc1 = 1.0 - self.beta1.powi(self.t as i32);
        let bc2 = 1.0 - self.beta2.powi(self.t as i32);
        for idx in 0..store.len() {
            let grad: Vec<f64> = store
                .by_index(idx)
                .grad()
                .expect("params always carry grad slots")
                .to_vec();
            let m = &mut self.m[idx];
            let v = &mut self.v[idx];
            let data = store.by_index_mut(idx).data_mut();
            for j in 0..grad.len() {
                let g = grad[j];
                m[j] = self.beta1 * m[j] + (1.0 - self.beta1) * g;
                v[j] = self.beta2 * v[j] + (1.0 - self.beta2) * g * g;
                let m_hat = m[j] / bc1;
                let v_hat = v[j] / bc2;
                data[j] -= lr * m_hat / (v_hat.sqrt() + self.eps);
            }
        }
    }

    /// Moment tables keyed like the store (for checkpointing).
    pub fn moments(&self) -> (&[Vec<f64>], &[Vec<f64>]) {
        (&self.m, &self.v)
    }

    pub fn restore(store: &ParamStore, m: Vec<Vec<f64>>, v: Vec<Vec<f64>>, t: u64) -> Adam {
        debug_assert_eq!(m.len(), store.len());
        debug_assert_eq!(v.len(), store.len());
        Adam {
            m,
            v,
            t,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// Loss pieces of one epoch, for telemetry.
struct EpochStats {
    policy_loss: f64,
    value_loss: f64,
    entropy: f64,
    clip_fraction: f64,
    grad_norm: f64,
}

/// Full-batch clipped PPO over the rollout buffer.
///
/// The recurrent forward replays each transition from its stored pre-step
/// hidden snapshot. On the first epoch the recomputed log-probs equal the
/// stored ones, so every ratio is exactly 1 and the clip fraction is 0.
pub fn ppo_update(
    buffer: &RolloutBuffer,
    net: &PolicyNet,
    store: &mut ParamStore,
    adam: &mut Adam,
    cfg: &PPOConfig,
) -> Result<UpdateStats, TrainError> {
    let n = buffer.transitions();
    if n == 0 {
        return Err(TrainError::Setup("empty rollout buffer".to_string()));
    }

    // GAE per environment on the step-major layout.
    let mut advantages = vec![0.0; n];
    let mut returns = vec![0.0; n];
    for e in 0..buffer.num_envs {
        let (rewards, values, dones) = buffer.env_series(e);
        let gae = compute_gae(
            &rewards,
            &values,
            &dones,
            buffer.bootstrap[e],
            cfg.gamma,
            cfg.tau,
        );
        for t in 0..buffer.steps {
            advantages[t * buffer.num_envs + e] = gae.advantages[t];
            returns[t * buffer.num_envs + e] = gae.returns[t];
        }
    }
    normalize_advantages(&mut advantages);

    let (depth, audio, hidden) = buffer.batch_tensors()?;
    let mut acc = Vec::with_capacity(cfg.ppo_epochs);
    for _ in 0..cfg.ppo_epochs {
        let stats = run_epoch(
            net,
            store,
            adam,
            cfg,
            depth.clone(),
            audio.clone(),
            hidden.clone(),
            &buffer.actions,
            &buffer.log_probs,
            &advantages,
            &returns,
        )?;
        acc.push(stats);
    }

    let k = acc.len() as f64;
    Ok(UpdateStats {
        update: 0,
        env_steps: 0,
        policy_loss: acc.iter().map(|s| s.policy_loss).sum::<f64>() / k,
        value_loss: acc.iter().map(|s| s.value_loss).sum::<f64>() / k,
        entropy: acc.iter().map(|s| s.entropy).sum::<f64>() / k,
        clip_fraction: acc.iter().map(|s| s.clip_fraction).sum::<f64>() / k,
        grad_norm: acc.iter().map(|s| s.grad_norm).sum::<f64>() / k,
        mean_episode_reward: 0.0,
        episodes_completed: 0,
    })
}

#[allow(clippy::too_many_arguments)]
fn run_epoch(
    net: &PolicyNet,
    store: &mut ParamStore,
    adam: &mut Adam,
    cfg: &PPOConfig,
    depth: Tensor,
    audio: Tensor,
    hidden: Tensor,
    actions: &[usize],
    old_log_probs: &[f64],
    advantages: &[f64],
    returns: &[f64],
) -> Result<EpochStats, TrainError> {
    let n = actions.len();
    let mut tape = Tape::new();
    let fwd = net.forward(&mut tape, store, depth, audio, hidden)?;
    if !tape.value(fwd.logits).all_finite() || !tape.value(fwd.value).all_finite() {
        return Err(TrainError::Divergence(
            "non-finite activations in update forward".to_string(),
        ));
    }

    let log_probs = tape.log_softmax_rows(fwd.logits)?;
    let log_prob_a = tape.gather_rows(log_probs, actions.to_vec())?;
    let old = tape.constant(Tensor::from_vec(old_log_probs.to_vec()));
    let log_ratio = tape.sub(log_prob_a, old)?;
    let ratio = tape.exp(log_ratio)?;

    let adv = tape.constant(Tensor::from_vec(advantages.to_vec()));
    let surr = tape.mul(ratio, adv)?;
    let clipped_ratio = tape.clamp(ratio, 1.0 - cfg.clip, 1.0 + cfg.clip)?;
    let surr_clipped = tape.mul(clipped_ratio, adv)?;
    let surrogate = tape.minimum(surr, surr_clipped)?;
    let surrogate_mean = tape.mean(surrogate)?;
    let policy_loss = tape.scale(surrogate_mean, -1.0)?;

    let target = tape.constant(Tensor::from_vec(returns.to_vec()));
    let verr = tape.sub(fwd.value, target)?;
    let vsq = tape.mul(verr, verr)?;
    let value_loss = tape.mean(vsq)?;

    let probs = tape.exp(log_probs)?;
    let plogp = tape.mul(probs, log_probs)?;
    let plogp_sum = tape.sum(plogp)?;
    let entropy = tape.scale(plogp_sum, -1.0 / n as f64)?;

    let scaled_value = tape.scale(value_loss, cfg.value_loss_coef)?;
    let partial = tape.add(policy_loss, scaled_value)?;
    let neg_entropy = tape.scale(entropy, -cfg.entropy_coef)?;
    let total = tape.add(partial, neg_entropy)?;

    let total_value = tape.value(total).item().map_err(crate::policy::PolicyError::from)?;
    if !total_value.is_finite() {
        return Err(TrainError::Divergence(format!(
            "non-finite loss {total_value}"
        )));
    }

    store.zero_grads();
    tape.backward(total, store).map_err(crate::policy::PolicyError::from)?;
    let grad_norm = store.grad_norm();
    if grad_norm > cfg.max_grad_norm {
        store.scale_grads(cfg.max_grad_norm / grad_norm);
    }
    adam.step(store, cfg.learning_rate);

    let clip_hits = tape
        .value(ratio)
        .data()
        .iter()
        .filter(|&&r| (r - 1.0).abs() > cfg.clip)
        .count();
    Ok(EpochStats {
        policy_loss: tape.value(policy_loss).item().unwrap_or(f64::NAN),
        value_loss: tape.value(value_loss).item().unwrap_or(f64::NAN),
        entropy: tape.value(entropy).item().unwrap_or(f64::NAN),
        clip_fraction: clip_hits as f64 / n as f64,
        grad_norm,
    })
}
