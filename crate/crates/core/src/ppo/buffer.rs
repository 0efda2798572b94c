//! Rollout storage and collection across a pool of environments.

use std::collections::VecDeque;
use std::sync::Arc;

use rand_chacha::ChaCha8Rng;

use super::{PPOConfig, TrainError};
use crate::diff::{ParamStore, Tensor};
use crate::grid::{
    EnvSpec, EpisodeState, EpisodeSummary, NavGraph, Observation, SignatureBank,
};
use crate::policy::{ActMode, PolicyNet};
use crate::rng::derive_seed;

const EPISODE_TAG: u64 = 0xE9;
const SIGNATURE_PICK_TAG: u64 = 0x516;

/// One environment slot: live episode plus the policy-side carry state.
#[derive(Clone, Debug)]
pub struct EnvRunner {
    pub env_index: usize,
    /// Episodes started in this slot so far (current one included).
    pub episode_index: u64,
    pub state: EpisodeState,
    pub last_obs: Observation,
    pub hidden: Vec<f64>,
}

impl EnvRunner {
    /// Deterministic seed for episode `k` of environment slot `i`.
    pub fn episode_seed(env_master: u64, env_index: usize, episode: u64) -> u64 {
        derive_seed(env_master, &[EPISODE_TAG, env_index as u64, episode])
    }

    /// Deterministic signature id choice for episode `k` of slot `i`.
    pub fn episode_signature(
        env_master: u64,
        env_index: usize,
        episode: u64,
        split: &[usize],
    ) -> usize {
        let pick = derive_seed(env_master, &[SIGNATURE_PICK_TAG, env_index as u64, episode]);
        split[(pick % split.len() as u64) as usize]
    }

    #[allow(clippy::too_many_arguments)]
    pub fn fresh(
        graph: Arc<NavGraph>,
        bank: &SignatureBank,
        split: &[usize],
        spec: &EnvSpec,
        env_master: u64,
        env_index: usize,
        episode_index: u64,
        hidden_dim: usize,
    ) -> Result<EnvRunner, TrainError> {
        let seed = Self::episode_seed(env_master, env_index, episode_index);
        let sig_id = Self::episode_signature(env_master, env_index, episode_index, split);
        let (state, last_obs) =
            EpisodeState::reset(graph, spec, seed, bank.get(sig_id).clone())?;
        Ok(EnvRunner {
            env_index,
            episode_index,
            state,
            last_obs,
            hidden: vec![0.0; hidden_dim],
        })
    }
}

/// Flat per-(step, env) rollout records, step-major: row `t * num_envs + e`.
/// Hidden states are the pre-step snapshots; they reset to zero exactly at
/// done boundaries.
#[derive(Clone, Debug, Default)]
pub struct RolloutBuffer {
    pub num_envs: usize,
    pub steps: usize,
    pub depth_shape: (usize, usize),
    pub audio_bins: usize,
    pub hidden_dim: usize,
    pub depth: Vec<f64>,
    pub audio: Vec<f64>,
    pub hidden: Vec<f64>,
    pub actions: Vec<usize>,
    pub log_probs: Vec<f64>,
    pub values: Vec<f64>,
    pub rewards: Vec<f64>,
    pub dones: Vec<bool>,
    /// Value of each env's state after the last step, for GAE bootstrap.
    pub bootstrap: Vec<f64>,
}

impl RolloutBuffer {
    pub fn transitions(&self) -> usize {
        self.steps * self.num_envs
    }

    /// Batched tensors over all transitions, in (step, env) row order.
    pub fn batch_tensors(&self) -> Result<(Tensor, Tensor, Tensor), TrainError> {
        let n = self.transitions();
        let (dh, dw) = self.depth_shape;
        let depth = Tensor::new(vec![n, 1, dh, dw], self.depth.clone())
            .map_err(crate::policy::PolicyError::from)?;
        let audio = Tensor::new(vec![n, 2, 1, self.audio_bins], self.audio.clone())
            .map_err(crate::policy::PolicyError::from)?;
        let hidden = Tensor::new(vec![n, self.hidden_dim], self.hidden.clone())
            .map_err(crate::policy::PolicyError::from)?;
        Ok((depth, audio, hidden))
    }

    /// Rewards/values/dones for one env as contiguous slices over steps.
    pub fn env_series(&self, env: usize) -> (Vec<f64>, Vec<f64>, Vec<bool>) {
        let mut rewards = Vec::with_capacity(self.steps);
        let mut values = Vec::with_capacity(self.steps);
        let mut dones = Vec::with_capacity(self.steps);
        for t in 0..self.steps {
            let idx = t * self.num_envs + env;
            rewards.push(self.rewards[idx]);
            values.push(self.values[idx]);
            dones.push(self.dones[idx]);
        }
        (rewards, values, dones)
    }
}

/// Everything static a rollout needs about its environments.
pub struct RolloutCtx<'a> {
    pub graph: Arc<NavGraph>,
    pub bank: &'a SignatureBank,
    pub split: &'a [usize],
    pub spec: &'a EnvSpec,
    pub env_master: u64,
}

/// Steps every env `rollout_steps` times with sampled actions, auto-resetting
/// finished episodes (reporting each summary), and records the bootstrap
/// value of each env's final state. Transitions merge in (step, env) order.
pub fn collect_rollout(
    ctx: &RolloutCtx<'_>,
    envs: &mut [EnvRunner],
    net: &PolicyNet,
    params: &ParamStore,
    cfg: &PPOConfig,
    action_rng: &mut ChaCha8Rng,
    mut on_summary: impl FnMut(usize, u64, &EpisodeSummary),
) -> Result<RolloutBuffer, TrainError> {
    let num_envs = envs.len();
    let steps = cfg.rollout_steps;
    let (dh, dw) = ctx.spec.depth_res;
    let hidden_dim = net.cfg().hidden_dim;
    let bins = ctx.bank.bins();

    let mut buf = RolloutBuffer {
        num_envs,
        steps,
        depth_shape: (dh, dw),
        audio_bins: bins,
        hidden_dim,
        depth: Vec::with_capacity(steps * num_envs * dh * dw),
        audio: Vec::with_capacity(steps * num_envs * 2 * bins),
        hidden: Vec::with_capacity(steps * num_envs * hidden_dim),
        actions: Vec::with_capacity(steps * num_envs),
        log_probs: Vec::with_capacity(steps * num_envs),
        values: Vec::with_capacity(steps * num_envs),
        rewards: Vec::with_capacity(steps * num_envs),
        dones: Vec::with_capacity(steps * num_envs),
        bootstrap: Vec::with_capacity(num_envs),
    };

    for _ in 0..steps {
        for env in envs.iter() {
            buf.depth.extend_from_slice(&env.last_obs.depth);
            buf.audio.extend_from_slice(&env.last_obs.audio);
            buf.hidden.extend_from_slice(&env.hidden);
        }
        let actions = {
            let obs: Vec<&Observation> = envs.iter().map(|e| &e.last_obs).collect();
            let hs: Vec<Vec<f64>> = envs.iter().map(|e| e.hidden.clone()).collect();
            net.act_batch(params, &obs, &hs, ActMode::Sample, action_rng)?
        };
        for (env, act) in envs.iter_mut().zip(actions) {
            let outcome = env.state.step(act.action, ctx.spec)?;
            buf.actions.push(act.action.index());
            buf.log_probs.push(act.log_prob);
            buf.values.push(act.value);
            buf.rewards.push(outcome.reward);
            buf.dones.push(outcome.done);
            if outcome.done {
                let summary = outcome.summary.expect("done steps carry a summary");
                on_summary(env.env_index, env.episode_index, &summary);
                let next_episode = env.episode_index + 1;
                *env = EnvRunner::fresh(
                    ctx.graph.clone(),
                    ctx.bank,
                    ctx.split,
                    ctx.spec,
                    ctx.env_master,
                    env.env_index,
                    next_episode,
                    hidden_dim,
                )?;
            } else {
                env.last_obs = outcome.observation;
                env.hidden = act.h_new;
            }
        }
    }

    let obs: Vec<&Observation> = envs.iter().map(|e| &e.last_obs).collect();
    let hs: Vec<Vec<f64>> = envs.iter().map(|e| e.hidden.clone()).collect();
    buf.bootstrap = net.values(params, &obs, &hs)?;
    Ok(buf)
}

/// Running window of completed-episode rewards.
#[derive(Clone, Debug, Default)]
pub struct RewardWindow {
    window: usize,
    rewards: VecDeque<f64>,
}

impl RewardWindow {
    pub fn new(window: usize) -> Self {
        RewardWindow {
            window: window.max(1),
            rewards: VecDeque::new(),
        }
    }

    pub fn push(&mut self, total_reward: f64) {
        if self.rewards.len() == self.window {
            self.rewards.pop_front();
        }
        self.rewards.push_back(total_reward);
    }

    pub fn mean(&self) -> f64 {
        if self.rewards.is_empty() {
            0.0
        } else {
            self.rewards.iter().sum::<f64>() / self.rewards.len() as f64
        }
    }

    pub fn snapshot(&self) -> Vec<f64> {
        self.rewards.iter().copied().collect()
    }

    pub fn restore(window: usize, rewards: Vec<f64>) -> Self {
        RewardWindow {
            window: window.max(1),
            rewards: rewards.into(),
        }
    }
}
