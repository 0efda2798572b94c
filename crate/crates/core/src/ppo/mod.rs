//! Rollout collection, generalized advantage estimation, the clipped policy
//! update, and the training loop with checkpointing.

mod buffer;
mod checkpoint;
mod gae;
mod train;
mod update;

pub use buffer::{collect_rollout, EnvRunner, RewardWindow, RolloutBuffer, RolloutCtx};
pub use checkpoint::{
    load_checkpoint, save_checkpoint, Checkpoint, CheckpointError, CheckpointMeta, SavedEnvRunner,
};
pub use gae::{compute_gae, normalize_advantages, Gae};
pub use train::{
    eval_master_seed, resume_training, run_eval_episodes, train, EvalHook, JsonlWriter,
    TrainOutcome, TrainSetup,
};
pub use update::{ppo_update, Adam, UpdateStats};

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum TrainError {
    #[error(transparent)]
    Policy(#[from] crate::policy::PolicyError),
    #[error(transparent)]
    Grid(#[from] crate::grid::GridError),
    #[error(transparent)]
    Diff(#[from] crate::diff::DiffError),
    #[error(transparent)]
    Metrics(#[from] crate::metrics::MetricsError),
    #[error(transparent)]
    Checkpoint(#[from] CheckpointError),
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
    #[error("serialization error: {0}")]
    Json(#[from] serde_json::Error),
    #[error("training diverged: {0}")]
    Divergence(String),
    #[error("invalid training setup: {0}")]
    Setup(String),
}

/// PPO hyperparameters plus the run-shape knobs of the training loop.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PPOConfig {
    pub clip: f64,
    pub ppo_epochs: usize,
    pub minibatches: usize,
    pub value_loss_coef: f64,
    pub entropy_coef: f64,
    pub learning_rate: f64,
    pub max_grad_norm: f64,
    pub rollout_steps: usize,
    pub gamma: f64,
    pub tau: f64,
    pub num_envs: usize,
    pub num_updates: usize,
    pub max_episode_steps: usize,
    pub success_reward: f64,
    pub slack: f64,
    pub distance_reward_scale: f64,
    pub move_prob: f64,
    /// Reserved coefficient; stored for config compatibility, not used by the
    /// update.
    pub beta_reserved: f64,
    /// Completed-episode window for the running mean reward.
    pub reward_window: usize,
    /// Evaluate with argmax actions every this many updates (0 = final only).
    pub eval_every: usize,
    pub eval_episodes: usize,
    /// Checkpoint every this many updates (0 = final only).
    pub checkpoint_every: usize,
    /// Stop once a periodic evaluation reaches this success rate.
    pub target_srt: Option<f64>,
}

impl Default for PPOConfig {
    fn default() -> Self {
        PPOConfig {
            clip: 0.1,
            ppo_epochs: 4,
            minibatches: 1,
            value_loss_coef: 0.5,
            entropy_coef: 0.02,
            learning_rate: 2.5e-4,
            max_grad_norm: 0.5,
            rollout_steps: 150,
            gamma: 0.99,
            tau: 0.95,
            num_envs: 4,
            num_updates: 200,
            max_episode_steps: 500,
            success_reward: 10.0,
            slack: -0.01,
            distance_reward_scale: 1.0,
            move_prob: 0.3,
            beta_reserved: 0.01,
            reward_window: 50,
            eval_every: 10,
            eval_episodes: 20,
            checkpoint_every: 50,
            target_srt: None,
        }
    }
}
