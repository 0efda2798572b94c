//! Run configuration: parsing, defaults, validation with JSON-pointer
//! diagnostics, and resolution into the concrete sub-configs.

use std::path::PathBuf;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::grid::{EnvSpec, RewardConfig, SIGNATURE_COUNT};
use crate::policy::PolicyConfig;
use crate::ppo::PPOConfig;

/// Environment section of a run config.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EnvSection {
    /// Grid generation seed; defaults to `seeds.env`.
    pub seed: Option<u64>,
    pub width: usize,
    pub height: usize,
    pub obstacle_density: f64,
    pub max_steps: usize,
    pub depth_res: (usize, usize),
    pub audio_bins: usize,
    pub noise_std: f64,
    /// Source move probability; defaults to `ppo.move_prob`.
    pub move_prob: Option<f64>,
    /// Depth raycast range in cells.
    pub max_range: usize,
}

impl Default for EnvSection {
    fn default() -> Self {
        EnvSection {
            seed: None,
            width: 9,
            height: 9,
            obstacle_density: 0.15,
            max_steps: 500,
            depth_res: (16, 16),
            audio_bins: 16,
            noise_std: 0.02,
            move_prob: None,
            max_range: 8,
        }
    }
}

/// Partition of the 102 sound signatures by id.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SoundSplit {
    pub train: Vec<usize>,
    pub val: Vec<usize>,
    pub test: Vec<usize>,
}

impl Default for SoundSplit {
    fn default() -> Self {
        SoundSplit {
            train: (0..73).collect(),
            val: (73..84).collect(),
            test: (84..SIGNATURE_COUNT).collect(),
        }
    }
}

/// The four independent named seed streams.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Seeds {
    pub env: u64,
    pub init: u64,
    pub action: u64,
    pub noise: u64,
}

impl Default for Seeds {
    fn default() -> Self {
        Seeds {
            env: 1,
            init: 2,
            action: 3,
            noise: 4,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum EvalSplit {
    Train,
    Val,
    Test,
}

/// The full run configuration; every omitted field takes its default, so an
/// empty JSON object is a valid config.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub env: EnvSection,
    pub policy: PolicyConfig,
    pub ppo: PPOConfig,
    pub sound_split: SoundSplit,
    pub seeds: Seeds,
    pub eval_split: EvalSplit,
    pub out_dir: Option<PathBuf>,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            env: EnvSection::default(),
            policy: PolicyConfig::default(),
            ppo: PPOConfig::default(),
            sound_split: SoundSplit::default(),
            seeds: Seeds::default(),
            eval_split: EvalSplit::Train,
            out_dir: None,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct ConfigIssue {
    /// JSON pointer to the offending field.
    pub pointer: String,
    pub message: String,
}

#[derive(Debug, Error)]
pub struct ConfigErrors(pub Vec<ConfigIssue>);

impl std::fmt::Display for ConfigErrors {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        writeln!(f, "invalid configuration:")?;
        for issue in &self.0 {
            writeln!(f, "  {}: {}", issue.pointer, issue.message)?;
        }
        Ok(())
    }
}

/// Parses a JSON run config without semantic validation (defaults applied,
/// optional fields left unresolved).
pub fn parse_config(json: &str) -> Result<RunConfig, ConfigErrors> {
    serde_json::from_str(json).map_err(|e| {
        ConfigErrors(vec![ConfigIssue {
            pointer: "/".to_string(),
            message: e.to_string(),
        }])
    })
}

/// Parses and fully validates a JSON run config, returning the resolved form
/// (all optional fields filled) or the aggregated issue list.
pub fn validate_config(json: &str) -> Result<RunConfig, ConfigErrors> {
    parse_config(json)?.resolve()
}

impl RunConfig {
    /// Fills derived defaults and runs every semantic check, aggregating all
    /// failures.
    pub fn resolve(mut self) -> Result<RunConfig, ConfigErrors> {
        let mut issues = Vec::new();
        let issue = |issues: &mut Vec<ConfigIssue>, pointer: &str, message: String| {
            issues.push(ConfigIssue {
                pointer: pointer.to_string(),
                message,
            });
        };

        // Resolution of cross-section defaults.
        if self.env.seed.is_none() {
            self.env.seed = Some(self.seeds.env);
        }
        if self.env.move_prob.is_none() {
            self.env.move_prob = Some(self.ppo.move_prob);
        }
        // The env section owns the episode cap; keep the echo consistent.
        self.ppo.max_episode_steps = self.env.max_steps;

        if self.env.width < 3 {
            issue(&mut issues, "/env/width", "must be at least 3".into());
        }
        if self.env.height < 3 {
            issue(&mut issues, "/env/height", "must be at least 3".into());
        }
        if !(0.0..=0.4).contains(&self.env.obstacle_density) {
            issue(
                &mut issues,
                "/env/obstacle_density",
                "must lie in [0, 0.4]".into(),
            );
        }
        if self.env.max_steps == 0 {
            issue(&mut issues, "/env/max_steps", "must be positive".into());
        }
        if self.env.depth_res.0 == 0 || self.env.depth_res.1 == 0 {
            issue(&mut issues, "/env/depth_res", "must be positive".into());
        }
        if self.env.audio_bins == 0 {
            issue(&mut issues, "/env/audio_bins", "must be positive".into());
        }
        if !(self.env.noise_std >= 0.0 && self.env.noise_std.is_finite()) {
            issue(
                &mut issues,
                "/env/noise_std",
                "must be finite and non-negative".into(),
            );
        }
        let move_prob = self.env.move_prob.unwrap();
        if !(0.0..=1.0).contains(&move_prob) {
            issue(&mut issues, "/env/move_prob", "must lie in [0, 1]".into());
        }
        if self.env.max_range == 0 {
            issue(&mut issues, "/env/max_range", "must be positive".into());
        }

        // Policy shape checks, with a dedicated pointer for the divisibility
        // constraint.
        let fused = match self.policy.fusion {
            crate::policy::FusionKind::Concat | crate::policy::FusionKind::Fsa => {
                2 * self.policy.feature_dim
            }
            _ => self.policy.feature_dim,
        };
        if self.policy.fusion == crate::policy::FusionKind::Fsa
            && (self.policy.token_dim == 0 || fused % self.policy.token_dim != 0)
        {
            issue(
                &mut issues,
                "/policy/token_dim",
                format!(
                    "token dim {} must divide the concatenated width {}",
                    self.policy.token_dim, fused
                ),
            );
        } else if let Err(e) = self.policy.resolve(self.env.depth_res, self.env.audio_bins) {
            issue(&mut issues, "/policy", e.to_string());
        }

        if !(self.ppo.clip > 0.0 && self.ppo.clip.is_finite()) {
            issue(&mut issues, "/ppo/clip", "must be positive".into());
        }
        if !(self.ppo.gamma > 0.0 && self.ppo.gamma <= 1.0) {
            issue(&mut issues, "/ppo/gamma", "must lie in (0, 1]".into());
        }
        if !(self.ppo.tau > 0.0 && self.ppo.tau <= 1.0) {
            issue(&mut issues, "/ppo/tau", "must lie in (0, 1]".into());
        }
        if !(self.ppo.learning_rate >= 0.0 && self.ppo.learning_rate.is_finite()) {
            issue(
                &mut issues,
                "/ppo/learning_rate",
                "must be finite and non-negative".into(),
            );
        }
        if !(self.ppo.max_grad_norm > 0.0 && self.ppo.max_grad_norm.is_finite()) {
            issue(&mut issues, "/ppo/max_grad_norm", "must be positive".into());
        }
        if self.ppo.rollout_steps == 0 {
            issue(&mut issues, "/ppo/rollout_steps", "must be positive".into());
        }
        if self.ppo.num_envs == 0 {
            issue(&mut issues, "/ppo/num_envs", "must be positive".into());
        }
        if self.ppo.minibatches != 1 {
            issue(
                &mut issues,
                "/ppo/minibatches",
                "only full-batch updates (1) are supported".into(),
            );
        }
        if self.ppo.ppo_epochs == 0 {
            issue(&mut issues, "/ppo/ppo_epochs", "must be positive".into());
        }
        for (name, v) in [
            ("/ppo/value_loss_coef", self.ppo.value_loss_coef),
            ("/ppo/entropy_coef", self.ppo.entropy_coef),
        ] {
            if !v.is_finite() {
                issue(&mut issues, name, "must be finite".into());
            }
        }
        if self.ppo.eval_episodes == 0 && self.ppo.eval_every > 0 {
            issue(
                &mut issues,
                "/ppo/eval_episodes",
                "periodic evaluation requires at least one episode".into(),
            );
        }
        if !(0.0..=1.0).contains(&self.ppo.move_prob) {
            issue(&mut issues, "/ppo/move_prob", "must lie in [0, 1]".into());
        }
        if let Some(t) = self.ppo.target_srt {
            if !(0.0..=1.0).contains(&t) {
                issue(&mut issues, "/ppo/target_srt", "must lie in [0, 1]".into());
            }
        }

        // Split sanity: bounded ids, pairwise disjoint, usable eval split.
        let splits = [
            ("/sound_split/train", &self.sound_split.train),
            ("/sound_split/val", &self.sound_split.val),
            ("/sound_split/test", &self.sound_split.test),
        ];
        for (ptr, ids) in &splits {
            if let Some(&bad) = ids.iter().find(|&&id| id >= SIGNATURE_COUNT) {
                issue(
                    &mut issues,
                    ptr,
                    format!("signature id {} out of range 0..{}", bad, SIGNATURE_COUNT),
                );
            }
        }
        for i in 0..splits.len() {
            for j in (i + 1)..splits.len() {
                if let Some(&dup) = splits[i].1.iter().find(|id| splits[j].1.contains(id)) {
                    issue(
                        &mut issues,
                        splits[j].0,
                        format!("id {} overlaps {}", dup, splits[i].0),
                    );
                }
            }
        }
        if self.sound_split.train.is_empty() {
            issue(&mut issues, "/sound_split/train", "must be non-empty".into());
        }
        if self.eval_ids().is_empty() {
            issue(
                &mut issues,
                "/eval_split",
                "selected evaluation split is empty".into(),
            );
        }

        if issues.is_empty() {
            Ok(self)
        } else {
            Err(ConfigErrors(issues))
        }
    }

    /// Grid generation seed (resolved configs always carry one).
    pub fn grid_seed(&self) -> u64 {
        self.env.seed.unwrap_or(self.seeds.env)
    }

    pub fn env_spec(&self) -> EnvSpec {
        EnvSpec {
            max_steps: self.env.max_steps,
            depth_res: self.env.depth_res,
            max_range: self.env.max_range,
            noise_std: self.env.noise_std,
            move_prob: self.env.move_prob.unwrap_or(self.ppo.move_prob),
            reward: RewardConfig {
                success: self.ppo.success_reward,
                approach_bonus: 0.25,
                distance_scale: self.ppo.distance_reward_scale,
                slack: self.ppo.slack,
            },
        }
    }

    pub fn eval_ids(&self) -> &[usize] {
        match self.eval_split {
            EvalSplit::Train => &self.sound_split.train,
            EvalSplit::Val => &self.sound_split.val,
            EvalSplit::Test => &self.sound_split.test,
        }
    }

    /// Config echo embedded into every artifact.
    pub fn to_value(&self) -> serde_json::Value {
        serde_json::to_value(self).expect("config serializes")
    }
}
