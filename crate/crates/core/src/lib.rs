//! Desk-scale audio-visual pursuit laboratory.
//!
//! A gridworld with a moving sound source, a differentiable recurrent policy
//! with four pluggable audio-visual fusion strategies, PPO training, and a
//! tracking-metric suite. All numerics are 64-bit and every run is fully
//! reproducible from its seeds.

pub mod analysis;
pub mod config;
pub mod diff;
pub mod grid;
pub mod metrics;
pub mod policy;
pub mod ppo;
pub mod rng;
pub mod runner;

pub use config::RunConfig;
pub use grid::{Action, EpisodeState, EpisodeSummary, NavGraph, Observation};
pub use metrics::MetricReport;
