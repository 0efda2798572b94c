//! The navigation policy: visual/audio encoders, pluggable fusion strategies,
//! recurrent state, and actor-critic heads.

mod config;
mod fusion;
mod net;

pub use config::{
    init_params, ConvLayerSpec, EncoderConfig, FusionKind, PolicyConfig, ResolvedPolicy,
};
pub use fusion::{fsa_attention, fsa_fuse, simple_fuse};
pub use net::{ActMode, ActOutput, ForwardNodes, PolicyNet};

use thiserror::Error;

#[derive(Debug, Error)]
pub enum PolicyError {
    #[error(transparent)]
    Diff(#[from] crate::diff::DiffError),
    #[error("policy configuration error: {0}")]
    Config(String),
    #[error("divergence detected: {0}")]
    Divergence(String),
}
