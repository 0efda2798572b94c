//! Minimal reverse-mode differentiable numerics: dense, convolution and
//! recurrent primitives over 64-bit tensors, with gradients verifiable against
//! finite differences.

mod gradcheck;
mod gru;
mod params;
mod tape;
mod tensor;

pub use gradcheck::{grad_check, Objective};
pub use gru::{gru_cell, GruWeights};
pub use params::ParamStore;
pub use tape::{NodeId, Tape};
pub use tensor::Tensor;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum DiffError {
    #[error("shape error: {0}")]
    Shape(String),
    #[error("duplicate parameter name '{0}'")]
    DuplicateParam(String),
    #[error("unknown parameter name '{0}'")]
    UnknownParam(String),
    #[error("node does not belong to this tape")]
    NotOnTape,
    #[error("loss must be scalar, got shape {0:?}")]
    NotScalar(Vec<usize>),
    #[error("non-finite value in {0}")]
    NonFinite(String),
    #[error("invalid argument: {0}")]
    InvalidArg(String),
}
