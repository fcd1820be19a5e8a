//! Reverse-mode differentiation, the MLP and the Adamax optimizer.

mod adamax;
mod mlp;
mod tape;

pub use adamax::{AdamaxConfig, AdamaxState};
pub use mlp::{BoundParams, MlpModel, Prediction, DEFAULT_HIDDEN};
pub use tape::{Gradients, Tape, Var, EXP_CLAMP};

use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum AutodiffError {
    #[error("dimension mismatch: {0}")]
    Dimension(String),
    #[error("backward requires a scalar loss, got {0}x{1}")]
    NonScalarLoss(usize, usize),
    #[error("parameter vector has length {got}, expected {expected}")]
    ParamLength { expected: usize, got: usize },
    #[error("non-finite gradient at parameter {0}")]
    NonFiniteGradient(usize),
}
