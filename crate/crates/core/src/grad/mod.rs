//! Reverse-mode differentiation over a per-batch tape, plus finite-difference checking.

mod check;
mod tape;

pub use check::{gradcheck, gradcheck_with, relative_error, GradCheckEntry, GradCheckOptions, GradReport};
pub use tape::{softmax, AdjointFault, BnSource, Gradients, Tape, Var, PROB_FLOOR};

use crate::norm::NormError;
use crate::tensor::TensorError;

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum GradError {
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    Norm(#[from] NormError),
    #[error("backward seed has shape {actual:?}, output has {expected:?}")]
    SeedShape { expected: Vec<usize>, actual: Vec<usize> },
    #[error("non-finite gradient reached node {0}")]
    NonFiniteGradient(usize),
    #[error("loss must be a single value, got shape {0:?}")]
    NonScalarLoss(Vec<usize>),
}
