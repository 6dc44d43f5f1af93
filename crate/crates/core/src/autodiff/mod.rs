//! Reverse-mode automatic differentiation over dense `f64` tensors.
//!
//! Every forward pass records onto a fresh [`Tape`]; tensors are addressed by
//! [`Var`] handles into that tape. After [`Tape::backward`], each
//! `requires_grad` node reachable from the loss holds its gradient.
//!
//! The module also carries the SGD-with-momentum optimizer and its
//! inverse-decay learning-rate schedule.

mod gradcheck;
mod optim;
mod tape;
mod tensor;

pub use gradcheck::{gradient_check, GradCheckReport, RandomGraph};
pub use optim::{lr_at, lr_decay, OptimizerConfig, ParamGroup, SgdMomentum, DEFAULT_BASE_LR};
pub use tape::{OpKind, Tape, Var, PROB_EPSILON};
pub use tensor::Tensor;

use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum AutodiffError {
    #[error("{op}: incompatible shapes {lhs:?} and {rhs:?}")]
    ShapeMismatch {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },
    #[error("shape {shape:?} has a zero extent")]
    InvalidShape { shape: Vec<usize> },
    #[error("shape {shape:?} does not hold {len} values")]
    LengthMismatch { shape: Vec<usize>, len: usize },
    #[error("ragged rows: expected {expected} columns, found {found}")]
    RaggedRows { expected: usize, found: usize },
    #[error("backward requires a scalar loss, got shape {shape:?}")]
    NonScalarLoss { shape: Vec<usize> },
    #[error("{op}: {reason}")]
    InvalidArgument { op: &'static str, reason: String },
    #[error("progress {0} is outside [0, 1]")]
    ProgressOutOfRange(f64),
    #[error("progress must not decrease ({prev} -> {next})")]
    ProgressDecreased { prev: f64, next: f64 },
}
