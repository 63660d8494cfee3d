//! Dense 2-D tensor arithmetic with reverse-mode automatic differentiation.
//!
//! Everything is a row-major `f64` matrix; scalars are `1x1`. Operations
//! record onto a [`Tape`] whenever an operand is tape-bound, so plain value
//! arithmetic and graph construction share one API. `Tape::grad` with
//! `create_graph` builds the backward pass out of taped primitives, which is
//! what makes gradients-of-gradients (differentiating through an inner SGD
//! step) work.

mod ops;
mod tape;
mod tensor;

pub use ops::{
    add, add_row, argmax_rows, exp, gather_cols, logsumexp_cols, matmul, mean_all, mse, mul,
    mul_scalar, neg, relu, repeat_cols, repeat_rows, scale, softmax_cross_entropy, softmax_rows,
    spread, sub, sum_all, sum_cols, sum_rows, tanh, transpose,
};
pub use tape::{gradient_step, GradMode, Gradients, Tape};
pub use tensor::Tensor;

use thiserror::Error;

/// Errors surfaced by tensor ops and tape passes.
#[derive(Debug, Error)]
pub enum NdError {
    #[error("{op}: dimension mismatch ({detail})")]
    Shape { op: &'static str, detail: String },
    #[error("label {label} out of range for {classes} classes")]
    LabelRange { label: usize, classes: usize },
    #[error("contract violation: {0}")]
    Contract(String),
    #[error("stale tape handle (tensor bound at generation {bound}, tape at {current})")]
    StaleTape { bound: u64, current: u64 },
    #[error("non-finite value in {0}")]
    NonFinite(String),
}

pub type Result<T> = std::result::Result<T, NdError>;

fn shape_err(op: &'static str, detail: String) -> NdError {
    NdError::Shape { op, detail }
}
