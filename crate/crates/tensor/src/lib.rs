//! A deliberately small tensor engine: dense row-major tensors over `f32` /
//! `f64`, a Wengert-list tape for reverse-mode differentiation, and a
//! versioned checkpoint container.
//!
//! Everything is single-threaded and allocation-simple on purpose; the models
//! built on top are desk-scale and favor being auditable over being fast.

pub mod checkpoint;
pub mod tape;
pub mod tensor;

pub use checkpoint::{Checkpoint, CheckpointEntry};
pub use tape::{Tape, Var};
pub use tensor::{lit, Dtype, Scalar, Tensor};

/// Errors from tensor construction, tape ops, and checkpoints.
#[derive(Debug, thiserror::Error)]
pub enum TensorError {
    /// Incompatible operand shapes; the message spells out both.
    #[error("{op}: {message}")]
    Shape { op: &'static str, message: String },

    /// A `Var` was used with a tape it does not belong to.
    #[error("variable belongs to tape {var_tape}, not tape {tape}")]
    WrongTape { var_tape: u64, tape: u64 },

    /// `backward` requires a single-element loss.
    #[error("backward needs a scalar loss, got shape {0:?}")]
    NotScalarLoss(Vec<usize>),

    /// Out-of-range index (gather id, class target, axis, ...).
    #[error("{op}: index {index} out of range for size {size}")]
    Index { op: &'static str, index: usize, size: usize },

    /// Numerically invalid input (all-masked softmax row, -inf target logit).
    #[error("{0}")]
    Invalid(String),

    /// Checkpoint file structure problems.
    #[error("checkpoint: {0}")]
    Checkpoint(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, TensorError>;
