//! Crate-wide error type. Every fallible public entry point returns
//! [`Result`]; panics are reserved for internal invariant violations.

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    /// Two tensors (or a tensor and an index set) disagree on shape.
    #[error("{op}: shape mismatch between {lhs:?} and {rhs:?}")]
    ShapeMismatch {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },

    /// A single operand has dimensions the operation cannot accept.
    #[error("{op}: {msg}")]
    Dimension { op: &'static str, msg: String },

    /// A scalar argument is outside its legal range (probabilities,
    /// capacity factors, expert counts, ...).
    #[error("invalid parameter: {0}")]
    Parameter(String),

    /// A model or training configuration failed validation.
    #[error("config: {0}")]
    Config(String),

    /// A checkpoint file is malformed or inconsistent with its config.
    #[error("checkpoint: {0}")]
    Checkpoint(String),

    /// The training loss stopped being finite.
    #[error("training diverged at step {step}: {msg}")]
    Diverged { step: usize, msg: String },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
