//! Error type shared across the crate.

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("{op}: shape mismatch: {lhs:?} vs {rhs:?}")]
    ShapeMismatch {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },

    #[error("{op}: invalid argument: {msg}")]
    InvalidArgument { op: &'static str, msg: String },

    #[error("{op}: non-finite value encountered at index {index}")]
    NonFinite { op: &'static str, index: usize },

    #[error("softmax: all logits in a row are -inf (row {row}); no valid distribution")]
    AllBlocked { row: usize },

    #[error("attention: query row {row} has every key blocked")]
    AllKeysBlocked { row: usize },

    #[error("training diverged: non-finite loss at step {step}")]
    NonFiniteLoss { step: usize },

    #[error("gradient check failed for `{composite}`: max relative error {max_rel_err:e} exceeds {tol:e}")]
    GradCheckFailed {
        composite: String,
        max_rel_err: f64,
        tol: f64,
    },

    #[error("io: {0}")]
    Io(#[from] std::io::Error),

    #[error("serialization: {0}")]
    Json(#[from] serde_json::Error),

    #[error("format: {msg}")]
    Format { msg: String },
}

impl Error {
    pub fn invalid(op: &'static str, msg: impl Into<String>) -> Self {
        Error::InvalidArgument {
            op,
            msg: msg.into(),
        }
    }

    pub fn format(msg: impl Into<String>) -> Self {
        Error::Format { msg: msg.into() }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
