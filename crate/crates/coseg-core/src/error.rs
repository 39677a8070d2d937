//! Error type shared across the crate.

use thiserror::Error;

#[derive(Debug, Error)]
pub enum CosegError {
    /// Two shapes that must agree do not. Both shapes are spelled out so the
    /// failing call site can be diagnosed from the message alone.
    #[error("{op}: shape mismatch: {lhs} vs {rhs}")]
    ShapeMismatch { op: String, lhs: String, rhs: String },

    /// An argument violated an operation's precondition.
    #[error("{op}: {msg}")]
    InvalidArgument { op: String, msg: String },

    /// Bad model/run configuration (unknown key, unparseable value, ...).
    #[error("config: {0}")]
    Config(String),

    /// Malformed file content; `offset` is the byte position of the problem.
    #[error("parse error at byte {offset}: {msg}")]
    Parse { offset: usize, msg: String },

    #[error("checkpoint: {0}")]
    Checkpoint(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, CosegError>;

impl CosegError {
    pub fn shape_mismatch(op: &str, lhs: &[usize], rhs: &[usize]) -> Self {
        CosegError::ShapeMismatch {
            op: op.to_string(),
            lhs: format_dims(lhs),
            rhs: format_dims(rhs),
        }
    }

    pub fn invalid(op: &str, msg: impl Into<String>) -> Self {
        CosegError::InvalidArgument {
            op: op.to_string(),
            msg: msg.into(),
        }
    }
}

/// `[2, 3, 4]` -> `"2x3x4"`; the empty (scalar) shape prints as `"scalar"`.
pub fn format_dims(dims: &[usize]) -> String {
    if dims.is_empty() {
        return "scalar".to_string();
    }
    dims.iter()
        .map(|d| d.to_string())
        .collect::<Vec<_>>()
        .join("x")
}
