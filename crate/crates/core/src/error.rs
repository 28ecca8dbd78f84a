use std::io;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, LitError>;

#[derive(Debug, Error)]
pub enum LitError {
    #[error("dimension error in {op}: {detail}")]
    Shape { op: &'static str, detail: String },

    #[error("non-finite value produced by {op}")]
    NonFinite { op: &'static str },

    #[error("invalid configuration: {}", .0.join("; "))]
    Config(Vec<String>),

    #[error("invalid state: {0}")]
    State(String),

    #[error("validation failed: {0}")]
    Validation(String),

    #[error("checkpoint format: {0}")]
    Format(String),

    #[error(transparent)]
    Io(#[from] io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl LitError {
    pub(crate) fn shape(op: &'static str, detail: impl Into<String>) -> Self {
        LitError::Shape { op, detail: detail.into() }
    }

    pub(crate) fn config(msg: impl Into<String>) -> Self {
        LitError::Config(vec![msg.into()])
    }
}
