use thiserror::Error;

/// Errors produced by the library.
#[derive(Debug, Error)]
pub enum DamError {
    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("non-finite value: {0}")]
    NonFinite(String),

    #[error("parse error at line {line}: {msg}")]
    Parse { line: usize, msg: String },

    #[error("format error: {0}")]
    Format(String),

    #[error("numeric failure: {0}")]
    Numeric(String),

    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, DamError>;

pub(crate) fn invalid(msg: impl Into<String>) -> DamError {
    DamError::InvalidArgument(msg.into())
}

pub(crate) fn shape(msg: impl Into<String>) -> DamError {
    DamError::Shape(msg.into())
}
