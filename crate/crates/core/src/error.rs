use thiserror::Error;

use sbal_nn::ModelError;

#[derive(Debug, Error)]
pub enum CoreError {
    #[error("invalid input: {0}")]
    Invalid(String),
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("pool violation: {0}")]
    Pool(String),
    #[error("missing score for sample {0}")]
    MissingScore(String),
    #[error("insufficient pool: need {needed}, have {available}")]
    InsufficientPool { needed: usize, available: usize },
    #[error("integrity check failed: {0}")]
    Integrity(String),
    #[error("config digest mismatch: stored {stored}, requested {requested}")]
    DigestMismatch { stored: String, requested: String },
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, CoreError>;

pub(crate) fn invalid(msg: impl Into<String>) -> CoreError {
    CoreError::Invalid(msg.into())
}
