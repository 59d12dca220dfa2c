use thiserror::Error;

#[derive(Debug, Error)]
pub enum ModelError {
    #[error("invalid model config: {0}")]
    InvalidConfig(String),
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("dropout is active but no random stream was supplied")]
    MissingRng,
    #[error("feature taps do not match the loss predictor: {0}")]
    TapMismatch(String),
    #[error("state mismatch: {0}")]
    State(String),
    #[error("checkpoint: {0}")]
    Checkpoint(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}
