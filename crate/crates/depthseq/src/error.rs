use thiserror::Error;

/// Crate-wide error type.
#[derive(Debug, Error)]
pub enum Error {
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
    #[error("malformed header: {0}")]
    Header(String),
    #[error("payload size mismatch")]
    PayloadSize,
    #[error("invalid volume: {0}")]
    InvalidVolume(String),
    #[error("no components")]
    NoComponents,
    #[error("empty mask")]
    EmptyMask,
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("corrupt checkpoint: {0}")]
    Checkpoint(String),
    #[error("invalid config: {0}")]
    Config(String),
    #[error("invalid argument: {0}")]
    Argument(String),
    #[error("non-finite loss at epoch {epoch}: {value}")]
    Divergence { epoch: usize, value: f64 },
    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
