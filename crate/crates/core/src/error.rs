use thiserror::Error;

/// Errors raised across the toolkit.
#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("domain error: {0}")]
    Domain(String),

    #[error("unsupported activation: {0}")]
    UnsupportedActivation(String),

    #[error("unknown system `{0}`")]
    UnknownSystem(String),

    #[error("capacity exceeded: {0}")]
    Capacity(String),

    #[error("numerical fault: {0}")]
    Numerical(String),

    #[error("invalid model file: {0}")]
    Format(String),

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
