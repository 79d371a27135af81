use thiserror::Error;

/// Error type shared across the simulator.
#[derive(Debug, Error)]
pub enum Error {
    /// Dimension or length mismatch between operands.
    #[error("shape mismatch: {0}")]
    Shape(String),
    /// Non-finite values where finite arithmetic is required.
    #[error("numeric failure: {0}")]
    Numeric(String),
    /// Invalid or inconsistent configuration.
    #[error("invalid configuration: {0}")]
    Config(String),
    /// An operation received an empty input it cannot handle.
    #[error("empty input: {0}")]
    Empty(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error("serialization: {0}")]
    Serde(String),
}

impl From<serde_json::Error> for Error {
    fn from(e: serde_json::Error) -> Self {
        Error::Serde(e.to_string())
    }
}

pub type Result<T> = std::result::Result<T, Error>;
