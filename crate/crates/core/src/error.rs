//! Crate-wide error type.

use thiserror::Error;

#[derive(Debug, Error)]
pub enum GgdError {
    /// Tensor or sequence shapes do not line up.
    #[error("dimension error: {0}")]
    Dimension(String),
    /// A value is outside the mathematical domain of an operation.
    #[error("domain error: {0}")]
    Domain(String),
    /// An internal API contract was violated by the caller.
    #[error("contract error: {0}")]
    Contract(String),
    /// Malformed user-supplied data (corpora, token ids, checkpoints paths).
    #[error("input error: {0}")]
    Input(String),
    /// Invalid configuration.
    #[error("config error: {0}")]
    Config(String),
    /// Corrupt or incompatible checkpoint bytes.
    #[error("checkpoint error: {0}")]
    Checkpoint(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, GgdError>;
