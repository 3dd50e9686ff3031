use thiserror::Error;

/// Crate-wide error type.
#[derive(Debug, Error)]
pub enum Error {
    /// Invalid configuration (bad key, value out of range, malformed file).
    #[error("config error: {0}")]
    Config(String),

    /// Shape or dimension mismatch between tensors, layers, or batches.
    #[error("dimension mismatch: {0}")]
    Dim(String),

    /// A computation produced NaN or infinity where a finite value is required.
    #[error("non-finite value: {0}")]
    NonFinite(String),

    /// An operation was given an empty collection it cannot work with.
    #[error("empty input: {0}")]
    Empty(String),

    /// Malformed or incompatible checkpoint / dump file.
    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    /// Environment-level fault during collection or evaluation.
    #[error("environment fault: {0}")]
    Env(String),

    #[error("io error: {0}")]
    Io(#[from] std::io::Error),

    /// Any other runtime failure.
    #[error("{0}")]
    Runtime(String),
}

pub type Result<T> = std::result::Result<T, Error>;
