//! Crate-wide error type and result alias.

use thiserror::Error;

/// All failure modes surfaced by the library.
///
/// The CLI maps these onto process exit codes: configuration, usage,
/// ingest and checkpoint problems exit 2, numeric failures exit 3.
#[derive(Debug, Error)]
pub enum Error {
    /// Tensor shapes or dimensions do not line up.
    #[error("dimension error: {0}")]
    Dim(String),

    /// A computation produced or received a non-finite value.
    #[error("numeric error: {0}")]
    Numeric(String),

    /// An operation was called outside its contract.
    #[error("contract error: {0}")]
    Contract(String),

    /// Invalid configuration value or combination.
    #[error("configuration error: {0}")]
    Config(String),

    /// A dataset file could not be parsed.
    #[error("ingest error: {0}")]
    Ingest(String),

    /// An index or offset fell outside its valid range.
    #[error("range error: {0}")]
    Range(String),

    /// A lookup asked for information from the future.
    #[error("causality error: {0}")]
    Causality(String),

    /// Correlation is undefined for the given inputs.
    #[error("undefined correlation: {0}")]
    Correlation(String),

    /// A benchmark measurement cannot be trusted.
    #[error("benchmark error: {0}")]
    Bench(String),

    /// Checkpoint container is malformed or incompatible.
    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

impl Error {
    /// Exit code the CLI uses for this error class.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Numeric(_) => 3,
            _ => 2,
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
