//! Error type shared across the crate.
//!
//! Two failure classes matter to callers: *validation* errors (malformed
//! inputs, inconsistent linkage, bad configuration) and *numerical* errors
//! (non-finite values, failed factorizations).  The CLI maps them to distinct
//! exit codes, so every constructor below keeps the class explicit.

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    /// Malformed or inconsistent input: bad CSV rows, dangling references,
    /// invalid configuration values.  Messages carry file/row context where
    /// available.
    #[error("validation: {0}")]
    Validation(String),

    /// Numerical failure during sampling or summarization: non-finite
    /// likelihoods, covariance matrices that cannot be factorized, etc.
    #[error("numerical: {0}")]
    Numerical(String),

    #[error("io: {0}")]
    Io(#[from] std::io::Error),

    #[error("csv: {0}")]
    Csv(#[from] csv::Error),

    #[error("json: {0}")]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub fn validation(msg: impl Into<String>) -> Self {
        Error::Validation(msg.into())
    }

    pub fn numerical(msg: impl Into<String>) -> Self {
        Error::Numerical(msg.into())
    }

    /// True when the error came from input validation rather than numerics.
    pub fn is_validation(&self) -> bool {
        matches!(self, Error::Validation(_) | Error::Csv(_))
    }
}
