//! Error type shared across the toolkit.

use thiserror::Error;

/// Unified error type for all fallible operations in this crate.
#[derive(Debug, Error)]
pub enum Error {
    /// An argument violated a documented precondition.
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
    /// A value fell outside the mathematical domain of an operation.
    #[error("domain error: {0}")]
    Domain(String),
    /// A dataset could not be ingested or failed a sanity check.
    #[error("data error: {0}")]
    Data(String),
    /// A model/loss/method combination that is not defined.
    #[error("unsupported combination: {0}")]
    Unsupported(String),
    /// Training aborted (non-finite loss, empty batch, ...).
    #[error("training error: {0}")]
    Train(String),
    #[error("I/O error: {0}")]
    Io(#[from] std::io::Error),
    #[error("CSV error: {0}")]
    Csv(#[from] csv::Error),
    #[error("JSON error: {0}")]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub fn invalid(msg: impl Into<String>) -> Self {
        Error::InvalidArgument(msg.into())
    }

    pub fn domain(msg: impl Into<String>) -> Self {
        Error::Domain(msg.into())
    }

    pub fn data(msg: impl Into<String>) -> Self {
        Error::Data(msg.into())
    }
}
