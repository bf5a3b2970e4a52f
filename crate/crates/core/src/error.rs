use thiserror::Error;

/// Errors surfaced by the library. Fuel exhaustion is not an error; it shows
/// up as [`crate::Verdict::Undecided`] or as an inconclusive report.
#[derive(Debug, Error)]
pub enum Error {
    /// Caller violated a documented precondition.
    #[error("usage error: {0}")]
    Usage(String),

    /// Input is well-formed but outside the domain of the operation.
    #[error("domain error: {0}")]
    Domain(String),

    /// Arithmetic left the `u64` range.
    #[error("overflow while encoding {0}")]
    Overflow(&'static str),

    #[error("store error: {0}")]
    Store(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

pub(crate) fn usage<T>(msg: impl Into<String>) -> Result<T> {
    Err(Error::Usage(msg.into()))
}

pub(crate) fn domain<T>(msg: impl Into<String>) -> Result<T> {
    Err(Error::Domain(msg.into()))
}
