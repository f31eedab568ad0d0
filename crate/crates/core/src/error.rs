use thiserror::Error;

/// Errors raised by the library.
#[derive(Debug, Error)]
pub enum Error {
    /// Input that violates a documented shape or value invariant.
    #[error("validation error: {0}")]
    Validation(String),
    /// A mathematical precondition does not hold (support mismatch, alpha out of range).
    #[error("domain error: {0}")]
    Domain(String),
    /// An object was used in a state that does not permit the call.
    #[error("state error: {0}")]
    State(String),
    /// A NaN or infinity appeared where a finite value is required.
    #[error("numeric error: {0}")]
    Numeric(String),
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

impl Error {
    /// Short machine-readable tag for the error family.
    pub fn kind(&self) -> &'static str {
        match self {
            Error::Validation(_) => "validation",
            Error::Domain(_) => "domain",
            Error::State(_) => "state",
            Error::Numeric(_) => "numeric",
            Error::Io(_) => "io",
            Error::Json(_) => "json",
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;

pub(crate) fn validation(msg: impl Into<String>) -> Error {
    Error::Validation(msg.into())
}

pub(crate) fn domain(msg: impl Into<String>) -> Error {
    Error::Domain(msg.into())
}
