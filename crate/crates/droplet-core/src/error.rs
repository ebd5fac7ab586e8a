use thiserror::Error;

/// Errors shared across the crate.
///
/// `Precondition` covers malformed inputs and violated argument contracts,
/// `Budget` signals that an enumeration would exceed its admissible-vector
/// cap, and `Check` reports a numeric identity that failed to hold within
/// its stated tolerance.
#[derive(Debug, Error)]
pub enum Error {
    #[error("precondition violated: {0}")]
    Precondition(String),
    #[error("enumeration budget exceeded: more than {cap} admissible vectors")]
    Budget { cap: u64 },
    #[error("numeric check failed: {0}")]
    Check(String),
}

impl Error {
    pub fn precondition(msg: impl Into<String>) -> Self {
        Error::Precondition(msg.into())
    }
}

pub type Result<T> = std::result::Result<T, Error>;
