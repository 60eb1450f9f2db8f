use thiserror::Error;

/// Errors raised by the channel, estimation and outage routines.
#[derive(Debug, Error, Clone, PartialEq)]
pub enum Error {
    #[error("domain error: {0}")]
    Domain(String),

    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },

    #[error("{paths} paths exceed the hypothesis enumeration cap of {cap}")]
    EnumerationCap { paths: usize, cap: usize },

    #[error("infeasible scenario: {0}")]
    Infeasible(String),

    #[error("non-finite value produced: {0}")]
    NonFinite(String),

    #[error("malformed input: {0}")]
    Format(String),
}

pub type Result<T> = std::result::Result<T, Error>;

pub(crate) fn domain<T>(msg: impl Into<String>) -> Result<T> {
    Err(Error::Domain(msg.into()))
}
