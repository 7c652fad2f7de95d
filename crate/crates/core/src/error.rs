use thiserror::Error;

/// Errors raised by the library surface.
#[derive(Debug, Error, Clone, PartialEq)]
pub enum Error {
    /// Malformed input: wrong lengths, non-finite values, out-of-range tokens.
    #[error("validation error: {0}")]
    Validation(String),
    /// Argument outside the mathematical domain of the operation.
    #[error("domain error: {0}")]
    Domain(String),
    /// Trajectory space too large to enumerate.
    #[error("size error: {size} trajectories exceeds cap {cap}")]
    Size { size: u128, cap: usize },
    /// A loss, gradient or parameter became NaN or infinite.
    #[error("non-finite value: {0}")]
    NonFinite(String),
}

pub type Result<T> = std::result::Result<T, Error>;

pub(crate) fn validation(msg: impl Into<String>) -> Error {
    Error::Validation(msg.into())
}

pub(crate) fn domain(msg: impl Into<String>) -> Error {
    Error::Domain(msg.into())
}
