use thiserror::Error;

/// Every failure the library reports. The CLI maps `Config` to exit code 2.
#[derive(Debug, Clone, PartialEq, Error)]
pub enum Error {
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("configuration error: {0}")]
    Config(String),
    /// The oracle model was violated: capacity, padding budget, or MLP budget.
    #[error("restriction violated: {0}")]
    Restriction(String),
    #[error("degenerate value: {0}")]
    Degenerate(String),
}

pub type Result<T> = std::result::Result<T, Error>;

pub(crate) fn shape(msg: impl Into<String>) -> Error {
    Error::Shape(msg.into())
}

pub(crate) fn config(msg: impl Into<String>) -> Error {
    Error::Config(msg.into())
}

pub(crate) fn restriction(msg: impl Into<String>) -> Error {
    Error::Restriction(msg.into())
}

pub(crate) fn degenerate(msg: impl Into<String>) -> Error {
    Error::Degenerate(msg.into())
}
