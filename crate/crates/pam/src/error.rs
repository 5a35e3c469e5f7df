use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    /// Tensor rank/extent disagreement, named dimension included in the message.
    #[error("shape error: {0}")]
    Shape(String),
    /// Semantically invalid argument (out-of-range yaw, bad placement text, ...).
    #[error("invalid argument: {0}")]
    Invalid(String),
    /// A forward primitive produced NaN/Inf from finite inputs.
    #[error("non-finite value: {0}")]
    NonFinite(String),
    #[error("config error: {0}")]
    Config(String),
    #[error("checkpoint error: {0}")]
    Checkpoint(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
