use thiserror::Error;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum LmError {
    #[error("invalid shape: {0}")]
    InvalidShape(String),
    #[error("invalid input: {0}")]
    InvalidInput(String),
    #[error("invalid config: {0}")]
    InvalidConfig(String),
    #[error("non-finite value produced by {0}")]
    NonFinite(String),
    #[error("routing: {0}")]
    Routing(#[from] moelab_core::Error),
}

pub type Result<T> = std::result::Result<T, LmError>;

pub(crate) fn shape_err(msg: impl Into<String>) -> LmError {
    LmError::InvalidShape(msg.into())
}
