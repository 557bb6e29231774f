use thiserror::Error;

/// Errors raised by the routing, balancing, codec and metric kernels.
#[derive(Debug, Clone, PartialEq, Error)]
pub enum Error {
    #[error("invalid config: {0}")]
    InvalidConfig(String),

    #[error("invalid pool: {n_tokens} tokens cannot be split across expansion {expansion}")]
    InvalidPool { n_tokens: usize, expansion: usize },

    #[error("empty routing pool")]
    EmptyPool,

    #[error("invalid comparison: {0}")]
    InvalidComparison(String),

    #[error("no tokens tagged with domain {0:?}")]
    EmptyDomain(String),

    #[error("threshold state used before the first training update")]
    Uninitialized,
}

pub type Result<T> = std::result::Result<T, Error>;

pub(crate) fn invalid(msg: impl Into<String>) -> Error {
    Error::InvalidConfig(msg.into())
}
