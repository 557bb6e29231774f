use thiserror::Error;

#[derive(Debug, Error)]
pub enum HarnessError {
    #[error("io error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },

    #[error("invalid input: {0}")]
    Invalid(String),

    #[error("schema error: {0}")]
    Schema(String),

    #[error("malformed file {path}: {detail}")]
    Format { path: String, detail: String },

    #[error("stream hash mismatch: {0} vs {1}")]
    HashMismatch(String, String),

    #[error("training diverged: {detail} (last good checkpoint: {checkpoint})")]
    Diverged { detail: String, checkpoint: String },

    #[error(transparent)]
    Routing(#[from] moelab_core::Error),

    #[error(transparent)]
    Model(#[from] moelab_lm::LmError),

    #[error(transparent)]
    Csv(#[from] csv::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, HarnessError>;

pub(crate) fn io_err(path: &std::path::Path) -> impl FnOnce(std::io::Error) -> HarnessError + '_ {
    move |source| HarnessError::Io { path: path.display().to_string(), source }
}

pub(crate) fn invalid(msg: impl Into<String>) -> HarnessError {
    HarnessError::Invalid(msg.into())
}
