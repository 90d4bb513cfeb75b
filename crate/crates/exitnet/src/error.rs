use thiserror::Error;

/// Error type shared by every module in the crate.
#[derive(Debug, Error)]
pub enum Error {
    /// Invalid configuration value or incompatible shapes supplied by the caller.
    #[error("configuration error: {0}")]
    Config(String),

    /// Internal inconsistency, e.g. a backward pass fed a cache from a
    /// different layer. Indicates a bug in the calling code.
    #[error("internal error: {0}")]
    Internal(String),

    /// A training run hit a non-finite loss or gradient and was aborted.
    #[error("training aborted: {0}")]
    Training(String),

    /// Checkpoint or dataset file could not be parsed.
    #[error("format error in {path}: {reason}")]
    Format { path: String, reason: String },

    /// Dataset-level problem (empty set, missing class, insufficient budget).
    #[error("data error: {0}")]
    Data(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub(crate) fn config(msg: impl Into<String>) -> Self {
        Error::Config(msg.into())
    }

    pub(crate) fn internal(msg: impl Into<String>) -> Self {
        Error::Internal(msg.into())
    }

    pub(crate) fn data(msg: impl Into<String>) -> Self {
        Error::Data(msg.into())
    }

    pub(crate) fn format(path: impl Into<String>, reason: impl Into<String>) -> Self {
        Error::Format {
            path: path.into(),
            reason: reason.into(),
        }
    }
}
