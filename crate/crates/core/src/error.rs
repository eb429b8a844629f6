use std::path::PathBuf;

/// Errors surfaced by every public operation in this crate.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    /// Caller supplied a value outside an operation's contract.
    #[error("invalid input: {0}")]
    InvalidInput(String),

    /// A configuration cannot be realized (e.g. a DRAM budget too small for the draft sub-network).
    #[error("configuration error: {0}")]
    Config(String),

    /// Internal state disagreed with itself. Always a bug in the engine, never user error.
    #[error("internal consistency error: {0}")]
    Internal(String),

    #[error("training diverged at step {step} (loss = {loss})")]
    Divergence { step: usize, loss: f64 },

    #[error("malformed file {path}: {reason}")]
    Format { path: PathBuf, reason: String },

    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

pub type Result<T> = std::result::Result<T, Error>;

pub(crate) fn invalid(msg: impl Into<String>) -> Error {
    Error::InvalidInput(msg.into())
}

pub(crate) fn internal(msg: impl Into<String>) -> Error {
    Error::Internal(msg.into())
}

pub(crate) fn io_err(path: impl Into<PathBuf>) -> impl FnOnce(std::io::Error) -> Error {
    let path = path.into();
    move |source| Error::Io { path, source }
}
