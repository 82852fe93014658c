//! Error type shared by every module of the workbench.

use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    /// Tensor extents that do not fit the operation.
    #[error("dimension error: {0}")]
    Dimension(String),

    /// Invalid hyper-parameters or configuration values.
    #[error("configuration error: {0}")]
    Config(String),

    /// Configuration text that failed to parse, with its 1-based line.
    #[error("config line {line}: {message}")]
    ConfigLine { line: usize, message: String },

    /// Inputs that are well-formed but semantically invalid.
    #[error("validation error: {0}")]
    Validation(String),

    /// Misuse of a stateful object, e.g. running backward twice.
    #[error("state error: {0}")]
    State(String),

    /// A value that is NaN or infinite where finiteness is required.
    #[error("non-finite value in {0}")]
    NonFinite(String),

    /// Malformed binary or JSON container.
    #[error("format error at byte {offset}: {message}")]
    Format { offset: u64, message: String },

    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn dim(msg: impl Into<String>) -> Self {
        Error::Dimension(msg.into())
    }

    pub(crate) fn config(msg: impl Into<String>) -> Self {
        Error::Config(msg.into())
    }

    pub(crate) fn validation(msg: impl Into<String>) -> Self {
        Error::Validation(msg.into())
    }

    pub(crate) fn format(offset: u64, msg: impl Into<String>) -> Self {
        Error::Format {
            offset,
            message: msg.into(),
        }
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// Process exit code used by the command-line front end.
    ///
    /// 2 for configuration problems, 3 for I/O, 4 for everything that is a
    /// validation failure of inputs or artifacts.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Config(_) | Error::ConfigLine { .. } => 2,
            Error::Io { .. } => 3,
            Error::Dimension(_)
            | Error::Validation(_)
            | Error::State(_)
            | Error::NonFinite(_)
            | Error::Format { .. }
            | Error::Json(_) => 4,
        }
    }
}
