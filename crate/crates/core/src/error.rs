use std::io;
use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    /// Bad magic, unsupported version or malformed header.
    #[error("format error: {0}")]
    Format(String),

    /// The payload ended before the header said it would.
    #[error("corruption: {0}")]
    Corruption(String),

    /// Well-formed input carrying unusable values (non-finite, zero-norm tokens, ...).
    #[error("data error: {0}")]
    Data(String),

    /// Caller violated a precondition.
    #[error("usage error: {0}")]
    Usage(String),

    /// A non-finite or degenerate intermediate showed up during computation.
    #[error("numeric error in {stage}: {detail}")]
    Numeric { stage: &'static str, detail: String },

    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: io::Error,
    },
}

impl Error {
    pub(crate) fn usage(msg: impl Into<String>) -> Self {
        Error::Usage(msg.into())
    }

    pub(crate) fn numeric(stage: &'static str, detail: impl Into<String>) -> Self {
        Error::Numeric { stage, detail: detail.into() }
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: io::Error) -> Self {
        Error::Io { path: path.into(), source }
    }

    /// Process exit code used by the command-line tool.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Numeric { .. } => 3,
            _ => 2,
        }
    }
}
