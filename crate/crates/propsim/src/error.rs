//! Crate-wide error type.

use std::path::PathBuf;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    /// Malformed input data (edge lists, binary files), with location context.
    #[error("parse error in {path}, line {line}: {msg}")]
    Parse {
        path: PathBuf,
        line: usize,
        msg: String,
    },

    /// A precondition on arguments or data was violated.
    #[error("validation error: {0}")]
    Validation(String),

    /// An internal contract between modules was broken (e.g. channel/model mismatch).
    #[error("contract error: {0}")]
    Contract(String),

    /// A configured resource limit would be exceeded.
    #[error("resource limit: {0}")]
    Resource(String),

    /// Stored data failed an integrity check (hash/checksum mismatch).
    #[error("integrity error: {0}")]
    Integrity(String),

    /// The multi-worker coordination protocol was violated.
    #[error("protocol error: {0}")]
    Protocol(String),

    /// Bad run configuration (unknown keys, missing parameters, ...).
    #[error("config error: {0}")]
    Config(String),

    /// A requested equivalence check failed.
    #[error("verification failure: {0}")]
    Verification(String),

    #[error("I/O error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
