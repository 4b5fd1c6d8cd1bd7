use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape error: {0}")]
    Shape(String),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("config error: {0}")]
    Config(String),

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("{path}: bad magic number {found:#010x} (expected {expected:#010x})")]
    BadMagic {
        path: PathBuf,
        found: u32,
        expected: u32,
    },

    #[error("{path}: truncated file ({detail})")]
    Truncated { path: PathBuf, detail: String },

    #[error("{path}: count mismatch ({detail})")]
    CountMismatch { path: PathBuf, detail: String },

    #[error("format error: {0}")]
    Format(String),

    #[error("data error: {0}")]
    Data(String),

    #[error("non-finite value: {0}")]
    NonFinite(String),

    /// A numerical check (gradient check, ablation gap) missed its threshold.
    #[error("check failed: {0}")]
    CheckFailed(String),
}

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// Process exit code for the command line: 1 usage, 2 data, 3 numeric.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Shape(_) | Error::InvalidArgument(_) | Error::Config(_) => 1,
            Error::Io { .. }
            | Error::BadMagic { .. }
            | Error::Truncated { .. }
            | Error::CountMismatch { .. }
            | Error::Format(_)
            | Error::Data(_) => 2,
            Error::NonFinite(_) | Error::CheckFailed(_) => 3,
        }
    }
}
