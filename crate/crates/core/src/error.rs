use std::path::PathBuf;

/// Errors surfaced by every stage of the pipeline.
///
/// The variants map onto the process exit codes used by the CLI: usage and
/// configuration problems exit with 1, data and numeric failures with 2.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    /// Malformed input, schema violations, overlength sequences, corrupt files.
    #[error("data error: {0}")]
    Data(String),
    /// Caller misuse: empty batches, bad thresholds, mismatched architectures.
    #[error("usage error: {0}")]
    Usage(String),
    /// Non-finite values during optimization.
    #[error("numeric error: {0}")]
    Numeric(String),
    #[error("data error: {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    pub fn data(msg: impl Into<String>) -> Self {
        Error::Data(msg.into())
    }

    pub fn usage(msg: impl Into<String>) -> Self {
        Error::Usage(msg.into())
    }

    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// Process exit code for this error class.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Usage(_) => 1,
            Error::Data(_) | Error::Numeric(_) | Error::Io { .. } => 2,
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
