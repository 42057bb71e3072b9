use std::path::PathBuf;

use thiserror::Error;

/// Every failure surface of the library. The CLI maps variants onto exit codes
/// through [`Error::exit_code`].
#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension error: {0}")]
    Dimension(String),
    #[error("configuration error: {0}")]
    Config(String),
    #[error("contract violation: {0}")]
    Contract(String),
    #[error("numeric error: {0}")]
    Numeric(String),
    #[error("degenerate batch: {0}")]
    DegenerateBatch(String),
    #[error("input error: {0}")]
    Input(String),
    #[error("format error: {0}")]
    Format(String),
    #[error("unsupported format: {0}")]
    UnsupportedFormat(String),
    #[error("missing file: {}", .0.display())]
    MissingFile(PathBuf),
    #[error("usage error: {0}")]
    Usage(String),
    #[error("i/o error on {}: {source}", path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

impl Error {
    pub(crate) fn dim(msg: impl Into<String>) -> Self {
        Error::Dimension(msg.into())
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// 0 success, 1 usage, 2 input/format, 3 numeric failure.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Usage(_) | Error::Config(_) | Error::Contract(_) => 1,
            Error::Numeric(_) | Error::DegenerateBatch(_) => 3,
            Error::Dimension(_)
            | Error::Input(_)
            | Error::Format(_)
            | Error::UnsupportedFormat(_)
            | Error::MissingFile(_)
            | Error::Io { .. } => 2,
        }
    }
}
