//! Crate-wide error type.

use std::fmt;
use std::path::PathBuf;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug)]
pub enum Error {
    /// Underlying I/O failure, with the path it happened on when known.
    Io {
        path: Option<PathBuf>,
        source: std::io::Error,
    },
    /// A record in a text input could not be parsed. `line` is 1-based.
    Parse {
        path: PathBuf,
        line: usize,
        message: String,
    },
    /// A binary input has the wrong magic, a truncated body, or an
    /// out-of-range field. `offset` is the byte position when known.
    Format {
        path: PathBuf,
        offset: Option<u64>,
        message: String,
    },
    /// Inputs violate a precondition (bad config value, empty cloud, ...).
    Validation(String),
    /// Tensor or grid shapes do not line up.
    Shape(String),
    /// Numerical failure at runtime (NaN loss, singular statistics, ...).
    Numeric(String),
}

impl Error {
    pub fn validation(msg: impl Into<String>) -> Self {
        Error::Validation(msg.into())
    }

    pub fn shape(msg: impl Into<String>) -> Self {
        Error::Shape(msg.into())
    }

    pub fn numeric(msg: impl Into<String>) -> Self {
        Error::Numeric(msg.into())
    }

    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: Some(path.into()),
            source,
        }
    }

    pub fn format(path: impl Into<PathBuf>, offset: u64, message: impl Into<String>) -> Self {
        Error::Format {
            path: path.into(),
            offset: Some(offset),
            message: message.into(),
        }
    }

    /// Process exit code for the CLI: 2 for validation problems the user
    /// can fix, 3 for runtime failures.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Parse { .. } | Error::Format { .. } | Error::Validation(_) | Error::Shape(_) => {
                2
            }
            Error::Io { .. } | Error::Numeric(_) => 3,
        }
    }
}

impl fmt::Display for Error {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Error::Io { path: Some(p), source } => write!(f, "{}: {}", p.display(), source),
            Error::Io { path: None, source } => write!(f, "{}", source),
            Error::Parse { path, line, message } => {
                write!(f, "{}:{}: {}", path.display(), line, message)
            }
            Error::Format { path, offset: Some(o), message } => {
                write!(f, "{} (byte {}): {}", path.display(), o, message)
            }
            Error::Format { path, offset: None, message } => {
                write!(f, "{}: {}", path.display(), message)
            }
            Error::Validation(m) => write!(f, "invalid input: {}", m),
            Error::Shape(m) => write!(f, "shape mismatch: {}", m),
            Error::Numeric(m) => write!(f, "numerical failure: {}", m),
        }
    }
}

impl std::error::Error for Error {
    fn source(&self) -> Option<&(dyn std::error::Error + 'static)> {
        match self {
            Error::Io { source, .. } => Some(source),
            _ => None,
        }
    }
}

impl From<std::io::Error> for Error {
    fn from(e: std::io::Error) -> Self {
        Error::Io {
            path: None,
            source: e,
        }
    }
}
