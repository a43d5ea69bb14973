use std::path::PathBuf;

/// Errors produced by the vocoder library.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("invalid schedule: {0}")]
    Schedule(String),

    #[error("length mismatch in {context}: expected {expected}, got {got}")]
    LengthMismatch {
        context: &'static str,
        expected: usize,
        got: usize,
    },

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("non-finite value in {0}")]
    NonFinite(String),

    #[error("numerical failure at {context}: {message}")]
    Numerical { context: String, message: String },

    #[error("autograd: {0}")]
    Autograd(String),

    #[error("{path}:{line}: {message}")]
    Config {
        path: String,
        line: usize,
        message: String,
    },

    #[error("wav: {0}")]
    Wav(String),

    #[error("tensor archive: {0}")]
    Archive(String),

    #[error("dataset: {0}")]
    Data(String),

    #[error("incompatible schedule: {0}")]
    IncompatibleSchedule(String),

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn invalid(msg: impl Into<String>) -> Self {
        Error::InvalidArgument(msg.into())
    }

    pub(crate) fn shape(msg: impl Into<String>) -> Self {
        Error::Shape(msg.into())
    }

    /// Coarse classification used for process exit codes.
    pub fn category(&self) -> ErrorCategory {
        match self {
            Error::NonFinite(_) | Error::Numerical { .. } => ErrorCategory::Numerical,
            Error::Wav(_) | Error::Archive(_) | Error::Data(_) | Error::Io { .. } => {
                ErrorCategory::Data
            }
            _ => ErrorCategory::Usage,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ErrorCategory {
    Usage,
    Data,
    Numerical,
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

pub(crate) fn check_finite(values: &[f64], what: &str) -> Result<()> {
    if values.iter().all(|v| v.is_finite()) {
        Ok(())
    } else {
        Err(Error::NonFinite(what.to_string()))
    }
}

pub(crate) fn check_len(context: &'static str, expected: usize, got: usize) -> Result<()> {
    if expected == got {
        Ok(())
    } else {
        Err(Error::LengthMismatch {
            context,
            expected,
            got,
        })
    }
}
