use std::path::PathBuf;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    /// Feeder topology is not a tree rooted at the feeder head.
    #[error("structural error: {0}")]
    Structure(String),

    #[error("dimension mismatch: {what} (expected {expected}, got {got})")]
    Dimension {
        what: &'static str,
        expected: usize,
        got: usize,
    },

    #[error("domain error: {0}")]
    Domain(String),

    /// One or more EVs cannot reach their target inside the horizon.
    #[error("infeasible: {}", .0.join("; "))]
    Infeasible(Vec<String>),

    #[error("numeric failure: {0}")]
    Numeric(String),

    #[error("{path}:{line}: {msg}")]
    Parse {
        path: PathBuf,
        line: usize,
        msg: String,
    },

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("invalid configuration: {0}")]
    Config(String),
}

impl Error {
    pub(crate) fn dim(what: &'static str, expected: usize, got: usize) -> Self {
        Error::Dimension {
            what,
            expected,
            got,
        }
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// Process exit code used by the command-line front end.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Parse { .. } | Error::Io { .. } | Error::Config(_) => 2,
            Error::Structure(_) | Error::Dimension { .. } => 3,
            Error::Infeasible(_) => 4,
            Error::Domain(_) | Error::Numeric(_) => 5,
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
