use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    /// Caller-supplied data or parameters violate a precondition.
    #[error("invalid input: {0}")]
    Invalid(String),

    /// Dimension or fingerprint disagreement between two artifacts.
    #[error("mismatch: {0}")]
    Mismatch(String),

    #[error("{path}:{line}: {msg}")]
    Parse {
        path: PathBuf,
        line: usize,
        msg: String,
    },

    /// An artifact on disk is missing, truncated or carries the wrong magic.
    #[error("artifact {path}: {msg}")]
    Artifact { path: PathBuf, msg: String },

    #[error("numerical failure: {0}")]
    Numerical(String),

    #[error("training diverged at epoch {epoch}: {msg}")]
    Diverged { epoch: usize, msg: String },

    #[error("protocol cannot be run: {0}")]
    Protocol(String),

    #[error("protocol hygiene violated: {0}")]
    Hygiene(String),

    #[error("config: {0}")]
    Config(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),
}

impl Error {
    pub fn invalid(msg: impl Into<String>) -> Self {
        Error::Invalid(msg.into())
    }

    pub fn mismatch(msg: impl Into<String>) -> Self {
        Error::Mismatch(msg.into())
    }

    /// Process exit status: 2 for invalid inputs or configuration, 3 for a
    /// missing or unreadable upstream artifact, 1 for numerical failures.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Invalid(_)
            | Error::Mismatch(_)
            | Error::Parse { .. }
            | Error::Protocol(_)
            | Error::Hygiene(_)
            | Error::Config(_) => 2,
            Error::Artifact { .. } | Error::Io(_) | Error::Csv(_) => 3,
            Error::Numerical(_) | Error::Diverged { .. } => 1,
        }
    }

    pub fn artifact(path: impl Into<PathBuf>, msg: impl Into<String>) -> Self {
        Error::Artifact {
            path: path.into(),
            msg: msg.into(),
        }
    }
}
