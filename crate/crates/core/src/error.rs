use std::path::PathBuf;

use rob_tensor::TensorError;

pub type Result<T, E = RobError> = std::result::Result<T, E>;

#[derive(Debug, thiserror::Error)]
pub enum RobError {
    #[error("cannot ingest {path}: {reason}")]
    Ingestion { path: PathBuf, reason: String },

    /// Invalid user-facing configuration; reported with exit code 2.
    #[error("invalid configuration: {0}")]
    Config(String),

    /// A runtime contract was violated (frozen parameters changed, teacher fed
    /// small crops, mismatched shapes between paired inputs...).
    #[error("contract violation: {0}")]
    Contract(String),

    #[error("malformed {what}: {reason}")]
    Format { what: &'static str, reason: String },

    #[error("digest mismatch for {what}: expected {expected}, found {found}")]
    Digest {
        what: String,
        expected: String,
        found: String,
    },

    #[error("not found: {0}")]
    NotFound(String),

    #[error(transparent)]
    Tensor(#[from] TensorError),

    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        source: std::io::Error,
    },
}

impl RobError {
    pub fn config(msg: impl Into<String>) -> Self {
        RobError::Config(msg.into())
    }

    pub fn contract(msg: impl Into<String>) -> Self {
        RobError::Contract(msg.into())
    }

    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        RobError::Io {
            path: path.into(),
            source,
        }
    }

    /// Process exit code: 2 for validation problems, 3 for everything else.
    pub fn exit_code(&self) -> i32 {
        match self {
            RobError::Config(_) => 2,
            _ => 3,
        }
    }
}
