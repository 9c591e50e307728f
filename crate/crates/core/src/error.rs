use std::path::PathBuf;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("invalid input: {0}")]
    InvalidInput(String),

    #[error("invalid state: {0}")]
    InvalidState(String),

    #[error("not found: {0}")]
    NotFound(String),

    #[error("integrity error in {path}: {reason} (byte offset {offset})")]
    Integrity { path: PathBuf, offset: u64, reason: String },

    /// Training produced a non-finite loss. `trace` holds the per-step
    /// losses seen so far.
    #[error("training diverged at epoch {epoch}")]
    TrainingDiverged { epoch: usize, trace: Vec<f64> },

    #[error("stage '{0}' incomplete")]
    StageIncomplete(String),

    #[error("provider error: {0}")]
    Provider(String),

    #[error("config error: {0}")]
    Config(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn invalid(msg: impl Into<String>) -> Self {
        Error::InvalidInput(msg.into())
    }

    pub(crate) fn integrity(path: impl Into<PathBuf>, offset: u64, reason: impl Into<String>) -> Self {
        Error::Integrity {
            path: path.into(),
            offset,
            reason: reason.into(),
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
