use std::path::PathBuf;

/// Errors produced across the detector pipeline.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    /// An input tensor or value did not satisfy an operation's preconditions.
    #[error("rejected input: {0}")]
    RejectedInput(String),

    #[error("configuration error: {0}")]
    Config(String),

    /// Two configurations that must agree (e.g. a checkpoint and a run config) do not.
    #[error("configuration conflict: {0}")]
    ConfigConflict(String),

    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    #[error("data error ({path}): {message}")]
    Data { path: PathBuf, message: String },

    #[error("manifest line {line}: {message}")]
    Manifest { line: usize, message: String },

    #[error("missing {count} manifest file(s): {}", .paths.iter().map(|p| p.display().to_string()).collect::<Vec<_>>().join(", "))]
    MissingFiles { count: usize, paths: Vec<PathBuf> },

    #[error("training diverged at step {step}: {message} (last good checkpoint: {})", .last_good.as_ref().map(|p| p.display().to_string()).unwrap_or_else(|| "none".into()))]
    Divergence {
        step: u64,
        message: String,
        last_good: Option<PathBuf>,
    },

    #[error(transparent)]
    Tensor(#[from] candle::Error),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),
}

impl Error {
    pub(crate) fn data(path: impl Into<PathBuf>, message: impl ToString) -> Self {
        Error::Data {
            path: path.into(),
            message: message.to_string(),
        }
    }

    /// Short machine-readable tag used in structured CLI errors.
    pub fn kind(&self) -> &'static str {
        match self {
            Error::RejectedInput(_) => "rejected_input",
            Error::Config(_) => "config",
            Error::ConfigConflict(_) => "config_conflict",
            Error::Checkpoint(_) => "checkpoint",
            Error::Data { .. } => "data",
            Error::Manifest { .. } => "manifest",
            Error::MissingFiles { .. } => "missing_files",
            Error::Divergence { .. } => "divergence",
            Error::Tensor(_) => "tensor",
            Error::Io(_) => "io",
            Error::Json(_) => "json",
            Error::Csv(_) => "csv",
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
