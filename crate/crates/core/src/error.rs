use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("insufficient samples: need at least {needed}, got {got}")]
    InsufficientSamples { needed: usize, got: usize },

    #[error("invalid input: {0}")]
    InvalidInput(String),

    #[error("pair mismatch: {0}")]
    PairMismatch(String),

    #[error("format error in {path}: {reason}")]
    Format { path: String, reason: String },

    #[error("row {0} has (near-)zero norm")]
    DegenerateRow(usize),

    #[error("invalid split: {0}")]
    InvalidSplit(String),

    #[error("degenerate spectrum: {0}")]
    DegenerateSpectrum(String),

    #[error("degenerate residual: {0}")]
    DegenerateResidual(String),

    #[error("degenerate covariance: {0}")]
    DegenerateCovariance(String),

    #[error("invalid frame: {0}")]
    InvalidFrame(String),

    #[error("transform requires paired input")]
    RequiresPairs,

    #[error("training diverged at step {step}: loss = {loss}")]
    TrainingDiverged { step: usize, loss: f64 },

    #[error("invalid config: {0}")]
    InvalidConfig(String),

    #[error("missing dependency: run `{0}` first")]
    DependencyMissing(String),

    #[error("i/o error at {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub fn format(path: impl Into<String>, reason: impl Into<String>) -> Self {
        Error::Format {
            path: path.into(),
            reason: reason.into(),
        }
    }

    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub fn insufficient(needed: usize, got: usize) -> Self {
        Error::InsufficientSamples { needed, got }
    }

    /// Process exit code: 2 for configuration problems, 3 for data problems,
    /// 4 for training divergence.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::InvalidConfig(_) => 2,
            Error::TrainingDiverged { .. } => 4,
            _ => 3,
        }
    }
}
