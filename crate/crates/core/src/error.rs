use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid config `{field}`: {message}")]
    Config { field: String, message: String },

    #[error("lookup failed: {0}")]
    Lookup(String),

    #[error("dimension mismatch: expected {expected}, got {got}")]
    Dimension { expected: usize, got: usize },

    #[error("empty input: {0}")]
    Empty(&'static str),

    #[error("positivity violated: no rows with action {action} ({context})")]
    Positivity { action: usize, context: String },

    #[error("action stratum {action} holds {available} rows, fewer than k = {k}")]
    Starvation { action: usize, available: usize, k: usize },

    #[error("non-finite value in `{component}`")]
    NonFinite { component: &'static str },

    #[error("training diverged at epoch {epoch}: total loss {total}")]
    Divergence { epoch: usize, total: f64, trace: Vec<crate::encoder::EpochLoss> },

    #[error("layout mismatch: {0}")]
    Layout(String),

    #[error("oracle does not cover {} theta keys (first: {:?})", missing.len(), missing.first())]
    Coverage { missing: Vec<(u32, i64)> },

    #[error("format error in {path}: {message}")]
    Format { path: PathBuf, message: String },

    #[error("stage `{stage}` failed: {source}")]
    Stage { stage: &'static str, source: Box<Error> },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),
}

impl Error {
    pub fn config(field: impl Into<String>, message: impl Into<String>) -> Self {
        Error::Config { field: field.into(), message: message.into() }
    }

    /// Wraps the error with the name of the pipeline stage it came from.
    pub fn in_stage(self, stage: &'static str) -> Self {
        match self {
            e @ Error::Stage { .. } => e,
            other => Error::Stage { stage, source: Box::new(other) },
        }
    }

    /// True for errors a CLI should report with the config-error exit code.
    pub fn is_config(&self) -> bool {
        match self {
            Error::Config { .. } => true,
            Error::Stage { source, .. } => source.is_config(),
            _ => false,
        }
    }
}
