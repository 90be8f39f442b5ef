use std::path::PathBuf;

use crate::ItemId;

/// Errors raised anywhere in the retrieval / modeling pipeline.
#[derive(Debug, thiserror::Error)]
pub enum MuseError {
    #[error("parse error at byte {offset}: {message}")]
    Parse { offset: u64, message: String },

    #[error("parse error in record {index}: {message}")]
    Record { index: usize, message: String },

    #[error("schema error: {0}")]
    Schema(String),

    #[error("integrity error: {0}")]
    Integrity(String),

    #[error("degenerate embedding for item {0}: zero norm")]
    DegenerateEmbedding(ItemId),

    #[error("missing embedding for item {0}")]
    MissingEmbedding(ItemId),

    #[error("shape error: {0}")]
    Shape(String),

    #[error("data error: {0}")]
    Data(String),

    #[error("configuration error: {0}")]
    Config(String),

    #[error("all {0} attention positions are masked")]
    DegenerateMask(usize),

    #[error("training diverged at step {step}: loss = {loss}")]
    Divergence { step: usize, loss: f64 },

    #[error("invariant violated: {0}")]
    Invariant(String),

    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

/// Coarse failure class, used by the CLI to pick an exit status.
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize)]
#[serde(rename_all = "snake_case")]
pub enum ErrorKind {
    Config,
    Data,
    Internal,
}

impl MuseError {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        MuseError::Io {
            path: path.into(),
            source,
        }
    }

    pub fn kind(&self) -> ErrorKind {
        match self {
            MuseError::Config(_) => ErrorKind::Config,
            MuseError::Invariant(_) | MuseError::Divergence { .. } => ErrorKind::Internal,
            _ => ErrorKind::Data,
        }
    }
}

pub type Result<T, E = MuseError> = std::result::Result<T, E>;
