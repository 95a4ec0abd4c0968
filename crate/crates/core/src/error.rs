use thiserror::Error;

use crate::objective::LossReport;

#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension mismatch in {op}: {left:?} vs {right:?}")]
    Dimension {
        op: &'static str,
        left: Vec<usize>,
        right: Vec<usize>,
    },
    #[error("domain error: {0}")]
    Domain(String),
    #[error("non-finite input to {op} at flat index {index}")]
    Numeric { op: &'static str, index: usize },
    #[error("degenerate embedding: row {row} has norm {norm:e}")]
    DegenerateEmbedding { row: usize, norm: f64 },
    #[error("contract violated: {0}")]
    Contract(String),
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("invalid label: {0}")]
    Label(String),
    #[error("invalid episode: {0}")]
    Episode(String),
    #[error("embedding file format error at byte {offset}: {message}")]
    Format { offset: u64, message: String },
    #[error("loss became non-finite at step {step} (total = {})", .report.total)]
    Divergence { step: usize, report: Box<LossReport> },
    #[error("seed {seed} failed: {source}")]
    Seed {
        seed: u64,
        #[source]
        source: Box<Error>,
    },
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
    #[error(transparent)]
    Csv(#[from] csv::Error),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
