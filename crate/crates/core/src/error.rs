use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid search space: {0}")]
    Space(String),

    #[error("invalid configuration: {}", .0.join("; "))]
    InvalidConfig(Vec<String>),

    #[error("{file}:{line}: {message}")]
    Load {
        file: PathBuf,
        line: usize,
        message: String,
    },

    #[error("off-grid query: configuration is not a row of task `{task}`")]
    OffGrid { task: String },

    #[error("degenerate task `{0}`: f_max equals f_min")]
    DegenerateTask(String),

    #[error("dimension mismatch: expected {expected}, got {got}")]
    Dimension { expected: usize, got: usize },

    #[error("numerical failure: {0}")]
    Numerical(String),

    #[error("checkpoint: {0}")]
    Checkpoint(String),

    #[error("training aborted: {skipped} of {total} steps failed numerically (last error: {last})")]
    TrainingAborted { skipped: usize, total: usize, last: String },

    #[error("search exhausted: no unevaluated candidates remain")]
    SearchExhausted,

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),
}

impl Error {
    /// Short machine-readable tag, used by the CLI error report.
    pub fn kind(&self) -> &'static str {
        match self {
            Error::Space(_) => "space",
            Error::InvalidConfig(_) => "invalid_config",
            Error::Load { .. } => "load",
            Error::OffGrid { .. } => "off_grid",
            Error::DegenerateTask(_) => "degenerate_task",
            Error::Dimension { .. } => "dimension",
            Error::Numerical(_) => "numerical",
            Error::Checkpoint(_) => "checkpoint",
            Error::TrainingAborted { .. } => "training_aborted",
            Error::SearchExhausted => "search_exhausted",
            Error::InvalidArgument(_) => "invalid_argument",
            Error::Io { .. } => "io",
            Error::Json(_) => "json",
            Error::Csv(_) => "csv",
        }
    }

    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
