use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, GridError>;

#[derive(Debug, Error)]
pub enum GridError {
    #[error("{path}:{line}: {msg}")]
    Parse {
        path: PathBuf,
        line: usize,
        msg: String,
    },

    #[error("validation error: {0}")]
    Validation(String),

    /// Rows whose maximum entry is shared by two or more classes.
    #[error("prediction rows with tied argmax: {0:?}")]
    TiedArgmax(Vec<usize>),

    #[error("insufficient structure: {0}")]
    InsufficientStructure(String),

    #[error("metric {0} has no gradient")]
    UnsupportedMetric(&'static str),

    #[error("empty pair list")]
    EmptyPairs,

    #[error("training diverged: {0}")]
    Diverged(String),

    #[error("internal invariant violated: {0}")]
    Invariant(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),
}

impl GridError {
    pub(crate) fn parse(path: impl Into<PathBuf>, line: usize, msg: impl Into<String>) -> Self {
        GridError::Parse {
            path: path.into(),
            line,
            msg: msg.into(),
        }
    }
}
