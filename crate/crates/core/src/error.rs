use std::path::PathBuf;

use thiserror::Error;

/// Errors produced by the estimation pipeline.
#[derive(Debug, Error)]
pub enum FqrError {
    #[error("invalid input: {0}")]
    InvalidInput(String),

    #[error("dimension mismatch in {context}: expected {expected}, got {got}")]
    Dimension {
        context: &'static str,
        expected: usize,
        got: usize,
    },

    #[error("point {t} lies outside the basis domain [{start}, {end}]")]
    OutOfDomain { t: f64, start: f64, end: f64 },

    #[error("{path}: row {row}, column '{column}': {message}")]
    Csv {
        path: String,
        row: usize,
        column: String,
        message: String,
    },

    #[error("solver did not converge: {0}")]
    Convergence(String),

    #[error("line search failed to decrease the objective (step {step:e}, objective {objective})")]
    LineSearch { step: f64, objective: f64 },

    #[error("bootstrap failed: {0}")]
    Bootstrap(String),

    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),

    #[error("csv error: {0}")]
    CsvLib(#[from] csv::Error),
}

impl FqrError {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        FqrError::Io {
            path: path.into(),
            source,
        }
    }

    /// True for failures caused by the caller's inputs rather than the numerics.
    pub fn is_input_error(&self) -> bool {
        !matches!(
            self,
            FqrError::Convergence(_) | FqrError::LineSearch { .. } | FqrError::Bootstrap(_)
        )
    }
}

pub type Result<T> = std::result::Result<T, FqrError>;
