use std::path::PathBuf;

use thiserror::Error;

/// Errors raised anywhere in the pipeline.
///
/// Variants map onto the CLI exit codes through [`Error::exit_code`].
#[derive(Debug, Error)]
pub enum Error {
    #[error("format error: {0}")]
    Format(String),
    #[error("truncated payload: header declares {expected} bytes, found {found}")]
    Truncation { expected: usize, found: usize },
    #[error("schema error: {0}")]
    Schema(String),
    #[error("invariant violated: {0}")]
    Invariant(String),
    #[error("geometry error: {0}")]
    Geometry(String),
    #[error("label conflict at pixel (row {row}, col {col}): polygons {first} and {second} disagree")]
    Conflict {
        row: usize,
        col: usize,
        first: String,
        second: String,
    },
    #[error("domain error: {0}")]
    Domain(String),
    #[error("configuration error: {0}")]
    Config(String),
    #[error("fold error: {0}")]
    Fold(String),
    #[error("data error: {0}")]
    Data(String),
    #[error("SMO did not converge after {iterations} iterations (max KKT violation {violation:.3e})")]
    Convergence { iterations: usize, violation: f64 },
    #[error("stale input {path}: {reason}")]
    StaleInput { path: PathBuf, reason: String },
    #[error("I/O error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// Process exit code: 2 for configuration problems, 4 for solver
    /// non-convergence, 3 for everything data-related.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Config(_) => 2,
            Error::Convergence { .. } => 4,
            _ => 3,
        }
    }
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
