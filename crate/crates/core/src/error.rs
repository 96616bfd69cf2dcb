//! Crate-wide error type and the exit-code mapping used by the binary.

use std::path::PathBuf;

/// Errors raised anywhere in the library.
#[derive(Debug, thiserror::Error)]
pub enum SapoError {
    /// Invalid configuration or task specification.
    #[error("configuration error: {0}")]
    Config(String),
    /// A value violates a data invariant (token id out of range, empty response, ...).
    #[error("validation error: {0}")]
    Validation(String),
    /// A dataset line could not be parsed.
    #[error("parse error at line {line}: {message}")]
    Parse { line: usize, message: String },
    /// Operands of a tensor primitive have incompatible shapes.
    #[error("shape error in {op}: {lhs:?} vs {rhs:?}")]
    Shape {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },
    /// A caller broke an operation's precondition.
    #[error("contract error: {0}")]
    Contract(String),
    /// Input outside a function's mathematical domain.
    #[error("domain error: {0}")]
    Domain(String),
    /// NaN or infinity where a finite value is required.
    #[error("numeric error: {0}")]
    Numeric(String),
    /// The replay buffer had nothing to sample.
    #[error("replay buffer is empty")]
    BufferEmpty,
    /// Evaluation could not run.
    #[error("evaluation error: {0}")]
    Eval(String),
    /// A checkpoint or other binary artifact is malformed.
    #[error("format error in {path}: {message}")]
    Format { path: PathBuf, message: String },
    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
    #[error("csv error: {0}")]
    Csv(#[from] csv::Error),
}

pub type Result<T> = std::result::Result<T, SapoError>;

impl SapoError {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        SapoError::Io {
            path: path.into(),
            source,
        }
    }

    /// Process exit code: 2 configuration/validation, 3 data format, 4 numeric abort.
    pub fn exit_code(&self) -> i32 {
        match self {
            SapoError::Format { .. } | SapoError::Parse { .. } => 3,
            SapoError::Numeric(_) | SapoError::Domain(_) => 4,
            _ => 2,
        }
    }
}

/// Fails with [`SapoError::Numeric`] unless `value` is finite.
pub(crate) fn ensure_finite(value: f64, what: &str) -> Result<f64> {
    if value.is_finite() {
        Ok(value)
    } else {
        Err(SapoError::Numeric(format!("{what} is not finite ({value})")))
    }
}
