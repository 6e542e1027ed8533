use thiserror::Error;

/// Errors raised anywhere in the library.
#[derive(Debug, Error)]
pub enum Error {
    #[error("schema error: {0}")]
    Schema(String),

    #[error("data error in cell `{cell}`: {message}")]
    Data { cell: String, message: String },

    #[error("index out of bounds: {0}")]
    Bounds(String),

    #[error("degenerate input: {0}")]
    DegenerateInput(String),

    #[error("configuration error: {0}")]
    Config(String),

    #[error("parse error: {0}")]
    Parse(String),

    #[error("evaluation error: {0}")]
    Evaluation(String),

    /// Cholesky factorization failed even at the largest jitter.
    #[error("numerical error: factorization failed after jitter {jitter:.3e} (condition estimate {condition:.3e})")]
    Numerical { jitter: f64, condition: f64 },

    #[error("training failed on every restart: {}", .0.join("; "))]
    Training(Vec<String>),

    #[error("undefined metric: {0}")]
    UndefinedMetric(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
