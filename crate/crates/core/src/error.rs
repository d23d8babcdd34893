use thiserror::Error;

/// Errors raised by the estimation, fitting and simulation routines.
#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid split: s = {s} must satisfy 0 < s < n = {n}")]
    InvalidSplit { s: usize, n: usize },

    #[error("insufficient data: {0}")]
    InsufficientData(String),

    #[error("domain error: {0}")]
    Domain(String),

    #[error("invalid parameter: {0}")]
    InvalidParameter(String),

    #[error("feature dimension mismatch at row {row}: expected {expected}, found {found}")]
    DimensionMismatch { row: usize, expected: usize, found: usize },

    #[error("non-finite value at row {row}")]
    NonFinite { row: usize },

    #[error("underdetermined fit: {distinct} distinct sample sizes, at least 3 required")]
    UnderdeterminedFit { distinct: usize },

    #[error("solver did not converge after {iterations} iterations (score max-norm {score_norm:e})")]
    Convergence {
        iterations: usize,
        score_norm: f64,
        last_iterate: Vec<f64>,
    },

    #[error("singular Hessian (condition estimate {condition:e})")]
    SingularHessian { condition: f64 },

    #[error("numerical error: {0}")]
    Numerical(String),

    #[error("unsupported fine-tuning size {s}: the world supports s >= {s_min}")]
    UnsupportedSize { s: usize, s_min: usize },

    #[error("invalid ramp-up plan: {0}")]
    InvalidPlan(String),

    #[error("parse error at row {row}, column {column}: {message}")]
    Parse { row: usize, column: usize, message: String },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    /// Short machine-readable tag for the error variant.
    pub fn kind(&self) -> &'static str {
        match self {
            Error::InvalidSplit { .. } => "invalid_split",
            Error::InsufficientData(_) => "insufficient_data",
            Error::Domain(_) => "domain",
            Error::InvalidParameter(_) => "invalid_parameter",
            Error::DimensionMismatch { .. } => "dimension_mismatch",
            Error::NonFinite { .. } => "non_finite",
            Error::UnderdeterminedFit { .. } => "underdetermined_fit",
            Error::Convergence { .. } => "convergence",
            Error::SingularHessian { .. } => "singular_hessian",
            Error::Numerical(_) => "numerical",
            Error::UnsupportedSize { .. } => "unsupported_size",
            Error::InvalidPlan(_) => "invalid_plan",
            Error::Parse { .. } => "parse",
            Error::Io(_) => "io",
            Error::Json(_) => "json",
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
