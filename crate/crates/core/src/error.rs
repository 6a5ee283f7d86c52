use thiserror::Error;

/// Errors surfaced by the library. Exit-code mapping for the CLI lives in
/// [`crate::error::exit_code_for`].
#[derive(Debug, Error)]
pub enum EmxError {
    #[error("source term has nonzero mean {mean:.3e} (tolerance {tol:.3e})")]
    NonZeroMean { mean: f64, tol: f64 },

    #[error("invalid state: {0}")]
    InvalidState(String),

    #[error("invalid doping profile: min b = {min_b:.6e}, must be > 0")]
    InvalidDoping { min_b: f64 },

    #[error("solver did not converge after {iterations} iterations (residual {residual:.3e})")]
    NoConvergence { iterations: usize, residual: f64 },

    #[error("positivity violated: {field} = {value:.6e} at flat index {index}")]
    PositivityViolation {
        field: &'static str,
        index: usize,
        value: f64,
    },

    #[error("numerical blowup: {0}")]
    NumericalBlowup(String),

    #[error("initial data is not charge neutral: Gauss source mean {0:.3e}")]
    NonNeutral(f64),

    #[error("insufficient data: {0}")]
    InsufficientData(String),

    #[error("non-positive series value {value:.3e} at t = {t}")]
    NonPositiveValue { t: f64, value: f64 },

    #[error("config parse error: {0}")]
    Parse(String),

    #[error("config validation failed for `{key}`: {constraint}")]
    Validation { key: String, constraint: String },

    #[error("checkpoint format error: {0}")]
    Format(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error("{0}")]
    Other(String),
}

pub type Result<T> = std::result::Result<T, EmxError>;

/// CLI exit code contract: 0 success, 2 config error, 3 numerical failure
/// (a post-mortem checkpoint is written before the process exits),
/// 4 solver non-convergence / incompatible input.
pub fn exit_code_for(err: &EmxError) -> i32 {
    match err {
        EmxError::Parse(_) | EmxError::Validation { .. } => 2,
        EmxError::PositivityViolation { .. } | EmxError::NumericalBlowup(_) => 3,
        EmxError::NoConvergence { .. }
        | EmxError::InvalidDoping { .. }
        | EmxError::NonZeroMean { .. }
        | EmxError::NonNeutral(_) => 4,
        _ => 1,
    }
}
