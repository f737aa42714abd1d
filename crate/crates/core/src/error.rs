//! Crate-wide error type.

use thiserror::Error;

/// Errors surfaced by the library.
#[derive(Debug, Error)]
pub enum Error {
    /// Shapes or sizes are inconsistent or out of range.
    #[error("dimension error: {0}")]
    Dimension(String),

    /// Required input was empty.
    #[error("empty input: {0}")]
    EmptyInput(String),

    /// A scalar parameter is out of its legal range.
    #[error("parameter error: {0}")]
    Parameter(String),

    /// The requested combination is not supported by this operation.
    #[error("unsupported: {0}")]
    Unsupported(String),

    /// Estimator preconditions violated (e.g. unbiased MMD with N < 2).
    #[error("estimator error: {0}")]
    Estimator(String),

    /// Records could not be paired up across benchmark runs.
    #[error("pairing error: {0}")]
    Pairing(String),

    /// Input data failed validation (non-finite values, out-of-range tokens).
    #[error("validation error: {0}")]
    Validation(String),

    /// A numerical probe hit a non-finite evaluation.
    #[error("probe error at coordinate {coordinate}: {message}")]
    Probe {
        coordinate: String,
        message: String,
    },

    /// A gradient check diverged past its failure threshold.
    #[error(
        "gradcheck failure in {tensor} at {coordinate}: analytic {analytic:e} vs numeric {numeric:e} (rel err {rel_err:e})"
    )]
    Gradcheck {
        tensor: &'static str,
        coordinate: String,
        analytic: f64,
        numeric: f64,
        rel_err: f64,
    },

    /// Malformed file contents.
    #[error("format error: {0}")]
    Format(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
