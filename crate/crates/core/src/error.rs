use thiserror::Error;

/// Errors raised by the numerical core.
#[derive(Debug, Error, Clone, PartialEq)]
pub enum Error {
    #[error("dimension mismatch: expected {expected}, found {found}")]
    DimensionMismatch { expected: usize, found: usize },

    #[error("non-finite value in {0}")]
    NonFinite(&'static str),

    #[error("invalid parameter `{name}`: {reason}")]
    InvalidParameter { name: &'static str, reason: String },

    #[error("Gram matrix is ill-conditioned: factorization failed with jitter {jitter:e}")]
    IllConditioned { jitter: f64 },

    #[error("matrix is not positive semidefinite")]
    NotPositiveSemidefinite,

    #[error("inconsistent observation: duplicate input with target {observed} but the noise-free model predicts {predicted}")]
    InconsistentObservation { observed: f64, predicted: f64 },

    #[error("calibration failed: {0}")]
    CalibrationFailed(String),

    #[error("time {t} lies outside the schedule [{start}, {end}]")]
    OutsideSchedule { t: f64, start: f64, end: f64 },

    #[error("no valuation model for exposure date {0}")]
    MissingModel(usize),

    #[error("domain error: {0}")]
    Domain(String),

    #[error("grid mismatch: {0}")]
    GridMismatch(String),
}

pub type Result<T> = std::result::Result<T, Error>;

pub(crate) fn invalid(name: &'static str, reason: impl Into<String>) -> Error {
    Error::InvalidParameter {
        name,
        reason: reason.into(),
    }
}

pub(crate) fn ensure_finite(values: &[f64], what: &'static str) -> Result<()> {
    if values.iter().all(|v| v.is_finite()) {
        Ok(())
    } else {
        Err(Error::NonFinite(what))
    }
}
