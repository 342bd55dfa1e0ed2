use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = OfoError> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum OfoError {
    #[error("invalid feeder: {0}")]
    InvalidFeeder(String),

    #[error("network is disconnected: bus {0} is unreachable from the slack bus")]
    Disconnected(u32),

    #[error("duplicate line between buses {0} and {1}")]
    DuplicateLine(u32, u32),

    #[error("unknown line index {0}")]
    UnknownLine(usize),

    #[error("dimension mismatch for {what}: expected {expected}, got {got}")]
    DimensionMismatch {
        what: &'static str,
        expected: usize,
        got: usize,
    },

    #[error("non-finite value in {0}")]
    NonFinite(&'static str),

    #[error(
        "power flow did not converge after {iterations} iterations (last update {last_change:e})"
    )]
    NonConvergence { iterations: usize, last_change: f64 },

    #[error("invalid noise model: {0}")]
    InvalidNoise(String),

    #[error("innovation covariance is singular")]
    SingularInnovation,

    #[error("invalid controller configuration: {0}")]
    InvalidConfig(String),

    #[error("operator is not strongly monotone on the sampled region (eta_hat = {0:e})")]
    NotMonotoneInRegion(f64),

    #[error("optimization hit the iteration cap of {iterations} (residual {residual:e})")]
    MaxIterations { iterations: usize, residual: f64 },

    #[error("scenario error: {0}")]
    Scenario(String),

    #[error("profile error in {path}: {message}")]
    Profile { path: PathBuf, message: String },

    #[error("i/o error on {path}: {source}")]
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

impl OfoError {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        OfoError::Io {
            path: path.into(),
            source,
        }
    }

    /// True for errors caused by bad user input rather than numerics.
    pub fn is_validation(&self) -> bool {
        matches!(
            self,
            OfoError::InvalidFeeder(_)
                | OfoError::Disconnected(_)
                | OfoError::DuplicateLine(..)
                | OfoError::UnknownLine(_)
                | OfoError::DimensionMismatch { .. }
                | OfoError::InvalidNoise(_)
                | OfoError::InvalidConfig(_)
                | OfoError::Scenario(_)
                | OfoError::Profile { .. }
                | OfoError::Json(_)
                | OfoError::Csv(_)
        )
    }
}

pub(crate) fn check_dim(what: &'static str, expected: usize, got: usize) -> Result<()> {
    if expected == got {
        Ok(())
    } else {
        Err(OfoError::DimensionMismatch {
            what,
            expected,
            got,
        })
    }
}

pub(crate) fn check_finite(what: &'static str, values: &[f64]) -> Result<()> {
    if values.iter().all(|v| v.is_finite()) {
        Ok(())
    } else {
        Err(OfoError::NonFinite(what))
    }
}
