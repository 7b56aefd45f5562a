use std::io;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    /// An argument fell outside the domain of the operation.
    #[error("domain error: {0}")]
    Domain(String),

    /// Input data does not determine the requested estimate.
    #[error("degenerate input: {0}")]
    Degenerate(String),

    /// A covariance matrix violates the uncertainty principle.
    #[error("unphysical covariance matrix: symplectic eigenvalue {nu} < 1")]
    Unphysical { nu: f64 },

    #[error("numerical failure: {0}")]
    Numerical(String),

    #[error("training diverged at epoch {epoch}: loss is not finite")]
    Divergence { epoch: usize },

    #[error(
        "Gram matrix is not positive definite (pivot {pivot} = {value:e}); \
         increase the ridge term"
    )]
    Factorization { pivot: usize, value: f64 },

    #[error("calibration needs more samples than parameters (n_cal = {n_cal}, p = {p})")]
    InsufficientCalibration { n_cal: usize, p: usize },

    #[error("calibration was computed for model {expected}, got model {found}")]
    ModelMismatch { expected: String, found: String },

    #[error("integrity check failed: {0}")]
    Integrity(String),

    #[error("unsupported format version {found} (expected {expected})")]
    Version { found: u32, expected: u32 },

    #[error("malformed file: {0}")]
    Format(String),

    #[error(transparent)]
    Io(#[from] io::Error),
}

pub(crate) fn domain(msg: impl Into<String>) -> Error {
    Error::Domain(msg.into())
}
