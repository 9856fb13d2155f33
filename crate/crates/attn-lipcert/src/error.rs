use thiserror::Error;

/// Everything that can go wrong below the CLI layer.
///
/// The taxonomy matters to callers: the CLI maps `Capacity` and `Divergence`
/// to dedicated exit codes, and everything else to a generic validation
/// failure.
#[derive(Debug, Clone, Error, PartialEq)]
pub enum Error {
    #[error("dimension mismatch in {op}: {details}")]
    Dimension { op: &'static str, details: String },

    #[error("matrix is not symmetric: |a[{i}][{j}] - a[{j}][{i}]| = {delta:e} exceeds 1e-12")]
    Asymmetric { i: usize, j: usize, delta: f64 },

    #[error("domain error in {op}: {details}")]
    Domain { op: &'static str, details: String },

    #[error("index out of range in {op}: {details}")]
    Index { op: &'static str, details: String },

    #[error("problem size exceeds capacity: {details}")]
    Capacity { details: String },

    #[error("non-finite value produced in {op}")]
    NonFinite { op: &'static str },

    #[error("training diverged at step {step}: {details}")]
    Divergence { step: usize, details: String },
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub(crate) fn dim(op: &'static str, details: impl Into<String>) -> Self {
        Error::Dimension {
            op,
            details: details.into(),
        }
    }

    pub(crate) fn domain(op: &'static str, details: impl Into<String>) -> Self {
        Error::Domain {
            op,
            details: details.into(),
        }
    }
}
