use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum Error {
    #[error("dimension mismatch: expected {expected}, found {found}")]
    DimensionMismatch { expected: usize, found: usize },

    #[error("invalid task parameters: {0}")]
    InvalidTask(String),

    #[error("invalid task distribution: {0}")]
    InvalidDistribution(String),

    #[error("{0} requires a finite task distribution")]
    Unsupported(&'static str),

    #[error("matrix is singular (smallest eigenvalue {min_eigenvalue:e})")]
    Singular { min_eigenvalue: f64 },

    #[error("matrix is not positive semidefinite (smallest eigenvalue {min_eigenvalue:e})")]
    NotPositiveSemidefinite { min_eigenvalue: f64 },

    #[error("assumption violated: {0}")]
    AssumptionViolation(String),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),
}

impl Error {
    /// Stable machine-readable identifier.
    pub fn code(&self) -> &'static str {
        match self {
            Error::DimensionMismatch { .. } => "dimension_mismatch",
            Error::InvalidTask(_) => "invalid_task",
            Error::InvalidDistribution(_) => "invalid_distribution",
            Error::Unsupported(_) => "unsupported",
            Error::Singular { .. } => "singular_matrix",
            Error::NotPositiveSemidefinite { .. } => "not_positive_semidefinite",
            Error::AssumptionViolation(_) => "assumption_violation",
            Error::InvalidArgument(_) => "invalid_argument",
        }
    }

    /// True for failures caused by ill-conditioned or invalid numerics rather
    /// than by malformed input.
    pub fn is_numerical(&self) -> bool {
        matches!(
            self,
            Error::Singular { .. } | Error::NotPositiveSemidefinite { .. }
        )
    }
}

pub(crate) fn check_dim(expected: usize, found: usize) -> Result<()> {
    if expected == found {
        Ok(())
    } else {
        Err(Error::DimensionMismatch { expected, found })
    }
}
