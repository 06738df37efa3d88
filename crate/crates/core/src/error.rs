use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("matrix is not symmetric (max asymmetry {asymmetry:e})")]
    NotSymmetric { asymmetry: f64 },
    #[error("matrix is not positive definite")]
    NotPositiveDefinite,
    #[error("dimension mismatch for {what}: expected {expected}, found {found}")]
    DimensionMismatch {
        what: &'static str,
        expected: usize,
        found: usize,
    },
    #[error("wrong class count: expected {expected}, found {found}")]
    WrongClassCount { expected: usize, found: usize },
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
    #[error("invalid mismatch spec: {0}")]
    InvalidSpec(String),
    #[error("batch is empty")]
    EmptyBatch,
    #[error("direction is not unit Frobenius norm (norm {norm})")]
    NotUnitDirection { norm: f64 },
    #[error("smoothness estimate is zero; automatic learning rate is undefined")]
    ZeroSmoothness,
    #[error("training diverged at step {step} (loss {loss:e})")]
    DivergenceDetected { step: usize, loss: f64 },
    #[error("replicates disagree (relative spread {spread:.3e} > {tolerance:.3e}); increase the budget")]
    BudgetTooSmall { spread: f64, tolerance: f64 },
    #[error("non-positive distance at step {step}")]
    NonPositiveDistance { step: usize },
    #[error("log-log fit requires strictly positive inputs")]
    NonPositiveInput,
    #[error("pooled covariance estimate is singular")]
    SingularCovariance,
    #[error("class {class} has too few in-context examples")]
    ClassMissing { class: usize },
    #[error("config error: {0}")]
    Config(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Csv(#[from] csv::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    /// Validation errors map to exit code 2 at the CLI; everything else is a
    /// runtime failure.
    pub fn is_validation(&self) -> bool {
        matches!(
            self,
            Error::InvalidArgument(_)
                | Error::InvalidSpec(_)
                | Error::Config(_)
                | Error::DimensionMismatch { .. }
                | Error::WrongClassCount { .. }
        )
    }
}

pub(crate) fn check_dim(what: &'static str, expected: usize, found: usize) -> Result<()> {
    if expected != found {
        return Err(Error::DimensionMismatch {
            what,
            expected,
            found,
        });
    }
    Ok(())
}
