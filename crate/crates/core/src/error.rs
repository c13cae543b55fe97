use thiserror::Error;

/// Errors raised by the filters, the simulator and the experiment runner.
#[derive(Debug, Error)]
pub enum Error {
    #[error("matrix is not positive definite ({context})")]
    NotPositiveDefinite { context: &'static str },

    #[error("bisection bracket [{lower}, {upper}] has no sign change")]
    NoSignChange { lower: f64, upper: f64 },

    #[error("bisection did not converge in {iterations} iterations")]
    MaxIterations { iterations: usize },

    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),

    #[error("risk parameter {theta} is outside the domain where I - theta P is positive definite")]
    ThetaOutOfDomain { theta: f64 },

    #[error("tolerance {tolerance} cannot be reached below the largest admissible theta")]
    ToleranceUnreachable { tolerance: f64 },

    #[error("conditioning denominator {value:e} is too close to zero")]
    DegenerateDenominator { value: f64 },

    #[error("finite-difference Jacobian has a non-finite entry")]
    NonFiniteDerivative,

    #[error("backward Omega recursion produced a singular or non-finite matrix at t = {t}")]
    OmegaSingular { t: usize },

    #[error("proposal matrix O_t is not positive definite at t = {t}")]
    ONotPositiveDefinite { t: usize },

    #[error("proposal covariance is not positive definite at t = {t}")]
    CovNotPositiveDefinite { t: usize },

    #[error("tilted precision S_t is not positive definite at t = {t}")]
    StNotPositiveDefinite { t: usize },

    #[error("Metropolis-Hastings chain accepted nothing in {proposals} proposals")]
    ChainStalled { proposals: usize },

    #[error("step {step}: {source}")]
    AtStep {
        step: usize,
        #[source]
        source: Box<Error>,
    },

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn at_step(self, step: usize) -> Error {
        Error::AtStep {
            step,
            source: Box::new(self),
        }
    }

    /// Strips any `AtStep` wrappers.
    pub fn root(&self) -> &Error {
        match self {
            Error::AtStep { source, .. } => source.root(),
            other => other,
        }
    }
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
