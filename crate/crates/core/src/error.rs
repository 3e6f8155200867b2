use thiserror::Error;

/// Errors raised by the optimization and estimation routines.
#[derive(Debug, Error, Clone, PartialEq)]
pub enum RboError {
    #[error("invalid parameter: {0}")]
    InvalidParameter(String),

    #[error("design point outside the design space: coordinate {index} = {value} not in [{lower}, {upper}]")]
    Domain {
        index: usize,
        value: f64,
        lower: f64,
        upper: f64,
    },

    #[error("limit state returned a non-finite value ({value}) at sample {index}")]
    TaintedSample { index: usize, value: f64 },

    #[error("precondition violated: {0}")]
    Precondition(String),

    #[error("sampling region is empty: {0}")]
    InfeasibleRegion(String),

    #[error("design points are not poised for quadratic regression (rank {rank} < {required})")]
    Poisedness { rank: usize, required: usize },

    #[error("surrogate could not be certified: radius {radius:e} fell below the guard with LOO error {loo_error:e}")]
    SurrogateFailure { radius: f64, loo_error: f64 },

    #[error("trust-region subproblem is infeasible (least surrogate value {min_violation:e})")]
    InfeasibleSubproblem { min_violation: f64 },

    #[error("configuration error: {0}")]
    Configuration(String),
}

pub type Result<T> = std::result::Result<T, RboError>;
