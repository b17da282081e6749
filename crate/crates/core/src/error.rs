use thiserror::Error;

/// Errors raised by model construction, the exact oracles, estimators and checks.
#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension mismatch for {what}: expected {expected}, found {found}")]
    Dimension {
        what: &'static str,
        expected: usize,
        found: usize,
    },

    #[error("transition row (s={state}, a={action}) sums to {sum}, expected 1")]
    TransitionRow { state: usize, action: usize, sum: f64 },

    #[error("negative or non-finite transition probability {value} at (s={state}, a={action}, s'={next_state})")]
    NegativeTransition {
        state: usize,
        action: usize,
        next_state: usize,
        value: f64,
    },

    #[error("initial distribution sums to {sum}, expected 1")]
    InitialDistribution { sum: f64 },

    #[error("negative or non-finite initial probability {value} at s={state}")]
    NegativeInitial { state: usize, value: f64 },

    #[error("reward {value} at (s={state}, a={action}) exceeds r_max = {r_max}")]
    RewardOutOfRange {
        state: usize,
        action: usize,
        value: f64,
        r_max: f64,
    },

    #[error("discount factor {0} outside [0, 1)")]
    InvalidGamma(f64),

    #[error("invalid parameter: {0}")]
    InvalidParameter(String),

    #[error("fixed-point iteration did not reach tol {tol:e} within {iterations} iterations (last residual {residual:e}); tolerance too tight")]
    NonConvergence { iterations: usize, residual: f64, tol: f64 },

    #[error("internal consistency check failed: {0}")]
    Inconsistent(String),

    #[error("batch is empty")]
    EmptyBatch,

    #[error("trajectory {index} has horizon {found}, batch horizon is {expected}")]
    MixedHorizons {
        index: usize,
        expected: usize,
        found: usize,
    },

    #[error("{0} requires a softmax tabular policy")]
    RequiresSoftmax(&'static str),

    #[error("full enumeration needs {paths:e} paths (limit {limit}); use the Monte-Carlo checks instead")]
    EnumerationTooLarge { paths: f64, limit: usize },

    #[error("initial distribution has zero mass at s={state}; mismatch coefficient is unbounded")]
    ZeroInitialMass { state: usize },

    #[error("step size {eta} outside the admissible window (0, {upper})")]
    StepOutsideWindow { eta: f64, upper: f64 },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

pub(crate) fn invalid(msg: impl Into<String>) -> Error {
    Error::InvalidParameter(msg.into())
}
