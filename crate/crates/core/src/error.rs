use thiserror::Error;

/// Errors produced anywhere in the toolkit.
#[derive(Debug, Error)]
pub enum Error {
    #[error("numeric overflow: {0}")]
    NumericOverflow(String),

    #[error("steady-state solve did not converge after {iterations} iterations (residual {residual:e})")]
    Convergence { iterations: usize, residual: f64 },

    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },

    #[error("invalid polytope: {0}")]
    InvalidPolytope(String),

    #[error("invalid box: {0}")]
    InvalidBox(String),

    #[error("degenerate set: acceptance rate {rate:e} after {draws} draws")]
    DegenerateSet { rate: f64, draws: usize },

    #[error("viability kernel is empty (removed per iteration: {trace:?})")]
    EmptyKernel { trace: Vec<usize> },

    #[error("polytope extraction failed: {0}")]
    ExtractionFailure(String),

    #[error("backup table is empty")]
    EmptyTable,

    #[error("hard safety fault at x = {state:?}: {reason}")]
    SafetyFault { state: Vec<f64>, reason: String },

    #[error("non-finite loss during update ({0})")]
    NonFiniteLoss(String),

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("parse error at line {line}: {msg}")]
    Parse { line: usize, msg: String },

    #[error("empty trajectory")]
    EmptyTrajectory,

    #[error("no feasible steady state in the searched input range")]
    NoFeasibleSteadyState,

    #[error("log verification failed: {0}")]
    LogMismatch(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
