use thiserror::Error;

/// Errors raised by instance validation, partition handling and the solvers.
#[derive(Debug, Error)]
pub enum Error {
    #[error("matrix is not square: {rows}x{cols}")]
    NotSquare { rows: usize, cols: usize },

    #[error("dimension mismatch: expected {expected}, got {found} ({what})")]
    Dimension {
        what: &'static str,
        expected: usize,
        found: usize,
    },

    #[error("diagonal entry W[{agent},{agent}] = {value} must equal 1")]
    Diagonal { agent: usize, value: f64 },

    #[error("off-diagonal entry W[{row},{col}] = {value} must be nonnegative")]
    NegativeWeight { row: usize, col: usize, value: f64 },

    #[error("row {row} of W has off-diagonal mass {mass} >= 1 (W is not diagonally dominant)")]
    NotDominant { row: usize, mass: f64 },

    #[error("invalid value {value} for {what} of agent {agent}")]
    InvalidAgentValue {
        what: &'static str,
        agent: usize,
        value: f64,
    },

    #[error("supplied cost c[{agent}] = {given} disagrees with S'(b) = {derived}")]
    CostMismatch {
        agent: usize,
        given: f64,
        derived: f64,
    },

    #[error("agent index {index} out of range for n = {n}")]
    AgentOutOfRange { index: usize, n: usize },

    #[error("action vector has negative entry x[{agent}] = {value}")]
    NegativeAction { agent: usize, value: f64 },

    #[error("invalid partition: {0}")]
    Partition(String),

    #[error("parse error at column {column}: {message}")]
    Parse { column: usize, message: String },

    #[error("infeasible generator parameters: {0}")]
    Infeasible(String),

    #[error("singular linear system")]
    Singular,

    #[error(
        "best-response iteration did not converge in {iterations} steps (last ratio {last_ratio})"
    )]
    NoConvergence { iterations: usize, last_ratio: f64 },

    #[error(
        "welfare objective undefined: effective investment v[{agent}] = {value} is not positive"
    )]
    NonPositiveInvestment { agent: usize, value: f64 },

    #[error(
        "n = {n} is too large for exhaustive search (limit {limit}); pass the override to force it"
    )]
    TooLarge { n: usize, limit: usize },

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
