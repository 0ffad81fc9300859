use thiserror::Error;

/// Everything that can go wrong between reading a model and emitting a
/// distribution.
#[derive(Debug, Clone, Error, PartialEq)]
pub enum Error {
    #[error("dimension mismatch: {0}")]
    Dimension(String),

    #[error("generator row {row} sums to {sum:e}, expected 0 (C + sum of D_k)")]
    GeneratorRowSum { row: usize, sum: f64 },

    #[error("negative rate {value:e} in {matrix} at ({row}, {col})")]
    NegativeRate {
        matrix: String,
        row: usize,
        col: usize,
        value: f64,
    },

    #[error("class {class} has no positive arrival rate (every element of D_{class} is zero)")]
    EmptyStream { class: usize },

    #[error("underlying chain is reducible: state {to} is not reachable from state {from}")]
    ReducibleChain { from: usize, to: usize },

    #[error("batch law of class {class} is not a valid discrete phase-type law: {detail}")]
    SubstochasticViolation { class: usize, detail: String },

    #[error("service law of class {class} is invalid: {detail}")]
    InvalidService { class: usize, detail: String },

    #[error("class {class} uses a per-size batch matrix sequence; the joint pipeline needs a phase-type batch law independent of the environment")]
    AssumptionViolation { class: usize },

    #[error("queue is unstable: rho = {rho}")]
    Unstable { rho: f64 },

    #[error("singular resolvent while computing {0}")]
    SingularResolvent(String),

    #[error("singular linear system while computing {0}")]
    SingularSystem(String),

    #[error("{what} did not converge after {iterations} iterations (residual {residual:e})")]
    NoConvergence {
        what: String,
        iterations: usize,
        residual: f64,
    },

    #[error("{what}: mass criterion not met within {limit} terms")]
    MassDeficit { what: String, limit: usize },

    #[error("service LST of class {class} equals one at s = {s}; use the mean waiting time instead")]
    DegenerateService { class: usize, s: f64 },

    #[error("storage budget exceeded at level m = {levels} ({entries} stored entries)")]
    BudgetExceeded { levels: usize, entries: usize },

    #[error("negative probability mass {value:e} at n = {index:?}")]
    NegativeMass { index: Vec<u32>, value: f64 },

    #[error("model file {path}: {message}")]
    ModelFile { path: String, message: String },
}

pub type Result<T> = std::result::Result<T, Error>;
