use thiserror::Error;

/// Deepest binary noise tree we are willing to allocate (2^20 leaves).
pub const MAX_TREE_DEPTH: usize = 20;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid coefficient: {0}")]
    InvalidCoefficient(String),

    #[error("coefficient is not positive at x = {x} (a = {value})")]
    NonPositive { x: f64, value: f64 },

    #[error("degeneracy bound K = {k} lies outside [0, 2)")]
    DegeneracyTooStrong { k: f64 },

    #[error("x = {0} lies outside [0, 1]")]
    OutOfDomain(f64),

    #[error("invalid interval configuration: {0}")]
    Interval(String),

    #[error("invalid parameter: {0}")]
    Parameter(String),

    #[error("quadrature failed: {0}")]
    Quadrature(String),

    #[error("spatial grid needs at least 4 nodes, got {0}")]
    GridTooSmall(usize),

    #[error("degenerate cell between nodes {0} and {1}")]
    DegenerateCell(usize, usize),

    #[error("standard time weight is singular at t = {0}")]
    ThetaEndpoint(f64),

    #[error("energy form is singular: {0}")]
    SingularEnergy(String),

    #[error("tree depth {0} exceeds the limit of {MAX_TREE_DEPTH}")]
    TreeTooDeep(usize),

    #[error("discretization mismatch: {0}")]
    Mismatch(String),

    #[error("linear solve failed: {0}")]
    LinearSolve(String),

    #[error(
        "conjugate gradient stopped after {iterations} iterations (relative residual {residual:e})"
    )]
    CgNotConverged { iterations: usize, residual: f64 },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
