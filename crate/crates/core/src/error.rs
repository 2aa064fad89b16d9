use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid dimension {0}: must be at least 1")]
    InvalidDimension(usize),

    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },

    #[error("frame index {index} out of range for dimension {dim}")]
    IndexOutOfRange { index: usize, dim: usize },

    #[error("point too close to chart boundary (need margin {margin}, base radius {radius}, inner radius {r_min})")]
    ChartBoundary {
        radius: f64,
        r_min: f64,
        margin: f64,
    },

    #[error("metric evaluated to non-finite components at queried point")]
    NonFiniteMetric,

    #[error("metric is singular (not invertible) at queried point")]
    SingularMetric,

    #[error("metric is not positive definite at queried point (eigenvalue {0})")]
    NotPositiveDefinite(f64),

    #[error("operation requires a background product metric, none attached")]
    MissingBackground,

    #[error("operation requires a flat compact fiber")]
    FiberNotFlat,

    #[error("operation requires a chart without compact fiber (fiber dimension is {0})")]
    FiberPresent(usize),

    #[error("spinor input must have unit norm (got {0})")]
    NonUnitSpinor(f64),

    #[error("invalid model parameters: {0}")]
    InvalidModel(String),

    #[error("quadrature rule unavailable: {0}")]
    Quadrature(String),

    #[error("need at least {need} radii in the ladder, got {got}")]
    LadderTooShort { need: usize, got: usize },

    #[error("configuration error: {0}")]
    Config(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}
