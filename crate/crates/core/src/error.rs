use thiserror::Error;

/// Errors produced by the library.
#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),

    #[error("matrix has nonzero diagonal entry {value} at index {index}")]
    NonzeroDiagonal { index: usize, value: f64 },

    #[error("timestep must be positive, got {0}")]
    InvalidTimestep(f64),

    #[error("linear system is near-singular (condition estimate {estimate:.3e})")]
    NearSingular { estimate: f64 },

    #[error("eigensolver did not converge within {max_sweeps} QR sweeps")]
    EigenNonConvergence { max_sweeps: usize },

    #[error("non-finite value encountered at timestep {timestep}")]
    NonFinite { timestep: usize },

    #[error("non-finite gradient encountered")]
    NonFiniteGradient,

    #[error(
        "doubly-stochastic projection stopped after {max_iters} iterations \
         with residual {residual:.3e} (threshold {epsilon:.3e})"
    )]
    SinkhornDidNotConverge {
        epsilon: f64,
        max_iters: usize,
        residual: f64,
    },

    #[error("invalid configuration: {0}")]
    InvalidConfig(String),

    #[error("io error: {0}")]
    Io(#[from] std::io::Error),

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
