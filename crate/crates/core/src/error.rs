use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid network at layer {layer}: {reason}")]
    InvalidNetwork { layer: usize, reason: String },

    #[error("dimension mismatch at layer {layer}: expected {expected}, found {found}")]
    DimensionMismatch {
        layer: usize,
        expected: usize,
        found: usize,
    },

    #[error("singular value decomposition did not converge for layer {layer}")]
    Decomposition { layer: usize },

    #[error("{what} must be positive, got {value}")]
    NonPositive { what: &'static str, value: f64 },

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("non-finite message at half-iteration {half_iter}, layer {layer}")]
    Diverged { half_iter: usize, layer: usize },

    #[error("objective became non-finite at step {step}")]
    NonFiniteObjective { step: usize },

    #[error("reference signal has zero energy")]
    ZeroReference,

    #[error("unsupported network: {0}")]
    Unsupported(String),

    #[error("state evolution: {0}")]
    StateEvolution(String),

    #[error("{path}: {message}")]
    Parse { path: String, message: String },

    #[error("csv: {0}")]
    Csv(#[from] csv::Error),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
