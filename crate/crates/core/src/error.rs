use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum AbfError {
    #[error("non-finite value in {0}")]
    NonFinite(&'static str),

    #[error("dimension mismatch: expected {expected}, found {found}")]
    DimensionMismatch { expected: usize, found: usize },

    #[error("invalid parameter: {0}")]
    InvalidParameter(String),

    #[error("empty grid")]
    EmptyGrid,

    #[error(
        "kernel under-resolved: grid has {nodes} nodes per dimension, epsilon = {epsilon} needs at least {required}"
    )]
    KernelUnderResolved {
        nodes: usize,
        epsilon: f64,
        required: usize,
    },

    #[error("exponential overflow while evaluating {0}")]
    ExpOverflow(&'static str),

    #[error("no samples accumulated")]
    NoSamples,

    #[error("accumulators are defined on different grids or kernels")]
    Mismatched,

    #[error("unknown observable `{0}`")]
    UnknownObservable(String),

    #[error("Sobolev exponent p = {0} outside [2, inf)")]
    SobolevExponent(f64),

    #[error("Picard iteration is not contracting (update grew for 3 iterations, last update {update:.3e} at iteration {iteration})")]
    NonContraction { iteration: usize, update: f64 },

    #[error("density lost positivity at t = {time}; reduce dt")]
    PositivityLost { time: f64 },
}

pub type Result<T> = std::result::Result<T, AbfError>;
