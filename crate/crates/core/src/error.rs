use alloc::string::String;

/// Errors raised by the core library.
#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum Error {
    #[error("element {index} is {value}, expected +1 or -1")]
    InvalidSignValue { index: usize, value: i64 },

    #[error("dimension mismatch: expected {expected}, got {actual}")]
    DimensionMismatch { expected: usize, actual: usize },

    #[error("popcount {popcount} out of range for {n_bits} bits")]
    InvalidPopcount { popcount: u64, n_bits: u64 },

    #[error("index ({row}, {col}) out of range for {rows}x{cols} matrix")]
    IndexOutOfRange {
        row: usize,
        col: usize,
        rows: usize,
        cols: usize,
    },

    #[error("non-finite weight {0}")]
    InvalidWeight(f64),

    #[error("pixel {index} has value {value}, expected a value in [0, 1]")]
    InvalidPixel { index: usize, value: f64 },

    #[error("neuron {neuron} has gamma == 0 and emits a constant")]
    DegenerateNeuron { neuron: usize },

    #[error("invalid model: {0}")]
    InvalidModel(String),

    #[error("bit error rate {0} is outside [0, 1]")]
    InvalidRate(f64),

    #[error("gradient cache does not match the network or mask: {0}")]
    InvalidCache(String),

    #[error("numerical divergence: {0}")]
    NumericalDivergence(String),

    #[error("invalid training configuration: {0}")]
    InvalidConfig(String),

    #[error("invalid resistance distribution: {0}")]
    InvalidDistribution(String),

    #[error("distribution fit did not converge for target {target}")]
    FitFailure { target: f64 },

    #[error("set fraction {0} is outside [0, 1]")]
    InvalidFraction(f64),

    #[error("model format error at byte {offset}: {reason}")]
    ModelFormat { offset: usize, reason: String },
}

pub type Result<T> = core::result::Result<T, Error>;
