use std::path::PathBuf;

#[derive(Debug, thiserror::Error)]
pub enum HarnessError {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("{path}: {reason}")]
    Format { path: PathBuf, reason: String },

    #[error("{path}: label {label} at index {index} is not a digit")]
    InvalidLabel {
        path: PathBuf,
        index: usize,
        label: u8,
    },

    #[error("dataset inconsistency: {0}")]
    Consistency(String),

    #[error("cannot take {requested} samples from a dataset of {available}")]
    InvalidSubset { requested: usize, available: usize },

    #[error("MNIST files not found in {dir}\n{instructions}")]
    MissingData { dir: PathBuf, instructions: String },

    #[error("configuration: {0}")]
    Config(String),

    #[error(
        "bit error rate {ber} of condition {condition} lies outside the swept range [{min}, {max}]"
    )]
    ExtrapolationRefused {
        condition: String,
        ber: f64,
        min: f64,
        max: f64,
    },

    #[error(transparent)]
    Core(#[from] bnn_rram_core::Error),
}

pub type Result<T> = std::result::Result<T, HarnessError>;

pub(crate) fn io_err(path: impl Into<PathBuf>) -> impl FnOnce(std::io::Error) -> HarnessError {
    let path = path.into();
    move |source| HarnessError::Io { path, source }
}
