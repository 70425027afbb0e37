//! File formats, experiment orchestration and the command-line harness around
//! [`bnn_rram_core`].
//!
//! - [`dataio`]: MNIST IDX ingestion and deterministic subsets.
//! - [`model_io`]: model and checkpoint files.
//! - [`config`]: the flat `key = value` configuration format.
//! - [`harness`]: corrupted-model evaluation, dead-neuron counts, training
//!   with a content-addressed model cache, and bit-error-rate sweeps to CSV.
//! - [`report`]: picks the cheapest RRAM programming condition whose bit
//!   error rate a trained model tolerates.
//! - [`bench`]: packed kernel versus integer reference throughput.

pub mod bench;
pub mod config;
pub mod dataio;
mod error;
pub mod harness;
pub mod model_io;
pub mod report;

pub use error::{HarnessError, Result};
