//! Binarized neural networks whose weights live in error-prone resistive memory.
//!
//! The crate is `no_std` + `alloc`. It contains everything that is pure
//! computation:
//!
//! - [`bitlinalg`]: bit-packed ±1 vectors and matrices and the XNOR-popcount
//!   kernels used for inference.
//! - [`bnn`]: dense BNN layers with per-neuron thresholds, batch-norm folding,
//!   forward inference and the binary model codec.
//! - [`fault`]: seeded stochastic bit flips over the stored weights.
//! - [`training`]: straight-through-estimator training with optional bit-error
//!   injection inside every iteration.
//! - [`rram`]: programming-condition catalogue and a log-normal resistance model
//!   with analytic and Monte Carlo bit error rates.
//!
//! The `std` feature (on by default) only enables runtime CPU feature
//! detection in the kernels and the matrix multiply backend.

#![cfg_attr(not(feature = "std"), no_std)]
#![allow(clippy::neg_cmp_op_on_partial_ord)]

extern crate alloc;

pub mod bitlinalg;
pub mod bnn;
mod error;
pub mod fault;
pub mod format;
pub mod rng;
pub mod rram;
pub mod training;

pub use error::{Error, Result};
