//! Labelled random streams.
//!
//! Every consumer of randomness asks for a stream by `(seed, label)`. The
//! stream key is SHA-256 of the seed and the label, so adding a new label never
//! shifts the draws of existing ones, and two labels under the same seed are
//! independent for all practical purposes.

use rand_chacha::ChaCha8Rng;
use rand_core::{RngCore, SeedableRng};
use sha2::{Digest, Sha256};

pub use rand_chacha::ChaCha8Rng as StreamRng;

const DOMAIN: &[u8] = b"bnn-rram/stream/v1";

fn key(seed: u64, label: &str) -> [u8; 32] {
    let mut h = Sha256::new();
    h.update(DOMAIN);
    h.update(seed.to_le_bytes());
    h.update((label.len() as u64).to_le_bytes());
    h.update(label.as_bytes());
    h.finalize().into()
}

/// Random stream for `label` under `seed`.
pub fn stream(seed: u64, label: &str) -> ChaCha8Rng {
    ChaCha8Rng::from_seed(key(seed, label))
}

/// A 64-bit sub-seed for `label` under `seed`.
pub fn derive_seed(seed: u64, label: &str) -> u64 {
    let k = key(seed, label);
    u64::from_le_bytes(k[..8].try_into().unwrap())
}

/// Uniform in `[0, 1)` with 53 random bits.
#[inline]
pub fn unit_f64<R: RngCore>(rng: &mut R) -> f64 {
    (rng.next_u64() >> 11) as f64 * (1.0 / (1u64 << 53) as f64)
}

/// Uniform in `(0, 1]`.
#[inline]
pub fn unit_open_f64<R: RngCore>(rng: &mut R) -> f64 {
    ((rng.next_u64() >> 11) + 1) as f64 * (1.0 / (1u64 << 53) as f64)
}

/// Uniform integer in `0..n` (Lemire's method, unbiased).
pub fn below<R: RngCore>(rng: &mut R, n: u64) -> u64 {
    assert!(n > 0);
    let threshold = n.wrapping_neg() % n;
    loop {
        let m = u128::from(rng.next_u64()) * u128::from(n);
        if (m as u64) >= threshold {
            return (m >> 64) as u64;
        }
    }
}

/// Standard normal deviate (Box-Muller, one of the pair discarded).
pub fn standard_normal<R: RngCore>(rng: &mut R) -> f64 {
    let u1 = unit_open_f64(rng);
    let u2 = unit_f64(rng);
    libm::sqrt(-2.0 * libm::log(u1)) * libm::cos(core::f64::consts::TAU * u2)
}

/// In-place Fisher-Yates shuffle.
pub fn shuffle<T, R: RngCore>(rng: &mut R, items: &mut [T]) {
    for i in (1..items.len()).rev() {
        let j = below(rng, i as u64 + 1) as usize;
        items.swap(i, j);
    }
}
