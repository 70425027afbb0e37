//! Throughput of the packed XNOR-popcount kernel against the integer
//! reference dot product.

use std::hint::black_box;
use std::time::{Duration, Instant};

use bnn_rram_core::bitlinalg::{binary_matvec_into, pack_signs, reference_dot, BitMatrix};
use bnn_rram_core::rng;

use crate::Result;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct KernelBench {
    pub rows: usize,
    pub cols: usize,
    /// Multiply-accumulates per second.
    pub packed_macs_per_s: f64,
    pub reference_macs_per_s: f64,
}

impl KernelBench {
    pub fn speedup(&self) -> f64 {
        self.packed_macs_per_s / self.reference_macs_per_s
    }
}

/// Best-of-`rounds` rate of `f`, each round repeating it for at least `min`.
fn rate(rounds: usize, min: Duration, macs: f64, mut f: impl FnMut()) -> f64 {
    (0..rounds)
        .map(|_| {
            let start = Instant::now();
            let mut iters = 0u64;
            while start.elapsed() < min {
                f();
                iters += 1;
            }
            iters as f64 * macs / start.elapsed().as_secs_f64()
        })
        .fold(0.0, f64::max)
}

/// Times a `rows x cols` matrix-vector product both ways.
pub fn bench_kernels(
    rows: usize,
    cols: usize,
    min_time: Duration,
    seed: u64,
) -> Result<KernelBench> {
    let mut r = rng::stream(seed, "bench");
    let mut signs = || -> Vec<i8> {
        (0..cols)
            .map(|_| if rng::below(&mut r, 2) == 1 { 1 } else { -1 })
            .collect()
    };
    let matrix: Vec<Vec<i8>> = (0..rows).map(|_| signs()).collect();
    let x = signs();
    let flat: Vec<i8> = matrix.concat();
    let w = BitMatrix::from_signs(rows, cols, &flat)?;
    let xb = pack_signs(&x)?;
    let macs = (rows * cols) as f64;
    let mut out = vec![0u32; rows];
    binary_matvec_into(&w, &xb, &mut out)?;
    for (row, &pc) in matrix.iter().zip(&out) {
        debug_assert_eq!(reference_dot(row, &x)?, 2 * i64::from(pc) - cols as i64);
    }
    let packed = rate(3, min_time, macs, || {
        binary_matvec_into(black_box(&w), black_box(&xb), &mut out).expect("shapes match");
        black_box(&out);
    });
    let reference = rate(3, min_time, macs, || {
        for row in &matrix {
            black_box(reference_dot(black_box(row), black_box(&x)).expect("lengths match"));
        }
    });
    Ok(KernelBench {
        rows,
        cols,
        packed_macs_per_s: packed,
        reference_macs_per_s: reference,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn small_bench_runs() {
        let b = bench_kernels(4, 130, Duration::from_millis(2), 1).unwrap();
        assert!(b.packed_macs_per_s > 0.0 && b.reference_macs_per_s > 0.0);
    }
}
