#![allow(dead_code)]

use std::fs;
use std::path::{Path, PathBuf};

use bnn_rram_core::rng;

pub fn idx_images(count: u32, rows: u32, cols: u32, payload: &[u8]) -> Vec<u8> {
    let mut b = 0x0803u32.to_be_bytes().to_vec();
    for d in [count, rows, cols] {
        b.extend_from_slice(&d.to_be_bytes());
    }
    b.extend_from_slice(payload);
    b
}

pub fn idx_labels(labels: &[u8]) -> Vec<u8> {
    let mut b = 0x0801u32.to_be_bytes().to_vec();
    b.extend_from_slice(&(labels.len() as u32).to_be_bytes());
    b.extend_from_slice(labels);
    b
}

/// Synthetic 8x8 digits: class `c` lights rows `c % 8` and column `c`
/// band, plus salt noise. Learnable, tiny and deterministic.
pub fn synthetic(n: usize, seed: u64) -> (Vec<u8>, Vec<u8>) {
    let mut r = rng::stream(seed, "synthetic");
    let mut pixels = Vec::with_capacity(n * 64);
    let mut labels = Vec::with_capacity(n);
    for i in 0..n {
        let c = (i % 10) as u8;
        for y in 0..8 {
            for x in 0..8 {
                let on = y == usize::from(c % 8)
                    || (c >= 8 && x == usize::from(c - 6))
                    || (c < 8 && x == 7 - usize::from(c % 8) / 2);
                let noise = rng::below(&mut r, 100) < 8;
                pixels.push(if on != noise {
                    200 + rng::below(&mut r, 56) as u8
                } else {
                    rng::below(&mut r, 60) as u8
                });
            }
        }
        labels.push(c);
    }
    (pixels, labels)
}

/// Writes a complete synthetic MNIST-style directory.
pub fn write_synthetic_mnist(dir: &Path, n_train: usize, n_test: usize) {
    let (p, l) = synthetic(n_train, 1);
    fs::write(
        dir.join("train-images-idx3-ubyte"),
        idx_images(n_train as u32, 8, 8, &p),
    )
    .unwrap();
    fs::write(dir.join("train-labels-idx1-ubyte"), idx_labels(&l)).unwrap();
    let (p, l) = synthetic(n_test, 2);
    fs::write(
        dir.join("t10k-images-idx3-ubyte"),
        idx_images(n_test as u32, 8, 8, &p),
    )
    .unwrap();
    fs::write(dir.join("t10k-labels-idx1-ubyte"), idx_labels(&l)).unwrap();
}

/// The real MNIST directory, when present.
pub fn mnist_dir() -> Option<PathBuf> {
    let dir = std::env::var_os("BNN_RRAM_MNIST")
        .map(PathBuf::from)
        .unwrap_or_else(|| Path::new(env!("CARGO_MANIFEST_DIR")).join("../../data/mnist"));
    dir.join("t10k-labels-idx1-ubyte").exists().then_some(dir)
}
