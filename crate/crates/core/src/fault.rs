//! Stochastic bit flips over stored binary weights.
//!
//! Each stored bit is flipped independently with probability `p`, whatever its
//! value. A mask is a pure function of `(seed, stream label, shapes, p)`: each
//! layer draws from its own labelled sub-stream, so masks for different
//! layers, iterations or evaluation runs never share randomness.

use alloc::format;
use alloc::vec::Vec;

use rand_core::RngCore;

use crate::bitlinalg::{BitMatrix, WORD_BITS};
use crate::bnn::BnnModel;
use crate::rng;
use crate::{Error, Result};

/// Which layers' weights are exposed to bit errors.
#[derive(Clone, Debug, PartialEq, Eq, Default)]
pub enum LayerScope {
    #[default]
    All,
    /// Only the listed layer indices.
    Layers(Vec<usize>),
}

impl LayerScope {
    pub fn contains(&self, layer: usize) -> bool {
        match self {
            LayerScope::All => true,
            LayerScope::Layers(ls) => ls.contains(&layer),
        }
    }
}

/// Bit error model: rate, seed and affected layers.
#[derive(Clone, Debug, PartialEq)]
pub struct FaultSpec {
    pub p: f64,
    pub seed: u64,
    pub scope: LayerScope,
}

impl FaultSpec {
    pub fn new(p: f64, seed: u64) -> Result<Self> {
        let spec = Self {
            p,
            seed,
            scope: LayerScope::All,
        };
        spec.validate()?;
        Ok(spec)
    }

    pub fn with_scope(mut self, scope: LayerScope) -> Self {
        self.scope = scope;
        self
    }

    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.p) {
            return Err(Error::InvalidRate(self.p));
        }
        Ok(())
    }
}

/// Per-layer flip masks; a set bit flips the stored weight.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct FlipMask {
    layers: Vec<BitMatrix>,
}

impl FlipMask {
    /// Mask that flips nothing.
    pub fn zeros(shapes: &[(usize, usize)]) -> Self {
        Self {
            layers: shapes
                .iter()
                .map(|&(r, c)| BitMatrix::zeros(r, c))
                .collect(),
        }
    }

    pub fn from_layers(layers: Vec<BitMatrix>) -> Self {
        Self { layers }
    }

    pub fn layers(&self) -> &[BitMatrix] {
        &self.layers
    }

    pub fn layer(&self, k: usize) -> &BitMatrix {
        &self.layers[k]
    }

    pub fn shapes(&self) -> Vec<(usize, usize)> {
        self.layers.iter().map(|m| (m.rows(), m.cols())).collect()
    }

    pub fn count_ones(&self) -> u64 {
        self.layers.iter().map(BitMatrix::count_ones).sum()
    }

    pub fn total_bits(&self) -> u64 {
        self.layers
            .iter()
            .map(|m| (m.rows() * m.cols()) as u64)
            .sum()
    }

    pub fn is_zero(&self) -> bool {
        self.layers
            .iter()
            .all(|m| m.words().iter().all(|&w| w == 0))
    }
}

/// Draws a mask with every in-scope bit set independently with probability `spec.p`.
pub fn sample_mask(spec: &FaultSpec, shapes: &[(usize, usize)], stream: &str) -> Result<FlipMask> {
    spec.validate()?;
    if shapes.is_empty() {
        return Err(Error::InvalidModel(
            "no layer shapes to sample a mask for".into(),
        ));
    }
    let layers = shapes
        .iter()
        .enumerate()
        .map(|(k, &(rows, cols))| {
            if !spec.scope.contains(k) {
                return BitMatrix::zeros(rows, cols);
            }
            let mut r = rng::stream(spec.seed, &format!("{stream}/layer-{k}"));
            bernoulli_matrix(&mut r, rows, cols, spec.p)
        })
        .collect();
    Ok(FlipMask { layers })
}

/// Matrix of independent Bernoulli(p) bits. Walks geometric gaps between set
/// bits, so the cost is proportional to `min(p, 1 - p)` times the bit count.
pub(crate) fn bernoulli_matrix<R: RngCore>(
    r: &mut R,
    rows: usize,
    cols: usize,
    p: f64,
) -> BitMatrix {
    let total = rows * cols;
    if p <= 0.0 || total == 0 {
        return BitMatrix::zeros(rows, cols);
    }
    if p >= 1.0 {
        return BitMatrix::ones(rows, cols);
    }
    let invert = p > 0.5;
    let q = if invert { 1.0 - p } else { p };
    let mut m = BitMatrix::zeros(rows, cols);
    let stride = m.row_stride();
    let log_keep = libm::log1p(-q);
    let words = m.words_mut();
    let mut pos: u64 = 0;
    loop {
        let gap = libm::floor(libm::log(rng::unit_open_f64(r)) / log_keep);
        if gap >= (total as u64 - pos) as f64 {
            break;
        }
        pos += gap as u64;
        let (row, col) = ((pos / cols as u64) as usize, (pos % cols as u64) as usize);
        words[row * stride + col / WORD_BITS] |= 1 << (col % WORD_BITS);
        pos += 1;
        if pos >= total as u64 {
            break;
        }
    }
    if invert {
        for w in words.iter_mut() {
            *w = !*w;
        }
        m.clear_padding();
    }
    m
}

/// `weights XOR mask`; the input is left untouched.
pub fn apply_flips(weights: &BitMatrix, mask: &BitMatrix) -> Result<BitMatrix> {
    weights.xor(mask)
}

/// Applies a mask to every layer of a model; thresholds are unchanged.
pub fn apply_mask(model: &BnnModel, mask: &FlipMask) -> Result<BnnModel> {
    if mask.layers.len() != model.layers().len() {
        return Err(Error::DimensionMismatch {
            expected: model.layers().len(),
            actual: mask.layers.len(),
        });
    }
    let weights = model
        .layers()
        .iter()
        .zip(&mask.layers)
        .map(|(l, m)| apply_flips(l.weights(), m))
        .collect::<Result<Vec<_>>>()?;
    model.with_weights(weights)
}

/// A copy of `model` with fresh bit errors drawn from `(spec, stream)`.
pub fn corrupt_model(model: &BnnModel, spec: &FaultSpec, stream: &str) -> Result<BnnModel> {
    let mask = sample_mask(spec, &model.weight_shapes(), stream)?;
    apply_mask(model, &mask)
}
