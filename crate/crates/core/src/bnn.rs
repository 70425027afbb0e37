//! Dense binarized layers and models.
//!
//! A hidden neuron fires (`+1`) when `sign * (popcount - threshold) > 0`, where
//! `popcount` is the XNOR-popcount of its weight row with the input. The
//! output layer is not binarized in [`OutputMode::IntegerLogits`]: it scores
//! each class as `sign * (signed_dot - threshold)` and the prediction is the
//! argmax, lowest index on ties.

use alloc::vec;
use alloc::vec::Vec;

use crate::bitlinalg::{binary_matvec_into, BitMatrix, BitVector};
use crate::{Error, Result};

/// Sign of a real weight with `sign(0) = +1`.
pub fn binarize_real(w: f64) -> Result<i8> {
    if !w.is_finite() {
        return Err(Error::InvalidWeight(w));
    }
    Ok(if w >= 0.0 { 1 } else { -1 })
}

/// Thresholds an image into bits: bit `i` is set iff `pixels[i] >= threshold`.
pub fn binarize_input<T: Copy + Into<f64>>(pixels: &[T], threshold: f64) -> Result<BitVector> {
    if let Some((index, value)) = pixels
        .iter()
        .map(|&p| p.into())
        .enumerate()
        .find(|(_, p)| !(0.0..=1.0).contains(p))
    {
        return Err(Error::InvalidPixel { index, value });
    }
    Ok(BitVector::from_bools(
        pixels.iter().map(|&p| p.into() >= threshold),
    ))
}

/// One fully connected binary layer.
#[derive(Clone, Debug, PartialEq)]
pub struct DenseLayer {
    weights: BitMatrix,
    thresholds: Vec<f64>,
    threshold_sign: Vec<i8>,
}

impl DenseLayer {
    pub fn new(weights: BitMatrix, thresholds: Vec<f64>, threshold_sign: Vec<i8>) -> Result<Self> {
        if thresholds.len() != weights.rows() {
            return Err(Error::DimensionMismatch {
                expected: weights.rows(),
                actual: thresholds.len(),
            });
        }
        if threshold_sign.len() != weights.rows() {
            return Err(Error::DimensionMismatch {
                expected: weights.rows(),
                actual: threshold_sign.len(),
            });
        }
        if let Some(t) = thresholds.iter().find(|t| !t.is_finite()) {
            return Err(Error::InvalidModel(alloc::format!(
                "non-finite threshold {t}"
            )));
        }
        if let Some((index, &s)) = threshold_sign
            .iter()
            .enumerate()
            .find(|(_, s)| !matches!(s, 1 | -1))
        {
            return Err(Error::InvalidSignValue {
                index,
                value: s.into(),
            });
        }
        Ok(Self {
            weights,
            thresholds,
            threshold_sign,
        })
    }

    pub fn weights(&self) -> &BitMatrix {
        &self.weights
    }

    pub fn thresholds(&self) -> &[f64] {
        &self.thresholds
    }

    pub fn threshold_sign(&self) -> &[i8] {
        &self.threshold_sign
    }

    pub fn in_features(&self) -> usize {
        self.weights.cols()
    }

    pub fn out_features(&self) -> usize {
        self.weights.rows()
    }

    /// Same thresholds, different weights of the same shape.
    pub fn with_weights(&self, weights: BitMatrix) -> Result<Self> {
        if weights.rows() != self.weights.rows() || weights.cols() != self.weights.cols() {
            return Err(Error::DimensionMismatch {
                expected: self.weights.rows() * self.weights.cols(),
                actual: weights.rows() * weights.cols(),
            });
        }
        Ok(Self {
            weights,
            thresholds: self.thresholds.clone(),
            threshold_sign: self.threshold_sign.clone(),
        })
    }
}

/// Binary activations of a hidden layer.
pub fn layer_forward(layer: &DenseLayer, x: &BitVector) -> Result<BitVector> {
    let mut counts = vec![0; layer.out_features()];
    binary_matvec_into(&layer.weights, x, &mut counts)?;
    Ok(BitVector::from_bools(counts.iter().enumerate().map(
        |(j, &pc)| f64::from(layer.threshold_sign[j]) * (f64::from(pc) - layer.thresholds[j]) > 0.0,
    )))
}

/// Real-valued class scores of an output layer: `sign * (signed_dot - threshold)`.
pub fn layer_scores(layer: &DenseLayer, x: &BitVector) -> Result<Vec<f64>> {
    let mut counts = vec![0; layer.out_features()];
    binary_matvec_into(&layer.weights, x, &mut counts)?;
    let n = layer.in_features() as f64;
    Ok(counts
        .iter()
        .enumerate()
        .map(|(j, &pc)| {
            let dot = 2.0 * f64::from(pc) - n;
            f64::from(layer.threshold_sign[j]) * (dot - layer.thresholds[j])
        })
        .collect())
}

/// Per-neuron batch-normalization parameters of one layer.
#[derive(Clone, Debug, PartialEq)]
pub struct BatchNormStats {
    pub gamma: Vec<f64>,
    pub beta: Vec<f64>,
    pub running_mean: Vec<f64>,
    pub running_var: Vec<f64>,
    pub epsilon: f64,
}

impl BatchNormStats {
    pub fn len(&self) -> usize {
        self.gamma.len()
    }

    pub fn is_empty(&self) -> bool {
        self.gamma.is_empty()
    }

    fn validate(&self) -> Result<()> {
        let n = self.gamma.len();
        for len in [
            self.beta.len(),
            self.running_mean.len(),
            self.running_var.len(),
        ] {
            if len != n {
                return Err(Error::DimensionMismatch {
                    expected: n,
                    actual: len,
                });
            }
        }
        if !(self.epsilon > 0.0) {
            return Err(Error::InvalidModel(alloc::format!(
                "epsilon {} must be > 0",
                self.epsilon
            )));
        }
        if self.running_var.iter().any(|&v| !(v >= 0.0)) {
            return Err(Error::InvalidModel("negative running variance".into()));
        }
        Ok(())
    }

    /// The normalized, affine-transformed value for pre-activation `s`.
    pub fn normalize(&self, neuron: usize, s: f64) -> f64 {
        self.gamma[neuron] * (s - self.running_mean[neuron])
            / libm::sqrt(self.running_var[neuron] + self.epsilon)
            + self.beta[neuron]
    }

    /// Re-expresses statistics gathered on signed dot products `s` of an
    /// `n_in`-input layer in popcount units, using `s = 2 * popcount - n_in`.
    pub fn to_popcount_units(&self, n_in: usize) -> BatchNormStats {
        let n = n_in as f64;
        BatchNormStats {
            gamma: self.gamma.clone(),
            beta: self.beta.clone(),
            running_mean: self.running_mean.iter().map(|m| (m + n) / 2.0).collect(),
            running_var: self.running_var.iter().map(|v| v / 4.0).collect(),
            epsilon: self.epsilon / 4.0,
        }
    }
}

/// Thresholds and comparison directions produced by folding batch norm.
#[derive(Clone, Debug, PartialEq)]
pub struct FoldedThresholds {
    pub thresholds: Vec<f64>,
    pub signs: Vec<i8>,
}

/// Stand-in threshold for neurons whose output does not depend on the input.
pub const DEGENERATE_THRESHOLD: f64 = f64::MAX;

fn fold_neuron(stats: &BatchNormStats, j: usize) -> Option<(f64, i8)> {
    let gamma = stats.gamma[j];
    if gamma == 0.0 {
        return None;
    }
    let sd = libm::sqrt(stats.running_var[j] + stats.epsilon);
    let threshold = stats.running_mean[j] - stats.beta[j] * sd / gamma;
    Some((threshold, if gamma > 0.0 { 1 } else { -1 }))
}

/// Folds batch normalization followed by `sign` into a per-neuron threshold
/// and comparison direction: `sign * (s - threshold) > 0` iff
/// `gamma * (s - mean) / sqrt(var + eps) + beta > 0`.
///
/// Fails on the first neuron with `gamma == 0`; see [`fold_batchnorm_lenient`].
pub fn fold_batchnorm_to_threshold(stats: &BatchNormStats) -> Result<FoldedThresholds> {
    stats.validate()?;
    let mut out = FoldedThresholds {
        thresholds: Vec::with_capacity(stats.len()),
        signs: Vec::with_capacity(stats.len()),
    };
    for j in 0..stats.len() {
        let (t, s) = fold_neuron(stats, j).ok_or(Error::DegenerateNeuron { neuron: j })?;
        if !t.is_finite() {
            return Err(Error::NumericalDivergence(alloc::format!(
                "folded threshold of neuron {j} is {t}"
            )));
        }
        out.thresholds.push(t);
        out.signs.push(s);
    }
    Ok(out)
}

/// Like [`fold_batchnorm_to_threshold`] but substitutes a constant neuron for
/// every `gamma == 0` entry and reports their indices. A degenerate neuron
/// outputs `sign(beta)`, realised with [`DEGENERATE_THRESHOLD`] (`beta <= 0`,
/// always `-1`) or its negation (`beta > 0`, always `+1`).
pub fn fold_batchnorm_lenient(stats: &BatchNormStats) -> Result<(FoldedThresholds, Vec<usize>)> {
    stats.validate()?;
    let mut degenerate = Vec::new();
    let mut out = FoldedThresholds {
        thresholds: Vec::with_capacity(stats.len()),
        signs: Vec::with_capacity(stats.len()),
    };
    for j in 0..stats.len() {
        let (t, s) = match fold_neuron(stats, j) {
            Some((t, s)) if t.is_finite() => (t, s),
            _ => {
                degenerate.push(j);
                if stats.beta[j] > 0.0 {
                    (-DEGENERATE_THRESHOLD, 1)
                } else {
                    (DEGENERATE_THRESHOLD, 1)
                }
            }
        };
        out.thresholds.push(t);
        out.signs.push(s);
    }
    Ok((out, degenerate))
}

/// How the last layer is turned into a class decision.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum OutputMode {
    /// Every layer, the last included, is binarized; the class is the first
    /// output bit that is set (class 0 if none).
    BinaryHidden,
    /// The last layer emits real scores and the class is their argmax.
    IntegerLogits,
}

impl OutputMode {
    pub fn code(self) -> u8 {
        match self {
            OutputMode::BinaryHidden => 0,
            OutputMode::IntegerLogits => 1,
        }
    }

    pub fn from_code(code: u8) -> Option<Self> {
        match code {
            0 => Some(OutputMode::BinaryHidden),
            1 => Some(OutputMode::IntegerLogits),
            _ => None,
        }
    }
}

/// A stack of binary dense layers.
#[derive(Clone, Debug, PartialEq)]
pub struct BnnModel {
    layers: Vec<DenseLayer>,
    input_threshold: f64,
    n_classes: usize,
    output_mode: OutputMode,
}

impl BnnModel {
    pub fn new(
        layers: Vec<DenseLayer>,
        input_threshold: f64,
        n_classes: usize,
        output_mode: OutputMode,
    ) -> Result<Self> {
        let last = layers
            .last()
            .ok_or_else(|| Error::InvalidModel("model has no layers".into()))?;
        if last.out_features() != n_classes {
            return Err(Error::DimensionMismatch {
                expected: n_classes,
                actual: last.out_features(),
            });
        }
        for pair in layers.windows(2) {
            if pair[0].out_features() != pair[1].in_features() {
                return Err(Error::DimensionMismatch {
                    expected: pair[0].out_features(),
                    actual: pair[1].in_features(),
                });
            }
        }
        if !(0.0..=1.0).contains(&input_threshold) {
            return Err(Error::InvalidModel(alloc::format!(
                "input binarization threshold {input_threshold} outside [0, 1]"
            )));
        }
        Ok(Self {
            layers,
            input_threshold,
            n_classes,
            output_mode,
        })
    }

    pub fn layers(&self) -> &[DenseLayer] {
        &self.layers
    }

    pub fn input_threshold(&self) -> f64 {
        self.input_threshold
    }

    pub fn n_classes(&self) -> usize {
        self.n_classes
    }

    pub fn output_mode(&self) -> OutputMode {
        self.output_mode
    }

    pub fn input_len(&self) -> usize {
        self.layers[0].in_features()
    }

    /// `(rows, cols)` of every weight matrix.
    pub fn weight_shapes(&self) -> Vec<(usize, usize)> {
        self.layers
            .iter()
            .map(|l| (l.out_features(), l.in_features()))
            .collect()
    }

    /// Same thresholds and metadata with replaced weight matrices.
    pub fn with_weights(&self, weights: Vec<BitMatrix>) -> Result<Self> {
        if weights.len() != self.layers.len() {
            return Err(Error::DimensionMismatch {
                expected: self.layers.len(),
                actual: weights.len(),
            });
        }
        let layers = self
            .layers
            .iter()
            .zip(weights)
            .map(|(l, w)| l.with_weights(w))
            .collect::<Result<Vec<_>>>()?;
        Ok(Self {
            layers,
            ..self.clone()
        })
    }

    /// Class scores for an already binarized input. In
    /// [`OutputMode::BinaryHidden`] the scores are the 0/1 output bits.
    pub fn scores_bits(&self, x: &BitVector) -> Result<Vec<f64>> {
        let (last, hidden) = self.layers.split_last().expect("model has layers");
        let mut act = x.clone();
        for layer in hidden {
            act = layer_forward(layer, &act)?;
        }
        match self.output_mode {
            OutputMode::IntegerLogits => layer_scores(last, &act),
            OutputMode::BinaryHidden => Ok(layer_forward(last, &act)?
                .iter()
                .map(|b| if b { 1.0 } else { 0.0 })
                .collect()),
        }
    }

    /// Predicted class for an already binarized input.
    pub fn classify_bits(&self, x: &BitVector) -> Result<usize> {
        Ok(argmax(&self.scores_bits(x)?))
    }

    /// Binarizes `image` and returns the predicted class.
    pub fn classify<T: Copy + Into<f64>>(&self, image: &[T]) -> Result<usize> {
        model_forward(self, image)
    }
}

/// Index of the largest value; the lowest index wins ties.
pub fn argmax(values: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in values.iter().enumerate().skip(1) {
        if v > values[best] {
            best = i;
        }
    }
    best
}

/// Full inference on a real-valued image in `[0, 1]`.
pub fn model_forward<T: Copy + Into<f64>>(model: &BnnModel, image: &[T]) -> Result<usize> {
    if image.len() != model.input_len() {
        return Err(Error::DimensionMismatch {
            expected: model.input_len(),
            actual: image.len(),
        });
    }
    let x = binarize_input(image, model.input_threshold)?;
    model.classify_bits(&x)
}
