//! Straight-through-estimator training of dense BNNs with optional weight bit
//! errors inside every iteration.
//!
//! Each layer keeps real-valued shadow weights `W_real` clipped to `[-1, 1]`.
//! An iteration runs:
//!
//! 1. Binary weights `W_b = sign(W_real)`, then effective weights
//!    `W_err = W_b XOR mask` for a fresh flip mask drawn at rate `p_train`.
//! 2. Forward: pre-activations `S = X W_errᵀ`, batch normalization, binary
//!    activations `sign(Y)` on hidden layers, dropout, and a softmax
//!    cross-entropy head on `alpha * S + bias` for the last layer.
//! 3. Backward through the same `W_err`. `sign` is differentiated as the
//!    hard-tanh gate `1{|x| <= 1}`, for weights and activations alike. The
//!    gradient reaching `W_real` is `mask_sign * dL/dW_err * gate`.
//! 4. Adam update of all parameters, then clipping of `W_real`. Weight steps
//!    are optionally scaled per layer by the inverse Glorot range.
//!
//! After training, batch normalization is folded into per-neuron thresholds
//! and the exported [`BnnModel`] carries the error-free `W_b`.

use alloc::format;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use crate::bitlinalg::{BitMatrix, BitVector};
use crate::bnn::{self, BatchNormStats, BnnModel, DenseLayer, OutputMode};
use crate::fault::{sample_mask, FaultSpec, FlipMask};
use crate::format::Reader;
use crate::rng::{self, StreamRng};
use crate::{Error, Result};

/// Hyper-parameters of a training run.
#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    /// Hidden layer widths; the input and class counts come from the data.
    pub hidden: Vec<usize>,
    pub n_classes: usize,
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    /// Multiplicative learning-rate decay applied once per epoch.
    pub lr_decay: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub adam_epsilon: f64,
    /// Probability of zeroing a hidden activation during training.
    pub dropout: f64,
    /// Bit error rate applied to the weights in every training iteration.
    pub p_train: f64,
    pub seed: u64,
    /// Pixel threshold used to binarize inputs.
    pub input_threshold: f64,
    pub bn_momentum: f64,
    pub bn_epsilon: f64,
    /// Scale each layer's weight step by `1 / sqrt(1.5 / (fan_in + fan_out))`.
    pub glorot_lr_scale: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            hidden: vec![256, 256],
            n_classes: 10,
            epochs: 100,
            batch_size: 128,
            learning_rate: 1e-3,
            lr_decay: 0.97,
            beta1: 0.9,
            beta2: 0.999,
            adam_epsilon: 1e-8,
            dropout: 0.2,
            p_train: 0.0,
            seed: 1,
            input_threshold: 0.5,
            bn_momentum: 0.1,
            bn_epsilon: 1e-4,
            glorot_lr_scale: true,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(Error::InvalidConfig(m));
        if self.epochs < 1 {
            return fail("epochs must be >= 1".into());
        }
        if self.batch_size < 2 {
            return fail("batch_size must be >= 2 for batch normalization".into());
        }
        if !(0.0..=1.0).contains(&self.p_train) {
            return Err(Error::InvalidRate(self.p_train));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return fail(format!("dropout {} outside [0, 1)", self.dropout));
        }
        if !(self.learning_rate > 0.0) || !(self.lr_decay > 0.0) {
            return fail("learning rate and decay must be > 0".into());
        }
        if !(0.0..1.0).contains(&self.beta1)
            || !(0.0..1.0).contains(&self.beta2)
            || !(self.adam_epsilon > 0.0)
        {
            return fail("invalid Adam parameters".into());
        }
        if !(0.0..=1.0).contains(&self.input_threshold) {
            return fail(format!(
                "input threshold {} outside [0, 1]",
                self.input_threshold
            ));
        }
        if !(0.0..=1.0).contains(&self.bn_momentum) || !(self.bn_epsilon > 0.0) {
            return fail("invalid batch-norm parameters".into());
        }
        if self.n_classes < 2 || self.hidden.contains(&0) {
            return fail("layer widths and class count must be positive (>= 2 classes)".into());
        }
        Ok(())
    }

    /// Canonical `key=value` rendering of every field, one per line. Used for
    /// cache keys and checkpoints.
    pub fn canonical(&self) -> String {
        let hidden: Vec<String> = self.hidden.iter().map(|h| format!("{h}")).collect();
        format!(
            "hidden={}\nn_classes={}\nepochs={}\nbatch_size={}\nlearning_rate={:e}\nlr_decay={:e}\n\
             beta1={:e}\nbeta2={:e}\nadam_epsilon={:e}\ndropout={:e}\np_train={:e}\nseed={}\n\
             input_threshold={:e}\nbn_momentum={:e}\nbn_epsilon={:e}\nglorot_lr_scale={}\n",
            hidden.join(","),
            self.n_classes,
            self.epochs,
            self.batch_size,
            self.learning_rate,
            self.lr_decay,
            self.beta1,
            self.beta2,
            self.adam_epsilon,
            self.dropout,
            self.p_train,
            self.seed,
            self.input_threshold,
            self.bn_momentum,
            self.bn_epsilon,
            self.glorot_lr_scale
        )
    }
}

/// Binarized training examples.
#[derive(Clone, Debug, Default)]
pub struct BinarizedSet {
    pub inputs: Vec<BitVector>,
    pub labels: Vec<u8>,
}

impl BinarizedSet {
    /// Binarizes `n = labels.len()` row-major images of `dim` pixels each.
    pub fn from_images<T: Copy + Into<f64>>(
        images: &[T],
        dim: usize,
        labels: &[u8],
        threshold: f64,
    ) -> Result<Self> {
        if images.len() != dim * labels.len() {
            return Err(Error::DimensionMismatch {
                expected: dim * labels.len(),
                actual: images.len(),
            });
        }
        let inputs = images
            .chunks_exact(dim.max(1))
            .take(labels.len())
            .map(|img| bnn::binarize_input(img, threshold))
            .collect::<Result<Vec<_>>>()?;
        Ok(Self {
            inputs,
            labels: labels.to_vec(),
        })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.inputs.first().map_or(0, BitVector::len)
    }

    /// Dense ±1 batch of the given example indices.
    pub fn batch(&self, indices: &[usize]) -> Batch {
        let dim = self.dim();
        let mut inputs = vec![0.0; indices.len() * dim];
        for (row, &i) in inputs.chunks_exact_mut(dim.max(1)).zip(indices) {
            for (x, bit) in row.iter_mut().zip(self.inputs[i].iter()) {
                *x = if bit { 1.0 } else { -1.0 };
            }
        }
        Batch {
            inputs,
            labels: indices.iter().map(|&i| self.labels[i]).collect(),
            dim,
        }
    }
}

/// A dense mini-batch: `labels.len()` rows of `dim` inputs.
#[derive(Clone, Debug, PartialEq)]
pub struct Batch {
    pub inputs: Vec<f64>,
    pub labels: Vec<u8>,
    pub dim: usize,
}

impl Batch {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }
}

/// How `sign` is evaluated in the forward pass.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Quantizer {
    /// Binary network: `sign` on weights and hidden activations.
    Sign,
    /// Real-valued surrogate: `sign` replaced by hard-tanh. The backward pass
    /// is unchanged, so this computes exact gradients of the surrogate and is
    /// what gradient checks run against.
    HardTanh,
}

impl Quantizer {
    #[inline]
    fn apply(self, x: f64) -> f64 {
        match self {
            Quantizer::Sign => {
                if x >= 0.0 {
                    1.0
                } else {
                    -1.0
                }
            }
            Quantizer::HardTanh => x.clamp(-1.0, 1.0),
        }
    }
}

#[inline]
fn ste_gate(x: f64) -> f64 {
    if x.abs() <= 1.0 {
        1.0
    } else {
        0.0
    }
}

/// Adam first/second moment accumulators of one parameter tensor.
#[derive(Clone, Debug, PartialEq)]
pub struct Moments {
    pub m: Vec<f64>,
    pub v: Vec<f64>,
}

impl Moments {
    fn zeros(n: usize) -> Self {
        Self {
            m: vec![0.0; n],
            v: vec![0.0; n],
        }
    }
}

/// Real-valued state of one dense layer.
#[derive(Clone, Debug, PartialEq)]
pub struct ShadowLayer {
    pub rows: usize,
    pub cols: usize,
    /// Row-major `rows x cols` shadow weights.
    pub weights: Vec<f64>,
    pub weight_moments: Moments,
}

/// Batch normalization of a hidden layer, over signed dot products.
#[derive(Clone, Debug, PartialEq)]
pub struct ShadowNorm {
    pub gamma: Vec<f64>,
    pub beta: Vec<f64>,
    pub running_mean: Vec<f64>,
    pub running_var: Vec<f64>,
    pub gamma_moments: Moments,
    pub beta_moments: Moments,
}

/// Output head: `logit_j = alpha * s_j + bias_j`.
#[derive(Clone, Debug, PartialEq)]
pub struct ShadowHead {
    pub alpha: f64,
    pub bias: Vec<f64>,
    pub alpha_moments: Moments,
    pub bias_moments: Moments,
}

/// Everything training mutates.
#[derive(Clone, Debug, PartialEq)]
pub struct ShadowModel {
    pub layers: Vec<ShadowLayer>,
    /// One per hidden layer (all layers but the last).
    pub norms: Vec<ShadowNorm>,
    pub head: ShadowHead,
    /// Adam step count.
    pub step: u64,
    pub bn_epsilon: f64,
    pub input_threshold: f64,
    pub quantizer: Quantizer,
}

impl ShadowModel {
    /// Glorot-uniform shadow weights, identity normalization, drawn from the
    /// `"init"` stream of `config.seed`.
    pub fn init(config: &TrainConfig, n_inputs: usize) -> Result<Self> {
        config.validate()?;
        if n_inputs == 0 {
            return Err(Error::InvalidConfig("input dimension is zero".into()));
        }
        let mut widths = vec![n_inputs];
        widths.extend_from_slice(&config.hidden);
        widths.push(config.n_classes);
        let mut r = rng::stream(config.seed, "init");
        let layers = widths
            .windows(2)
            .map(|w| {
                let (cols, rows) = (w[0], w[1]);
                let a = libm::sqrt(6.0 / (rows + cols) as f64);
                ShadowLayer {
                    rows,
                    cols,
                    weights: (0..rows * cols)
                        .map(|_| (2.0 * rng::unit_f64(&mut r) - 1.0) * a)
                        .collect(),
                    weight_moments: Moments::zeros(rows * cols),
                }
            })
            .collect::<Vec<_>>();
        let norms = config
            .hidden
            .iter()
            .map(|&n| ShadowNorm {
                gamma: vec![1.0; n],
                beta: vec![0.0; n],
                running_mean: vec![0.0; n],
                running_var: vec![1.0; n],
                gamma_moments: Moments::zeros(n),
                beta_moments: Moments::zeros(n),
            })
            .collect();
        let last_cols = *widths.iter().rev().nth(1).unwrap();
        Ok(Self {
            layers,
            norms,
            head: ShadowHead {
                alpha: 1.0 / libm::sqrt(last_cols as f64),
                bias: vec![0.0; config.n_classes],
                alpha_moments: Moments::zeros(1),
                bias_moments: Moments::zeros(config.n_classes),
            },
            step: 0,
            bn_epsilon: config.bn_epsilon,
            input_threshold: config.input_threshold,
            quantizer: Quantizer::Sign,
        })
    }

    pub fn weight_shapes(&self) -> Vec<(usize, usize)> {
        self.layers.iter().map(|l| (l.rows, l.cols)).collect()
    }

    pub fn n_inputs(&self) -> usize {
        self.layers[0].cols
    }

    /// `sign(W_real)` of every layer.
    pub fn binary_weights(&self) -> Result<Vec<BitMatrix>> {
        self.layers
            .iter()
            .map(|l| {
                if let Some(&w) = l.weights.iter().find(|w| !w.is_finite()) {
                    return Err(Error::InvalidWeight(w));
                }
                Ok(BitMatrix::from_fn(l.rows, l.cols, |r, c| {
                    l.weights[r * l.cols + c] >= 0.0
                }))
            })
            .collect()
    }

    /// Exports the binary model with batch norm folded into thresholds.
    /// Returns the model and `(layer, neuron)` of every degenerate
    /// (`gamma == 0`) neuron that was replaced by a constant.
    pub fn export(&self) -> Result<(BnnModel, Vec<(usize, usize)>)> {
        let weights = self.binary_weights()?;
        let mut degenerate = Vec::new();
        let mut layers = Vec::with_capacity(weights.len());
        let n_layers = weights.len();
        for (k, w) in weights.into_iter().enumerate() {
            if k + 1 < n_layers {
                let norm = &self.norms[k];
                let stats = BatchNormStats {
                    gamma: norm.gamma.clone(),
                    beta: norm.beta.clone(),
                    running_mean: norm.running_mean.clone(),
                    running_var: norm.running_var.clone(),
                    epsilon: self.bn_epsilon,
                }
                .to_popcount_units(w.cols());
                let (folded, bad) = bnn::fold_batchnorm_lenient(&stats)?;
                degenerate.extend(bad.into_iter().map(|j| (k, j)));
                layers.push(DenseLayer::new(w, folded.thresholds, folded.signs)?);
            } else {
                let alpha = self.head.alpha;
                if alpha == 0.0 || !alpha.is_finite() {
                    return Err(Error::NumericalDivergence(format!(
                        "output scale is {alpha}"
                    )));
                }
                let thresholds: Vec<f64> = self.head.bias.iter().map(|b| -b / alpha).collect();
                let sign = if alpha > 0.0 { 1 } else { -1 };
                let n = thresholds.len();
                layers.push(DenseLayer::new(w, thresholds, vec![sign; n])?);
            }
        }
        let n_classes = self.head.bias.len();
        Ok((
            BnnModel::new(
                layers,
                self.input_threshold,
                n_classes,
                OutputMode::IntegerLogits,
            )?,
            degenerate,
        ))
    }

    fn effective_weights(&self, k: usize, mask: &BitMatrix) -> Vec<f64> {
        let l = &self.layers[k];
        let mut out = Vec::with_capacity(l.rows * l.cols);
        for r in 0..l.rows {
            let ws = &l.weights[r * l.cols..(r + 1) * l.cols];
            let mw = mask.row_words(r);
            out.extend(ws.iter().enumerate().map(|(c, &w)| {
                let q = self.quantizer.apply(w);
                if mw[c / 64] >> (c % 64) & 1 == 1 {
                    -q
                } else {
                    q
                }
            }));
        }
        out
    }
}

/// Everything the backward pass needs from one forward pass.
#[derive(Clone, Debug)]
pub struct ForwardCache {
    /// Input of every layer, `batch x cols`.
    inputs: Vec<Vec<f64>>,
    /// Effective (flipped, quantized) weights of every layer.
    eff_weights: Vec<Vec<f64>>,
    /// Per hidden layer: normalized pre-activation, pre-quantization value,
    /// inverse batch std, batch mean and variance, dropout keep-scale.
    xhat: Vec<Vec<f64>>,
    y: Vec<Vec<f64>>,
    inv_std: Vec<Vec<f64>>,
    batch_mean: Vec<Vec<f64>>,
    batch_var: Vec<Vec<f64>>,
    dropout_scale: Vec<Vec<f64>>,
    /// Pre-activation of the last layer and softmax probabilities.
    out_pre: Vec<f64>,
    probs: Vec<f64>,
    labels: Vec<u8>,
    mask: FlipMask,
    step: u64,
    pub loss: f64,
    /// Fraction of the batch classified correctly by the training forward pass.
    pub accuracy: f64,
}

/// Parameter gradients of one batch.
#[derive(Clone, Debug, PartialEq)]
pub struct Gradients {
    pub weights: Vec<Vec<f64>>,
    pub gamma: Vec<Vec<f64>>,
    pub beta: Vec<Vec<f64>>,
    pub alpha: f64,
    pub bias: Vec<f64>,
}

impl Gradients {
    fn all_finite(&self) -> bool {
        self.alpha.is_finite()
            && self
                .weights
                .iter()
                .chain(&self.gamma)
                .chain(&self.beta)
                .chain(core::iter::once(&self.bias))
                .all(|v| v.iter().all(|x| x.is_finite()))
    }
}

/// `c = a * b (+ beta * c)` for row-major `m x k` times `k x n` with explicit strides.
#[allow(clippy::too_many_arguments)]
fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    (rsa, csa): (isize, isize),
    b: &[f64],
    (rsb, csb): (isize, isize),
    c: &mut [f64],
) {
    debug_assert!(c.len() >= m * n);
    if m == 0 || n == 0 {
        return;
    }
    if k == 0 {
        c[..m * n].fill(0.0);
        return;
    }
    assert!(a.len() >= m * k && b.len() >= k * n && c.len() >= m * n);
    // SAFETY: the slices cover the strided extents (every caller uses dense
    // layouts of exactly these sizes) and `c` does not alias `a` or `b`.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            rsa,
            csa,
            b.as_ptr(),
            rsb,
            csb,
            0.0,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

/// Optional dropout source for [`forward_train`].
pub struct Dropout<'a> {
    pub rate: f64,
    pub rng: &'a mut StreamRng,
}

/// Training-mode forward pass with weights `sign(W_real) XOR mask`.
pub fn forward_train(
    shadow: &ShadowModel,
    batch: &Batch,
    mask: &FlipMask,
    dropout: Option<Dropout<'_>>,
) -> Result<ForwardCache> {
    let bsz = batch.len();
    if bsz == 0 {
        return Err(Error::InvalidConfig("empty batch".into()));
    }
    if batch.dim != shadow.n_inputs() || batch.inputs.len() != bsz * batch.dim {
        return Err(Error::DimensionMismatch {
            expected: shadow.n_inputs(),
            actual: batch.dim,
        });
    }
    if mask.shapes() != shadow.weight_shapes() {
        return Err(Error::DimensionMismatch {
            expected: shadow.layers.len(),
            actual: mask.layers().len(),
        });
    }
    let n_classes = shadow.head.bias.len();
    if let Some(&l) = batch.labels.iter().find(|&&l| usize::from(l) >= n_classes) {
        return Err(Error::InvalidConfig(format!(
            "label {l} >= {n_classes} classes"
        )));
    }
    let mut dropout = dropout.filter(|d| d.rate > 0.0);
    let n_layers = shadow.layers.len();
    let mut cache = ForwardCache {
        inputs: Vec::with_capacity(n_layers),
        eff_weights: Vec::with_capacity(n_layers),
        xhat: Vec::new(),
        y: Vec::new(),
        inv_std: Vec::new(),
        batch_mean: Vec::new(),
        batch_var: Vec::new(),
        dropout_scale: Vec::new(),
        out_pre: Vec::new(),
        probs: Vec::new(),
        labels: batch.labels.clone(),
        mask: mask.clone(),
        step: shadow.step,
        loss: 0.0,
        accuracy: 0.0,
    };
    let mut x = batch.inputs.clone();
    for k in 0..n_layers {
        let (rows, cols) = (shadow.layers[k].rows, shadow.layers[k].cols);
        let w = shadow.effective_weights(k, mask.layer(k));
        let mut s = vec![0.0; bsz * rows];
        gemm(
            bsz,
            cols,
            rows,
            &x,
            (cols as isize, 1),
            &w,
            (1, cols as isize),
            &mut s,
        );
        cache.inputs.push(core::mem::take(&mut x));
        cache.eff_weights.push(w);
        if k + 1 == n_layers {
            cache.out_pre = s;
            break;
        }
        let norm = &shadow.norms[k];
        let mut mean = vec![0.0; rows];
        for row in s.chunks_exact(rows) {
            for (m, v) in mean.iter_mut().zip(row) {
                *m += v;
            }
        }
        mean.iter_mut().for_each(|m| *m /= bsz as f64);
        let mut var = vec![0.0; rows];
        for row in s.chunks_exact(rows) {
            for ((acc, v), m) in var.iter_mut().zip(row).zip(&mean) {
                *acc += (v - m) * (v - m);
            }
        }
        var.iter_mut().for_each(|v| *v /= bsz as f64);
        let inv_std: Vec<f64> = var
            .iter()
            .map(|v| 1.0 / libm::sqrt(v + shadow.bn_epsilon))
            .collect();
        let mut xhat = s;
        let mut y = vec![0.0; bsz * rows];
        let mut next = vec![0.0; bsz * rows];
        let mut scale = Vec::new();
        for (b, (xh_row, y_row)) in xhat
            .chunks_exact_mut(rows)
            .zip(y.chunks_exact_mut(rows))
            .enumerate()
        {
            for j in 0..rows {
                let xh = (xh_row[j] - mean[j]) * inv_std[j];
                xh_row[j] = xh;
                y_row[j] = norm.gamma[j] * xh + norm.beta[j];
                next[b * rows + j] = shadow.quantizer.apply(y_row[j]);
            }
        }
        if let Some(d) = dropout.as_mut() {
            let keep = 1.0 / (1.0 - d.rate);
            scale = (0..bsz * rows)
                .map(|_| {
                    if rng::unit_f64(d.rng) < d.rate {
                        0.0
                    } else {
                        keep
                    }
                })
                .collect();
            next.iter_mut().zip(&scale).for_each(|(a, s)| *a *= s);
        }
        cache.xhat.push(xhat);
        cache.y.push(y);
        cache.inv_std.push(inv_std);
        cache.batch_mean.push(mean);
        cache.batch_var.push(var);
        cache.dropout_scale.push(scale);
        x = next;
    }

    let alpha = shadow.head.alpha;
    let mut probs = vec![0.0; bsz * n_classes];
    let mut loss = 0.0;
    let mut correct = 0usize;
    for (b, (pre, p)) in cache
        .out_pre
        .chunks_exact(n_classes)
        .zip(probs.chunks_exact_mut(n_classes))
        .enumerate()
    {
        for j in 0..n_classes {
            p[j] = alpha * pre[j] + shadow.head.bias[j];
        }
        if bnn::argmax(p) == usize::from(cache.labels[b]) {
            correct += 1;
        }
        let max = p.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let mut z = 0.0;
        for v in p.iter_mut() {
            *v = libm::exp(*v - max);
            z += *v;
        }
        p.iter_mut().for_each(|v| *v /= z);
        loss -= libm::log(p[usize::from(cache.labels[b])].max(f64::MIN_POSITIVE));
    }
    cache.probs = probs;
    cache.loss = loss / bsz as f64;
    cache.accuracy = correct as f64 / bsz as f64;
    if !cache.loss.is_finite() {
        return Err(Error::NumericalDivergence(format!(
            "loss is {}",
            cache.loss
        )));
    }
    Ok(cache)
}

/// Backpropagates through the cached pass, reusing its flipped weights.
pub fn backward_train(
    shadow: &ShadowModel,
    cache: &ForwardCache,
    mask: &FlipMask,
) -> Result<Gradients> {
    if cache.step != shadow.step {
        return Err(Error::InvalidCache(format!(
            "cache from step {}, model at step {}",
            cache.step, shadow.step
        )));
    }
    if &cache.mask != mask {
        return Err(Error::InvalidCache(
            "flip mask differs from the forward pass".into(),
        ));
    }
    if cache.eff_weights.len() != shadow.layers.len() {
        return Err(Error::InvalidCache("layer count differs".into()));
    }
    let n_layers = shadow.layers.len();
    let n_classes = shadow.head.bias.len();
    let bsz = cache.labels.len();
    let inv_b = 1.0 / bsz as f64;

    // softmax cross-entropy
    let mut dlogits = cache.probs.clone();
    for (b, row) in dlogits.chunks_exact_mut(n_classes).enumerate() {
        row[usize::from(cache.labels[b])] -= 1.0;
        row.iter_mut().for_each(|v| *v *= inv_b);
    }
    let d_alpha: f64 = dlogits.iter().zip(&cache.out_pre).map(|(d, s)| d * s).sum();
    let mut d_bias = vec![0.0; n_classes];
    for row in dlogits.chunks_exact(n_classes) {
        d_bias.iter_mut().zip(row).for_each(|(g, d)| *g += d);
    }
    let mut ds: Vec<f64> = dlogits.iter().map(|d| d * shadow.head.alpha).collect();

    let mut grads = Gradients {
        weights: vec![Vec::new(); n_layers],
        gamma: vec![Vec::new(); n_layers - 1],
        beta: vec![Vec::new(); n_layers - 1],
        alpha: d_alpha,
        bias: d_bias,
    };

    for k in (0..n_layers).rev() {
        let layer = &shadow.layers[k];
        let (rows, cols) = (layer.rows, layer.cols);
        let x = &cache.inputs[k];
        // dW_err = dSᵀ X
        let mut dw = vec![0.0; rows * cols];
        gemm(
            rows,
            bsz,
            cols,
            &ds,
            (1, rows as isize),
            x,
            (cols as isize, 1),
            &mut dw,
        );
        let mask_k = mask.layer(k);
        for r in 0..rows {
            let mw = mask_k.row_words(r);
            let wr = &layer.weights[r * cols..(r + 1) * cols];
            for (c, g) in dw[r * cols..(r + 1) * cols].iter_mut().enumerate() {
                let flip = if mw[c / 64] >> (c % 64) & 1 == 1 {
                    -1.0
                } else {
                    1.0
                };
                *g *= flip * ste_gate(wr[c]);
            }
        }
        grads.weights[k] = dw;
        if k == 0 {
            break;
        }
        // dX = dS W_err
        let mut dx = vec![0.0; bsz * cols];
        gemm(
            bsz,
            rows,
            cols,
            &ds,
            (rows as isize, 1),
            &cache.eff_weights[k],
            (cols as isize, 1),
            &mut dx,
        );

        // through dropout, activation and batch norm of hidden layer k - 1
        let h = k - 1;
        let width = cols;
        let norm = &shadow.norms[h];
        let scale = &cache.dropout_scale[h];
        let y = &cache.y[h];
        let xhat = &cache.xhat[h];
        let mut dgamma = vec![0.0; width];
        let mut dbeta = vec![0.0; width];
        let mut dxhat = dx;
        for i in 0..bsz * width {
            let j = i % width;
            let mut g = dxhat[i];
            if !scale.is_empty() {
                g *= scale[i];
            }
            g *= ste_gate(y[i]);
            dgamma[j] += g * xhat[i];
            dbeta[j] += g;
            dxhat[i] = g * norm.gamma[j];
        }
        let mut sum_dxhat = vec![0.0; width];
        let mut sum_dxhat_xhat = vec![0.0; width];
        for i in 0..bsz * width {
            let j = i % width;
            sum_dxhat[j] += dxhat[i];
            sum_dxhat_xhat[j] += dxhat[i] * xhat[i];
        }
        let inv_std = &cache.inv_std[h];
        for i in 0..bsz * width {
            let j = i % width;
            dxhat[i] = inv_std[j]
                * (dxhat[i] - inv_b * sum_dxhat[j] - xhat[i] * inv_b * sum_dxhat_xhat[j]);
        }
        grads.gamma[h] = dgamma;
        grads.beta[h] = dbeta;
        ds = dxhat;
    }
    Ok(grads)
}

/// Folds a batch's statistics into the running means and variances
/// (unbiased variance, exponential averaging with `momentum`).
pub fn update_running_stats(shadow: &mut ShadowModel, cache: &ForwardCache, momentum: f64) {
    let bsz = cache.labels.len() as f64;
    let unbias = if bsz > 1.0 { bsz / (bsz - 1.0) } else { 1.0 };
    for (norm, (mean, var)) in shadow
        .norms
        .iter_mut()
        .zip(cache.batch_mean.iter().zip(&cache.batch_var))
    {
        for j in 0..mean.len() {
            norm.running_mean[j] = (1.0 - momentum) * norm.running_mean[j] + momentum * mean[j];
            norm.running_var[j] =
                (1.0 - momentum) * norm.running_var[j] + momentum * var[j] * unbias;
        }
    }
}

fn adam(params: &mut [f64], grads: &[f64], mom: &mut Moments, lr_t: f64, config: &TrainConfig) {
    for ((p, g), (m, v)) in params
        .iter_mut()
        .zip(grads)
        .zip(mom.m.iter_mut().zip(mom.v.iter_mut()))
    {
        *m = config.beta1 * *m + (1.0 - config.beta1) * g;
        *v = config.beta2 * *v + (1.0 - config.beta2) * g * g;
        *p -= lr_t * *m / (libm::sqrt(*v) + config.adam_epsilon);
    }
}

/// One Adam step with bias correction at learning rate `lr`, followed by
/// clipping the shadow weights to `[-1, 1]`.
pub fn optimizer_step(
    shadow: &mut ShadowModel,
    grads: &Gradients,
    lr: f64,
    config: &TrainConfig,
) -> Result<()> {
    if !grads.all_finite() {
        return Err(Error::NumericalDivergence(format!(
            "non-finite gradient at step {}",
            shadow.step
        )));
    }
    if grads.weights.len() != shadow.layers.len() || grads.gamma.len() != shadow.norms.len() {
        return Err(Error::InvalidCache(
            "gradient shapes do not match the model".into(),
        ));
    }
    shadow.step += 1;
    let t = shadow.step as f64;
    let lr_t =
        lr * libm::sqrt(1.0 - libm::pow(config.beta2, t)) / (1.0 - libm::pow(config.beta1, t));
    for (layer, g) in shadow.layers.iter_mut().zip(&grads.weights) {
        let scale = if config.glorot_lr_scale {
            libm::sqrt((layer.rows + layer.cols) as f64 / 1.5)
        } else {
            1.0
        };
        adam(
            &mut layer.weights,
            g,
            &mut layer.weight_moments,
            lr_t * scale,
            config,
        );
        layer
            .weights
            .iter_mut()
            .for_each(|w| *w = w.clamp(-1.0, 1.0));
    }
    for ((norm, gg), gb) in shadow.norms.iter_mut().zip(&grads.gamma).zip(&grads.beta) {
        adam(&mut norm.gamma, gg, &mut norm.gamma_moments, lr_t, config);
        adam(&mut norm.beta, gb, &mut norm.beta_moments, lr_t, config);
    }
    let head = &mut shadow.head;
    let mut alpha = [head.alpha];
    adam(
        &mut alpha,
        &[grads.alpha],
        &mut head.alpha_moments,
        lr_t,
        config,
    );
    head.alpha = alpha[0];
    adam(
        &mut head.bias,
        &grads.bias,
        &mut head.bias_moments,
        lr_t,
        config,
    );
    Ok(())
}

/// Summary of one training epoch.
#[derive(Clone, Debug, PartialEq)]
pub struct EpochReport {
    pub epoch: usize,
    pub mean_loss: f64,
    pub train_accuracy: f64,
    pub learning_rate: f64,
    /// Flipped weight bits summed over the epoch's masks.
    pub flipped_bits: u64,
}

/// Resumable training state: the shadow model plus the number of finished
/// epochs.
#[derive(Clone, Debug, PartialEq)]
pub struct Trainer {
    pub config: TrainConfig,
    pub shadow: ShadowModel,
    pub epochs_done: usize,
    pub iterations_done: u64,
}

impl Trainer {
    pub fn new(config: TrainConfig, n_inputs: usize) -> Result<Self> {
        let shadow = ShadowModel::init(&config, n_inputs)?;
        Ok(Self {
            config,
            shadow,
            epochs_done: 0,
            iterations_done: 0,
        })
    }

    pub fn finished(&self) -> bool {
        self.epochs_done >= self.config.epochs
    }

    /// Runs one epoch of shuffled mini-batches. Every iteration draws its own
    /// flip mask from stream `train-iter-<k>`; the same mask serves the
    /// forward and the backward pass.
    pub fn run_epoch(&mut self, data: &BinarizedSet) -> Result<EpochReport> {
        if data.dim() != self.shadow.n_inputs() {
            return Err(Error::DimensionMismatch {
                expected: self.shadow.n_inputs(),
                actual: data.dim(),
            });
        }
        if data.len() < 2 {
            return Err(Error::InvalidConfig(
                "need at least two training examples".into(),
            ));
        }
        let cfg = self.config.clone();
        let epoch = self.epochs_done;
        let lr = cfg.learning_rate * libm::pow(cfg.lr_decay, epoch as f64);
        let mut order: Vec<usize> = (0..data.len()).collect();
        rng::shuffle(
            &mut rng::stream(cfg.seed, &format!("shuffle-epoch-{epoch}")),
            &mut order,
        );
        let shapes = self.shadow.weight_shapes();
        let spec = FaultSpec::new(cfg.p_train, cfg.seed)?;
        let zero_mask = FlipMask::zeros(&shapes);
        let (mut loss_sum, mut acc_sum, mut seen, mut flipped) = (0.0, 0.0, 0usize, 0u64);
        for chunk in order.chunks(cfg.batch_size) {
            if chunk.len() < 2 {
                continue;
            }
            let k = self.iterations_done;
            let mask = if cfg.p_train > 0.0 {
                sample_mask(&spec, &shapes, &format!("train-iter-{k}"))?
            } else {
                zero_mask.clone()
            };
            flipped += mask.count_ones();
            let batch = data.batch(chunk);
            let mut drop_rng = rng::stream(cfg.seed, &format!("dropout-iter-{k}"));
            let cache = forward_train(
                &self.shadow,
                &batch,
                &mask,
                Some(Dropout {
                    rate: cfg.dropout,
                    rng: &mut drop_rng,
                }),
            )?;
            let grads = backward_train(&self.shadow, &cache, &mask)?;
            update_running_stats(&mut self.shadow, &cache, cfg.bn_momentum);
            optimizer_step(&mut self.shadow, &grads, lr, &cfg)?;
            loss_sum += cache.loss * chunk.len() as f64;
            acc_sum += cache.accuracy * chunk.len() as f64;
            seen += chunk.len();
            self.iterations_done += 1;
        }
        self.epochs_done += 1;
        Ok(EpochReport {
            epoch,
            mean_loss: loss_sum / seen as f64,
            train_accuracy: acc_sum / seen as f64,
            learning_rate: lr,
            flipped_bits: flipped,
        })
    }

    pub fn export(&self) -> Result<BnnModel> {
        Ok(self.shadow.export()?.0)
    }
}

/// Trains for `config.epochs` epochs and exports the error-free binary model.
/// `on_epoch` sees every epoch's report and the trainer state.
pub fn train_with(
    data: &BinarizedSet,
    config: &TrainConfig,
    mut on_epoch: impl FnMut(&EpochReport, &Trainer),
) -> Result<BnnModel> {
    let mut trainer = Trainer::new(config.clone(), data.dim())?;
    while !trainer.finished() {
        let report = trainer.run_epoch(data)?;
        on_epoch(&report, &trainer);
    }
    trainer.export()
}

pub fn train(data: &BinarizedSet, config: &TrainConfig) -> Result<BnnModel> {
    train_with(data, config, |_, _| {})
}

// ---------------------------------------------------------------------------
// checkpoints

pub const CHECKPOINT_MAGIC: [u8; 8] = *b"BNNSHDW\0";
pub const CHECKPOINT_VERSION: u32 = 1;

fn put_f64s(out: &mut Vec<u8>, xs: &[f64]) {
    out.extend_from_slice(&(xs.len() as u64).to_le_bytes());
    for x in xs {
        out.extend_from_slice(&x.to_le_bytes());
    }
}

fn get_f64s(r: &mut Reader<'_>, expected: usize, what: &str) -> Result<Vec<f64>> {
    let at = r.offset();
    let n = r.u64(what)? as usize;
    if n != expected {
        return r.fail(at, format!("{what}: expected {expected} values, found {n}"));
    }
    (0..n).map(|_| r.f64(what)).collect()
}

/// Serializes the trainer: config text, progress counters and every shadow
/// tensor with its optimizer moments. Little-endian throughout.
pub fn encode_checkpoint(t: &Trainer) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend_from_slice(&CHECKPOINT_MAGIC);
    out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
    let cfg = t.config.canonical();
    out.extend_from_slice(&(cfg.len() as u32).to_le_bytes());
    out.extend_from_slice(cfg.as_bytes());
    out.extend_from_slice(&(t.epochs_done as u64).to_le_bytes());
    out.extend_from_slice(&t.iterations_done.to_le_bytes());
    let s = &t.shadow;
    out.extend_from_slice(&s.step.to_le_bytes());
    out.extend_from_slice(&(s.n_inputs() as u64).to_le_bytes());
    for l in &s.layers {
        put_f64s(&mut out, &l.weights);
        put_f64s(&mut out, &l.weight_moments.m);
        put_f64s(&mut out, &l.weight_moments.v);
    }
    for n in &s.norms {
        for xs in [
            &n.gamma,
            &n.beta,
            &n.running_mean,
            &n.running_var,
            &n.gamma_moments.m,
            &n.gamma_moments.v,
            &n.beta_moments.m,
            &n.beta_moments.v,
        ] {
            put_f64s(&mut out, xs);
        }
    }
    let h = &s.head;
    put_f64s(&mut out, &[h.alpha]);
    for xs in [
        &h.bias,
        &h.alpha_moments.m,
        &h.alpha_moments.v,
        &h.bias_moments.m,
        &h.bias_moments.v,
    ] {
        put_f64s(&mut out, xs);
    }
    out
}

/// Restores a trainer written by [`encode_checkpoint`]; `config` must be the
/// one it was trained with.
pub fn decode_checkpoint(bytes: &[u8], config: &TrainConfig) -> Result<Trainer> {
    let mut r = Reader::new(bytes);
    if r.take(8, "magic")? != CHECKPOINT_MAGIC {
        return r.fail(0, "bad checkpoint magic");
    }
    let at = r.offset();
    if r.u32("version")? != CHECKPOINT_VERSION {
        return r.fail(at, "unsupported checkpoint version");
    }
    let at = r.offset();
    let len = r.u32("config length")? as usize;
    let text = r.take(len, "config")?;
    if text != config.canonical().as_bytes() {
        return r.fail(at, "checkpoint was written with a different configuration");
    }
    let epochs_done = r.u64("epochs")? as usize;
    let iterations_done = r.u64("iterations")?;
    let step = r.u64("step")?;
    let n_inputs = r.u64("input dimension")? as usize;
    let mut t = Trainer::new(config.clone(), n_inputs).or_else(|e| r.fail(at, format!("{e}")))?;
    t.epochs_done = epochs_done;
    t.iterations_done = iterations_done;
    let s = &mut t.shadow;
    s.step = step;
    for l in &mut s.layers {
        let n = l.rows * l.cols;
        l.weights = get_f64s(&mut r, n, "weights")?;
        l.weight_moments.m = get_f64s(&mut r, n, "weight moments")?;
        l.weight_moments.v = get_f64s(&mut r, n, "weight moments")?;
    }
    for norm in &mut s.norms {
        let n = norm.gamma.len();
        norm.gamma = get_f64s(&mut r, n, "gamma")?;
        norm.beta = get_f64s(&mut r, n, "beta")?;
        norm.running_mean = get_f64s(&mut r, n, "running mean")?;
        norm.running_var = get_f64s(&mut r, n, "running var")?;
        norm.gamma_moments.m = get_f64s(&mut r, n, "gamma moments")?;
        norm.gamma_moments.v = get_f64s(&mut r, n, "gamma moments")?;
        norm.beta_moments.m = get_f64s(&mut r, n, "beta moments")?;
        norm.beta_moments.v = get_f64s(&mut r, n, "beta moments")?;
    }
    let h = &mut s.head;
    h.alpha = get_f64s(&mut r, 1, "alpha")?[0];
    let n = h.bias.len();
    h.bias = get_f64s(&mut r, n, "bias")?;
    h.alpha_moments.m = get_f64s(&mut r, 1, "alpha moments")?;
    h.alpha_moments.v = get_f64s(&mut r, 1, "alpha moments")?;
    h.bias_moments.m = get_f64s(&mut r, n, "bias moments")?;
    h.bias_moments.v = get_f64s(&mut r, n, "bias moments")?;
    r.finish()?;
    Ok(t)
}

/// Draws the per-iteration training mask the same way [`Trainer::run_epoch`]
/// does. Exposed for tests and diagnostics.
pub fn training_mask(
    config: &TrainConfig,
    shapes: &[(usize, usize)],
    iteration: u64,
) -> Result<FlipMask> {
    let spec = FaultSpec::new(config.p_train, config.seed)?;
    sample_mask(&spec, shapes, &format!("train-iter-{iteration}"))
}
