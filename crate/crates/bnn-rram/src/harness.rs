//! Corrupted-model evaluation, dead-neuron diagnostics, cached training and
//! bit-error-rate sweeps.

use std::cmp::Ordering;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use bnn_rram_core::bitlinalg::BitVector;
use bnn_rram_core::bnn::{argmax, layer_forward, layer_scores, BnnModel, OutputMode};
use bnn_rram_core::fault::{corrupt_model, FaultSpec};
use bnn_rram_core::format::MODEL_VERSION;
use bnn_rram_core::rng::derive_seed;
use bnn_rram_core::training::{BinarizedSet, EpochReport, TrainConfig, Trainer};
use bnn_rram_core::Error;
use sha2::{Digest, Sha256};

use crate::config::{DataConfig, MaskPolicy, SweepConfig};
use crate::dataio::{load_mnist, subset, Dataset, Split};
use crate::error::io_err;
use crate::model_io::{load_checkpoint, load_model, save_checkpoint, save_model, write_atomic};
use crate::{HarnessError, Result};

/// Outcome of one corrupted evaluation.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Evaluation {
    pub accuracy: f64,
    /// Fraction of first hidden layer neurons with a constant output over the
    /// test set; `None` for models without a hidden layer.
    pub dead_fraction: Option<f64>,
}

/// Evaluates `model` on pre-binarized inputs under bit errors of rate
/// `p_test`. Inputs must have been binarized at `model.input_threshold()`.
/// Masks come from stream `test` (one per evaluation) or `test/batch-<b>`.
pub fn evaluate_bits(
    model: &BnnModel,
    data: &BinarizedSet,
    p_test: f64,
    seed: u64,
    policy: MaskPolicy,
) -> Result<Evaluation> {
    if data.is_empty() {
        return Err(HarnessError::Consistency("empty test set".into()));
    }
    if data.dim() != model.input_len() {
        return Err(Error::DimensionMismatch {
            expected: model.input_len(),
            actual: data.dim(),
        }
        .into());
    }
    let spec = FaultSpec::new(p_test, seed)?;
    let chunk = match policy {
        MaskPolicy::PerModel => data.len(),
        MaskPolicy::PerBatch(n) => n,
    };
    let has_hidden = model.layers().len() > 1;
    let width = model.layers()[0].out_features();
    let words = width.div_ceil(64);
    let (mut any, mut all) = (vec![0u64; words], vec![!0u64; words]);
    let mut correct = 0usize;
    for (b, start) in (0..data.len()).step_by(chunk).enumerate() {
        let stream = match policy {
            MaskPolicy::PerModel => "test".to_string(),
            MaskPolicy::PerBatch(_) => format!("test/batch-{b}"),
        };
        let corrupted = if p_test > 0.0 {
            corrupt_model(model, &spec, &stream)?
        } else {
            model.clone()
        };
        for i in start..(start + chunk).min(data.len()) {
            let (pred, first) = forward_with_first(&corrupted, &data.inputs[i])?;
            if has_hidden {
                for ((a, l), &w) in any.iter_mut().zip(all.iter_mut()).zip(first.words()) {
                    *a |= w;
                    *l &= w;
                }
            }
            correct += usize::from(pred == usize::from(data.labels[i]));
        }
    }
    let dead_fraction = has_hidden.then(|| {
        let dead = (0..width)
            .filter(|&j| {
                let (w, bit) = (j / 64, 1u64 << (j % 64));
                any[w] & bit == 0 || all[w] & bit != 0
            })
            .count();
        dead as f64 / width as f64
    });
    Ok(Evaluation {
        accuracy: correct as f64 / data.len() as f64,
        dead_fraction,
    })
}

fn forward_with_first(model: &BnnModel, x: &BitVector) -> Result<(usize, BitVector)> {
    let (last, hidden) = model.layers().split_last().expect("model has layers");
    let mut first = None;
    let mut act = x.clone();
    for layer in hidden {
        act = layer_forward(layer, &act)?;
        if first.is_none() {
            first = Some(act.clone());
        }
    }
    let scores = match model.output_mode() {
        OutputMode::IntegerLogits => layer_scores(last, &act)?,
        OutputMode::BinaryHidden => layer_forward(last, &act)?
            .iter()
            .map(|b| f64::from(u8::from(b)))
            .collect(),
    };
    Ok((
        argmax(&scores),
        first.unwrap_or_else(|| BitVector::zeros(0)),
    ))
}

/// Test accuracy of `model` with one bit-error mask of rate `p_test`.
pub fn evaluate(model: &BnnModel, data: &Dataset, p_test: f64, seed: u64) -> Result<f64> {
    let bits = data.binarized(model.input_threshold())?;
    Ok(evaluate_bits(model, &bits, p_test, seed, MaskPolicy::PerModel)?.accuracy)
}

/// Fraction of first hidden layer neurons whose output never changes over
/// `data` once `model` carries bit errors of rate `p_test`.
pub fn dead_neuron_fraction(
    model: &BnnModel,
    data: &Dataset,
    p_test: f64,
    seed: u64,
) -> Result<f64> {
    if model.layers().len() < 2 {
        return Err(Error::InvalidModel("model has no hidden layer".into()).into());
    }
    let bits = data.binarized(model.input_threshold())?;
    Ok(
        evaluate_bits(model, &bits, p_test, seed, MaskPolicy::PerModel)?
            .dead_fraction
            .expect("hidden layer present"),
    )
}

// ---------------------------------------------------------------------------
// training with a model cache

/// Content hash of a training run: configuration, training data and the
/// model format version.
pub fn cache_key(config: &TrainConfig, data: &BinarizedSet) -> String {
    let mut h = Sha256::new();
    h.update(b"bnn-rram/model-cache/v1\0");
    h.update(MODEL_VERSION.to_le_bytes());
    h.update(config.canonical().as_bytes());
    h.update((data.len() as u64).to_le_bytes());
    h.update((data.dim() as u64).to_le_bytes());
    for x in &data.inputs {
        for w in x.words() {
            h.update(w.to_le_bytes());
        }
    }
    h.update(&data.labels);
    h.finalize()
        .iter()
        .fold(String::with_capacity(64), |mut s, b| {
            let _ = write!(s, "{b:02x}");
            s
        })
}

/// Trains, or loads the finished model from `cache_dir`. Unfinished runs
/// leave a per-epoch checkpoint there and resume from it.
pub fn train_cached(
    data: &BinarizedSet,
    config: &TrainConfig,
    cache_dir: Option<&Path>,
    mut on_epoch: impl FnMut(&EpochReport),
) -> Result<BnnModel> {
    config.validate()?;
    let Some(dir) = cache_dir else {
        let mut t = Trainer::new(config.clone(), data.dim())?;
        while !t.finished() {
            on_epoch(&t.run_epoch(data)?);
        }
        return Ok(t.export()?);
    };
    let key = cache_key(config, data);
    let model_path = dir.join(format!("{key}.bnn"));
    if model_path.exists() {
        return load_model(&model_path);
    }
    let ckpt_path = dir.join(format!("{key}.ckpt"));
    let mut t = if ckpt_path.exists() {
        load_checkpoint(&ckpt_path, config)?
    } else {
        Trainer::new(config.clone(), data.dim())?
    };
    while !t.finished() {
        on_epoch(&t.run_epoch(data)?);
        save_checkpoint(&t, &ckpt_path)?;
    }
    let model = t.export()?;
    save_model(&model, &model_path)?;
    fs::remove_file(&ckpt_path).map_err(io_err(&ckpt_path))?;
    Ok(model)
}

// ---------------------------------------------------------------------------
// data

/// Test set, plus the training set when `with_train`, after subsetting.
pub fn load_data(cfg: &DataConfig, with_train: bool) -> Result<(Option<Dataset>, Dataset)> {
    let pick = |d: Dataset, n: Option<usize>, label: &str| match n {
        Some(n) => subset(&d, n, derive_seed(cfg.seed, label)),
        None => Ok(d),
    };
    let train = if with_train {
        Some(pick(
            load_mnist(&cfg.data_dir, Split::Train)?,
            cfg.train_subset,
            "train-subset",
        )?)
    } else {
        None
    };
    let test = pick(
        load_mnist(&cfg.data_dir, Split::Test)?,
        cfg.test_subset,
        "test-subset",
    )?;
    Ok((train, test))
}

// ---------------------------------------------------------------------------
// sweeps

pub const CSV_HEADER: &str = "p_train,p_test,rep,accuracy,dead_frac,seed";

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SweepRow {
    pub p_train: f64,
    pub p_test: f64,
    pub rep: usize,
    pub accuracy: f64,
    pub dead_frac: Option<f64>,
    pub seed: u64,
}

/// A training point that produced no model.
#[derive(Clone, Debug, PartialEq)]
pub struct PointFailure {
    pub p_train: f64,
    pub reason: String,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct SweepResult {
    pub rows: Vec<SweepRow>,
    pub failures: Vec<PointFailure>,
}

impl SweepResult {
    pub fn sort(&mut self) {
        self.rows.sort_by(|a, b| {
            a.p_train
                .total_cmp(&b.p_train)
                .then(a.p_test.total_cmp(&b.p_test))
                .then(a.rep.cmp(&b.rep))
        });
    }

    /// Mean accuracy over repetitions at one grid point.
    pub fn mean_accuracy(&self, p_train: f64, p_test: f64) -> Option<f64> {
        mean(
            self.rows
                .iter()
                .filter(|r| r.p_train == p_train && r.p_test == p_test)
                .map(|r| r.accuracy),
        )
    }

    /// Distinct training rates in ascending order.
    pub fn p_trains(&self) -> Vec<f64> {
        distinct(self.rows.iter().map(|r| r.p_train))
    }

    /// `(p_test, mean accuracy)` for one training rate, ascending in `p_test`.
    pub fn curve(&self, p_train: f64) -> Vec<(f64, f64)> {
        let rows: Vec<_> = self.rows.iter().filter(|r| r.p_train == p_train).collect();
        distinct(rows.iter().map(|r| r.p_test))
            .into_iter()
            .map(|p| (p, self.mean_accuracy(p_train, p).expect("point present")))
            .collect()
    }

    pub fn to_csv(&self) -> String {
        let mut sorted = self.clone();
        sorted.sort();
        let mut s = format!("{CSV_HEADER}\n");
        for r in &sorted.rows {
            let dead = r.dead_frac.map(|d| d.to_string()).unwrap_or_default();
            let _ = writeln!(
                s,
                "{},{},{},{},{},{}",
                r.p_train, r.p_test, r.rep, r.accuracy, dead, r.seed
            );
        }
        s
    }

    pub fn from_csv(text: &str) -> Result<Self> {
        let mut lines = text.lines();
        if lines.next() != Some(CSV_HEADER) {
            return Err(HarnessError::Config(format!(
                "CSV header must be `{CSV_HEADER}`"
            )));
        }
        let mut rows = Vec::new();
        for (i, line) in lines.enumerate().filter(|(_, l)| !l.is_empty()) {
            let bad = |what: &str| HarnessError::Config(format!("CSV line {}: bad {what}", i + 2));
            let f: Vec<&str> = line.split(',').collect();
            if f.len() != 6 {
                return Err(bad("field count"));
            }
            rows.push(SweepRow {
                p_train: f[0].parse().map_err(|_| bad("p_train"))?,
                p_test: f[1].parse().map_err(|_| bad("p_test"))?,
                rep: f[2].parse().map_err(|_| bad("rep"))?,
                accuracy: f[3].parse().map_err(|_| bad("accuracy"))?,
                dead_frac: match f[4] {
                    "" => None,
                    d => Some(d.parse().map_err(|_| bad("dead_frac"))?),
                },
                seed: f[5].parse().map_err(|_| bad("seed"))?,
            });
        }
        Ok(Self {
            rows,
            failures: Vec::new(),
        })
    }

    pub fn write_csv(&self, path: impl AsRef<Path>) -> Result<()> {
        write_atomic(path.as_ref(), self.to_csv().as_bytes())
    }

    pub fn read_csv(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        Self::from_csv(&fs::read_to_string(path).map_err(io_err(path))?)
    }
}

fn mean(values: impl Iterator<Item = f64>) -> Option<f64> {
    let (sum, n) = values.fold((0.0, 0usize), |(s, n), v| (s + v, n + 1));
    (n > 0).then(|| sum / n as f64)
}

fn distinct(values: impl Iterator<Item = f64>) -> Vec<f64> {
    let mut v: Vec<f64> = values.collect();
    v.sort_by(f64::total_cmp);
    v.dedup_by(|a, b| a.total_cmp(b) == Ordering::Equal);
    v
}

/// Evaluation seed of one `(p_test, rep)` cell. Independent of `p_train`, so
/// models trained at different rates see the same error masks.
pub fn eval_seed(master: u64, p_test: f64, rep: usize) -> u64 {
    derive_seed(master, &format!("eval/p_test={p_test:e}/rep={rep}"))
}

/// Runs a sweep on data already in memory. `train` may be `None` only when
/// the configuration names a fixed model. Training failures are recorded and
/// the sweep moves on.
pub fn run_sweep_on(
    cfg: &SweepConfig,
    train: Option<&Dataset>,
    test: &Dataset,
    mut log: impl FnMut(&str),
) -> Result<SweepResult> {
    cfg.validate()?;
    let mut result = SweepResult::default();
    let threshold = cfg.train.input_threshold;
    let train_bits = match (&cfg.model, train) {
        (Some(_), _) => None,
        (None, Some(t)) => Some(t.binarized(threshold)?),
        (None, None) => {
            return Err(HarnessError::Config(
                "sweep needs training data or a `model`".into(),
            ))
        }
    };
    let mut test_bits = None;
    for &p_train in &cfg.p_train {
        let model = match (&cfg.model, &train_bits) {
            (Some(path), _) => load_model(path)?,
            (None, Some(bits)) => {
                let tc = TrainConfig {
                    p_train,
                    ..cfg.train.clone()
                };
                log(&format!("training p_train={p_train}"));
                let trained = train_cached(bits, &tc, cfg.cache_dir.as_deref(), |r| {
                    log(&format!(
                        "  epoch {} loss {:.4} train acc {:.4}",
                        r.epoch + 1,
                        r.mean_loss,
                        r.train_accuracy
                    ))
                });
                match trained {
                    Ok(m) => m,
                    Err(HarnessError::Core(e @ Error::NumericalDivergence(_))) => {
                        log(&format!("p_train={p_train} failed: {e}"));
                        result.failures.push(PointFailure {
                            p_train,
                            reason: e.to_string(),
                        });
                        continue;
                    }
                    Err(e) => return Err(e),
                }
            }
            (None, None) => unreachable!(),
        };
        let bits = match &test_bits {
            Some((t, b)) if *t == model.input_threshold() => b,
            _ => {
                &test_bits
                    .insert((
                        model.input_threshold(),
                        test.binarized(model.input_threshold())?,
                    ))
                    .1
            }
        };
        for &p_test in &cfg.p_test {
            for rep in 0..cfg.reps {
                let seed = eval_seed(cfg.seed(), p_test, rep);
                let e = evaluate_bits(&model, bits, p_test, seed, cfg.mask_policy)?;
                result.rows.push(SweepRow {
                    p_train,
                    p_test,
                    rep,
                    accuracy: e.accuracy,
                    dead_frac: e.dead_fraction,
                    seed,
                });
            }
        }
    }
    result.sort();
    Ok(result)
}

/// Loads the data, runs the sweep and writes the CSV to `cfg.output`.
pub fn run_sweep(cfg: &SweepConfig, log: impl FnMut(&str)) -> Result<SweepResult> {
    let (train, test) = load_data(&cfg.data, cfg.model.is_none())?;
    let result = run_sweep_on(cfg, train.as_ref(), &test, log)?;
    result.write_csv(&cfg.output)?;
    Ok(result)
}

/// Default cache location under a data directory.
pub fn default_cache_dir(data_dir: &Path) -> PathBuf {
    data_dir.join("model-cache")
}
