//! Flat `key = value` configuration files.
//!
//! One assignment per line; `#` starts a comment; blank lines are ignored.
//! Lists are comma separated. Keys and defaults:
//!
//! | key | default | meaning |
//! |---|---|---|
//! | `hidden` | `256,256` | hidden layer widths |
//! | `n_classes` | `10` | |
//! | `epochs` | `100` | |
//! | `batch_size` | `128` | |
//! | `learning_rate` | `0.001` | Adam step size of the first epoch |
//! | `lr_decay` | `0.97` | per-epoch learning-rate factor |
//! | `beta1`, `beta2`, `adam_epsilon` | `0.9`, `0.999`, `1e-8` | Adam |
//! | `dropout` | `0.2` | hidden activation dropout |
//! | `input_threshold` | `0.5` | pixel binarization threshold |
//! | `bn_momentum`, `bn_epsilon` | `0.1`, `1e-4` | batch norm |
//! | `glorot_lr_scale` | `true` | scale each layer's weight step by its Glorot factor |
//! | `seed` | `1` | master seed |
//! | `p_train` | `0` | training bit error rate(s) |
//! | `p_test` | `0` | evaluation bit error rate(s) |
//! | `reps` | `3` | evaluations per `(p_train, p_test)` point |
//! | `mask_policy` | `model` | `model`: one error mask per evaluation; `batch:<n>`: fresh mask every `n` images |
//! | `data_dir` | `data/mnist` | directory holding the IDX files |
//! | `train_subset`, `test_subset` | all | sample counts drawn with [`crate::dataio::subset`] |
//! | `cache_dir` | none | trained-model cache |
//! | `model` | none | evaluate this model file instead of training |
//! | `output` | `sweep.csv` | sweep CSV path |
//!
//! Values given on the command line replace values from the file.

use std::collections::BTreeMap;
use std::fmt::Display;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use bnn_rram_core::training::TrainConfig;

use crate::error::io_err;
use crate::{HarnessError, Result};

const KEYS: &[&str] = &[
    "hidden",
    "n_classes",
    "epochs",
    "batch_size",
    "learning_rate",
    "lr_decay",
    "beta1",
    "beta2",
    "adam_epsilon",
    "dropout",
    "input_threshold",
    "bn_momentum",
    "bn_epsilon",
    "glorot_lr_scale",
    "seed",
    "p_train",
    "p_test",
    "reps",
    "mask_policy",
    "data_dir",
    "train_subset",
    "test_subset",
    "cache_dir",
    "model",
    "output",
];

/// Raw assignments, validated against the known keys.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct KeyValues(BTreeMap<String, String>);

impl KeyValues {
    pub fn parse(text: &str) -> Result<Self> {
        let mut kv = Self::default();
        for (i, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line.split_once('=').ok_or_else(|| {
                HarnessError::Config(format!("line {}: expected key = value", i + 1))
            })?;
            let k = k.trim();
            if kv.0.contains_key(k) {
                return Err(HarnessError::Config(format!(
                    "line {}: duplicate key `{k}`",
                    i + 1
                )));
            }
            kv.set(k, v.trim())
                .map_err(|e| HarnessError::Config(format!("line {}: {e}", i + 1)))?;
        }
        Ok(kv)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        Self::parse(&std::fs::read_to_string(path).map_err(io_err(path))?)
    }

    /// Inserts or replaces one value.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        if !KEYS.contains(&key) {
            return Err(HarnessError::Config(format!("unknown key `{key}`")));
        }
        self.0.insert(key.to_string(), value.to_string());
        Ok(())
    }

    /// Applies a `key=value` override.
    pub fn set_assignment(&mut self, assignment: &str) -> Result<()> {
        let (k, v) = assignment
            .split_once('=')
            .ok_or_else(|| HarnessError::Config(format!("`{assignment}` is not key=value")))?;
        self.set(k.trim(), v.trim())
    }

    pub fn get(&self, key: &str) -> Option<&str> {
        self.0.get(key).map(String::as_str)
    }

    fn value<T: FromStr>(&self, key: &str) -> Result<Option<T>>
    where
        T::Err: Display,
    {
        self.get(key).map(|v| parse_one(key, v)).transpose()
    }

    fn list<T: FromStr>(&self, key: &str) -> Result<Option<Vec<T>>>
    where
        T::Err: Display,
    {
        self.get(key)
            .map(|v| v.split(',').map(|x| parse_one(key, x.trim())).collect())
            .transpose()
    }

    /// Training hyper-parameters. `p_train` must hold a single rate.
    pub fn train_config(&self) -> Result<TrainConfig> {
        let mut c = self.train_config_base()?;
        let p: Vec<f64> = self.list("p_train")?.unwrap_or_else(|| vec![0.0]);
        if p.len() != 1 {
            return Err(HarnessError::Config(
                "`p_train` must be a single rate here".into(),
            ));
        }
        c.p_train = p[0];
        c.validate()?;
        Ok(c)
    }

    fn train_config_base(&self) -> Result<TrainConfig> {
        let mut c = TrainConfig::default();
        macro_rules! take {
            ($($field:ident),*) => {$(
                if let Some(v) = self.value(stringify!($field))? {
                    c.$field = v;
                }
            )*};
        }
        take!(
            n_classes,
            epochs,
            batch_size,
            learning_rate,
            lr_decay,
            beta1,
            beta2,
            adam_epsilon,
            dropout,
            input_threshold,
            bn_momentum,
            bn_epsilon,
            glorot_lr_scale,
            seed
        );
        if let Some(h) = self.list("hidden")? {
            c.hidden = h;
        }
        Ok(c)
    }

    pub fn data_config(&self) -> Result<DataConfig> {
        Ok(DataConfig {
            data_dir: self
                .value("data_dir")?
                .unwrap_or_else(|| PathBuf::from("data/mnist")),
            train_subset: self.value("train_subset")?,
            test_subset: self.value("test_subset")?,
            seed: self.value("seed")?.unwrap_or(TrainConfig::default().seed),
        })
    }

    pub fn sweep_config(&self) -> Result<SweepConfig> {
        let cfg = SweepConfig {
            train: self.train_config_base()?,
            data: self.data_config()?,
            cache_dir: self.value("cache_dir")?,
            model: self.value("model")?,
            p_train: self.list("p_train")?.unwrap_or_else(|| vec![0.0]),
            p_test: self.list("p_test")?.unwrap_or_else(|| vec![0.0]),
            reps: self.value("reps")?.unwrap_or(3),
            mask_policy: self.value("mask_policy")?.unwrap_or_default(),
            output: self
                .value("output")?
                .unwrap_or_else(|| PathBuf::from("sweep.csv")),
        };
        cfg.validate()?;
        Ok(cfg)
    }
}

fn parse_one<T: FromStr>(key: &str, v: &str) -> Result<T>
where
    T::Err: Display,
{
    v.parse()
        .map_err(|e| HarnessError::Config(format!("`{key}`: cannot parse `{v}`: {e}")))
}

/// Where the data comes from and how much of it is used.
#[derive(Clone, Debug, PartialEq)]
pub struct DataConfig {
    pub data_dir: PathBuf,
    pub train_subset: Option<usize>,
    pub test_subset: Option<usize>,
    /// Seed for subset selection.
    pub seed: u64,
}

/// How error masks are drawn during an evaluation.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum MaskPolicy {
    /// One mask for the whole test set.
    #[default]
    PerModel,
    /// A fresh mask every `n` test images.
    PerBatch(usize),
}

impl FromStr for MaskPolicy {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s {
            "model" => Ok(MaskPolicy::PerModel),
            _ => match s.strip_prefix("batch:").map(str::parse::<usize>) {
                Some(Ok(n)) if n > 0 => Ok(MaskPolicy::PerBatch(n)),
                _ => Err("expected `model` or `batch:<n>` with n > 0".into()),
            },
        }
    }
}

impl Display for MaskPolicy {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            MaskPolicy::PerModel => write!(f, "model"),
            MaskPolicy::PerBatch(n) => write!(f, "batch:{n}"),
        }
    }
}

/// A grid of training and evaluation bit error rates.
#[derive(Clone, Debug, PartialEq)]
pub struct SweepConfig {
    /// Template for every training run; `p_train` and `seed` are set per point.
    pub train: TrainConfig,
    pub data: DataConfig,
    pub cache_dir: Option<PathBuf>,
    /// Evaluate this model instead of training; `p_train` then only labels rows.
    pub model: Option<PathBuf>,
    pub p_train: Vec<f64>,
    pub p_test: Vec<f64>,
    pub reps: usize,
    pub mask_policy: MaskPolicy,
    pub output: PathBuf,
}

impl SweepConfig {
    pub fn validate(&self) -> Result<()> {
        if self.reps < 1 {
            return Err(HarnessError::Config("`reps` must be >= 1".into()));
        }
        if self.p_train.is_empty() || self.p_test.is_empty() {
            return Err(HarnessError::Config("rate lists must not be empty".into()));
        }
        for &p in self.p_train.iter().chain(&self.p_test) {
            if !(0.0..=1.0).contains(&p) {
                return Err(bnn_rram_core::Error::InvalidRate(p).into());
            }
        }
        if self.model.is_some() && self.p_train.len() != 1 {
            return Err(HarnessError::Config(
                "a fixed `model` takes exactly one `p_train` label".into(),
            ));
        }
        let mut t = self.train.clone();
        t.p_train = self.p_train[0];
        t.validate()?;
        Ok(())
    }

    /// Master seed.
    pub fn seed(&self) -> u64 {
        self.train.seed
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parses_comments_lists_and_defaults() {
        let kv = KeyValues::parse("# grid\nepochs = 5 # short\nhidden=64, 32\n\np_train = 0.15\n")
            .unwrap();
        let c = kv.train_config().unwrap();
        assert_eq!(c.epochs, 5);
        assert_eq!(c.hidden, vec![64, 32]);
        assert_eq!(c.p_train, 0.15);
        assert_eq!(c.batch_size, 128);
    }

    #[test]
    fn rejects_unknown_duplicate_and_malformed() {
        assert!(KeyValues::parse("epoch = 5").is_err());
        assert!(KeyValues::parse("epochs = 5\nepochs = 6").is_err());
        assert!(KeyValues::parse("epochs 5").is_err());
        let bad = KeyValues::parse("epochs = five")
            .unwrap()
            .train_config()
            .unwrap_err();
        assert!(bad.to_string().contains("epochs"), "{bad}");
    }

    #[test]
    fn overrides_replace_file_values() {
        let mut kv = KeyValues::parse("epochs = 5").unwrap();
        kv.set_assignment("epochs=7").unwrap();
        assert_eq!(kv.train_config().unwrap().epochs, 7);
    }

    #[test]
    fn sweep_lists_and_validation() {
        let kv = KeyValues::parse(
            "p_train = 0, 0.15\np_test = 0,0.05,0.15,0.3\nreps = 3\nmask_policy = batch:100",
        )
        .unwrap();
        let s = kv.sweep_config().unwrap();
        assert_eq!(s.p_train, vec![0.0, 0.15]);
        assert_eq!(s.p_test.len(), 4);
        assert_eq!(s.mask_policy, MaskPolicy::PerBatch(100));
        assert!(KeyValues::parse("reps = 0")
            .unwrap()
            .sweep_config()
            .is_err());
        assert!(KeyValues::parse("p_test = 1.5")
            .unwrap()
            .sweep_config()
            .is_err());
        assert!(KeyValues::parse("p_train = 0, 0.1")
            .unwrap()
            .train_config()
            .is_err());
        assert!(KeyValues::parse("mask_policy = batch:0")
            .unwrap()
            .sweep_config()
            .is_err());
    }
}
