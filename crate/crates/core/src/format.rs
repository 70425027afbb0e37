//! Binary model codec.
//!
//! All integers and floats are little-endian.
//!
//! ```text
//! offset  size  field
//! 0       8     magic "BNNRRAM\0"
//! 8       4     u32 format version (1)
//! 12      4     u32 layer count L
//! 16      4     u32 class count
//! 20      1     u8 output mode (0 = binary hidden, 1 = integer logits)
//! 21      3     reserved, zero
//! 24      8     f64 input binarization threshold
//! 32      ...   L layer records
//!
//! layer record:
//!   4     u32 rows (output neurons)
//!   4     u32 cols (inputs)
//!   8*rows*ceil(cols/64)  u64 weight words, row-major, bit c of a row in word
//!                         c/64 at position c%64, 1 = +1, padding bits zero
//!   8*rows  f64 thresholds
//!   rows    i8 comparison signs (+1 or -1)
//! ```
//!
//! Nothing may follow the last layer record.

use alloc::format;
use alloc::string::String;
use alloc::vec::Vec;

use crate::bitlinalg::{words_for, BitMatrix};
use crate::bnn::{BnnModel, DenseLayer, OutputMode};
use crate::{Error, Result};

pub const MODEL_MAGIC: [u8; 8] = *b"BNNRRAM\0";
pub const MODEL_VERSION: u32 = 1;

/// Serializes a model.
pub fn encode_model(model: &BnnModel) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend_from_slice(&MODEL_MAGIC);
    out.extend_from_slice(&MODEL_VERSION.to_le_bytes());
    out.extend_from_slice(&(model.layers().len() as u32).to_le_bytes());
    out.extend_from_slice(&(model.n_classes() as u32).to_le_bytes());
    out.push(model.output_mode().code());
    out.extend_from_slice(&[0; 3]);
    out.extend_from_slice(&model.input_threshold().to_le_bytes());
    for layer in model.layers() {
        let w = layer.weights();
        out.extend_from_slice(&(w.rows() as u32).to_le_bytes());
        out.extend_from_slice(&(w.cols() as u32).to_le_bytes());
        for word in w.words() {
            out.extend_from_slice(&word.to_le_bytes());
        }
        for t in layer.thresholds() {
            out.extend_from_slice(&t.to_le_bytes());
        }
        out.extend(layer.threshold_sign().iter().map(|&s| s as u8));
    }
    out
}

/// Cursor over a byte slice that reports the offset of every failure.
pub(crate) struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    pub(crate) fn new(bytes: &'a [u8]) -> Self {
        Self { bytes, pos: 0 }
    }

    pub(crate) fn offset(&self) -> usize {
        self.pos
    }

    pub(crate) fn fail<T>(&self, offset: usize, reason: impl Into<String>) -> Result<T> {
        Err(Error::ModelFormat {
            offset,
            reason: reason.into(),
        })
    }

    pub(crate) fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        let remaining = self.bytes.len() - self.pos;
        if remaining < n {
            return self.fail(
                self.pos,
                format!("truncated {what}: need {n} bytes, {remaining} left"),
            );
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    pub(crate) fn u8(&mut self, what: &str) -> Result<u8> {
        Ok(self.take(1, what)?[0])
    }

    pub(crate) fn u32(&mut self, what: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().unwrap()))
    }

    pub(crate) fn u64(&mut self, what: &str) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8, what)?.try_into().unwrap()))
    }

    pub(crate) fn f64(&mut self, what: &str) -> Result<f64> {
        Ok(f64::from_le_bytes(self.take(8, what)?.try_into().unwrap()))
    }

    pub(crate) fn finish(&self) -> Result<()> {
        if self.pos != self.bytes.len() {
            return self.fail(
                self.pos,
                format!("{} trailing bytes", self.bytes.len() - self.pos),
            );
        }
        Ok(())
    }
}

/// Parses a model, validating every field.
pub fn decode_model(bytes: &[u8]) -> Result<BnnModel> {
    let mut r = Reader::new(bytes);
    if r.take(8, "magic")? != MODEL_MAGIC {
        return r.fail(0, "bad magic");
    }
    let at = r.offset();
    let version = r.u32("version")?;
    if version != MODEL_VERSION {
        return r.fail(at, format!("unsupported version {version}"));
    }
    let at = r.offset();
    let n_layers = r.u32("layer count")? as usize;
    if n_layers == 0 {
        return r.fail(at, "model has no layers");
    }
    let classes_at = r.offset();
    let n_classes = r.u32("class count")? as usize;
    let at = r.offset();
    let mode = OutputMode::from_code(r.u8("output mode")?)
        .map_or_else(|| r.fail(at, "unknown output mode"), Ok)?;
    let at = r.offset();
    if r.take(3, "reserved")? != [0, 0, 0] {
        return r.fail(at, "reserved bytes not zero");
    }
    let at = r.offset();
    let input_threshold = r.f64("input threshold")?;
    if !(0.0..=1.0).contains(&input_threshold) {
        return r.fail(
            at,
            format!("input threshold {input_threshold} outside [0, 1]"),
        );
    }

    let mut layers = Vec::with_capacity(n_layers.min(1024));
    let mut prev_rows: Option<usize> = None;
    for k in 0..n_layers {
        let dims_at = r.offset();
        let rows = r.u32("layer rows")? as usize;
        let cols = r.u32("layer cols")? as usize;
        if let Some(prev) = prev_rows {
            if cols != prev {
                return r.fail(
                    dims_at,
                    format!(
                        "layer {k} has {cols} inputs but layer {} has {prev} outputs",
                        k - 1
                    ),
                );
            }
        }
        let n_words = rows
            .checked_mul(words_for(cols))
            .filter(|n| n.checked_mul(8).is_some())
            .map_or_else(|| r.fail(dims_at, "layer dimensions overflow"), Ok)?;
        let words_at = r.offset();
        let raw = r.take(n_words * 8, "weight words")?;
        let words = raw
            .chunks_exact(8)
            .map(|c| u64::from_le_bytes(c.try_into().unwrap()))
            .collect();
        let weights = BitMatrix::from_words(rows, cols, words)
            .or_else(|e| r.fail(words_at, format!("layer {k} weights: {e}")))?;
        let mut thresholds = Vec::with_capacity(rows);
        for _ in 0..rows {
            let at = r.offset();
            let t = r.f64("threshold")?;
            if !t.is_finite() {
                return r.fail(at, format!("non-finite threshold in layer {k}"));
            }
            thresholds.push(t);
        }
        let signs_at = r.offset();
        let signs: Vec<i8> = r
            .take(rows, "threshold signs")?
            .iter()
            .map(|&b| b as i8)
            .collect();
        if let Some(i) = signs.iter().position(|s| !matches!(s, 1 | -1)) {
            return r.fail(signs_at + i, format!("invalid threshold sign in layer {k}"));
        }
        layers.push(
            DenseLayer::new(weights, thresholds, signs)
                .or_else(|e| r.fail(dims_at, format!("{e}")))?,
        );
        prev_rows = Some(rows);
    }
    r.finish()?;
    if prev_rows != Some(n_classes) {
        return r.fail(
            classes_at,
            format!(
                "declared {n_classes} classes but last layer has {} outputs",
                prev_rows.unwrap_or(0)
            ),
        );
    }
    BnnModel::new(layers, input_threshold, n_classes, mode).or_else(|e| r.fail(0, format!("{e}")))
}
