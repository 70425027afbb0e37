//! MNIST in the IDX container format.
//!
//! IDX files are big-endian: a 4-byte magic (`0x00000803` for images,
//! `0x00000801` for labels), one `u32` per dimension, then the raw `u8`
//! payload. Pixels are scaled to `[0, 1]` by `/ 255`.

use std::fs;
use std::path::{Path, PathBuf};

use bnn_rram_core::rng;
use bnn_rram_core::training::BinarizedSet;

use crate::error::io_err;
use crate::{HarnessError, Result};

pub const IMAGES_MAGIC: u32 = 0x0000_0803;
pub const LABELS_MAGIC: u32 = 0x0000_0801;

pub const TRAIN_IMAGES: &str = "train-images-idx3-ubyte";
pub const TRAIN_LABELS: &str = "train-labels-idx1-ubyte";
pub const TEST_IMAGES: &str = "t10k-images-idx3-ubyte";
pub const TEST_LABELS: &str = "t10k-labels-idx1-ubyte";

/// A stack of equally sized grayscale images with pixels in `[0, 1]`.
#[derive(Clone, Debug, PartialEq)]
pub struct ImageTensor {
    pub count: usize,
    pub rows: usize,
    pub cols: usize,
    pub pixels: Vec<f32>,
}

impl ImageTensor {
    pub fn image_len(&self) -> usize {
        self.rows * self.cols
    }
}

fn format_err(path: &Path, reason: impl Into<String>) -> HarnessError {
    HarnessError::Format {
        path: path.to_path_buf(),
        reason: reason.into(),
    }
}

fn header(bytes: &[u8], path: &Path, magic: u32, n_dims: usize) -> Result<Vec<usize>> {
    let need = 4 + 4 * n_dims;
    if bytes.len() < need {
        return Err(format_err(
            path,
            format!(
                "truncated header: expected {need} bytes, found {}",
                bytes.len()
            ),
        ));
    }
    let found = u32::from_be_bytes(bytes[..4].try_into().unwrap());
    if found != magic {
        return Err(format_err(
            path,
            format!("bad magic {found:#010x}, expected {magic:#010x}"),
        ));
    }
    Ok((0..n_dims)
        .map(|i| u32::from_be_bytes(bytes[4 + 4 * i..8 + 4 * i].try_into().unwrap()) as usize)
        .collect())
}

fn check_payload(bytes: &[u8], path: &Path, header_len: usize, dims: &[usize]) -> Result<()> {
    let payload = dims
        .iter()
        .try_fold(1usize, |acc, &d| acc.checked_mul(d))
        .ok_or_else(|| format_err(path, "dimensions overflow"))?;
    let expected = header_len + payload;
    if bytes.len() != expected {
        return Err(format_err(
            path,
            format!(
                "{}: expected {expected} bytes, found {}",
                if bytes.len() < expected {
                    "truncated payload"
                } else {
                    "trailing bytes"
                },
                bytes.len()
            ),
        ));
    }
    Ok(())
}

/// Parses an IDX3 image file already in memory. `path` is only used in errors.
pub fn parse_idx_images(bytes: &[u8], path: &Path) -> Result<ImageTensor> {
    let dims = header(bytes, path, IMAGES_MAGIC, 3)?;
    check_payload(bytes, path, 16, &dims)?;
    Ok(ImageTensor {
        count: dims[0],
        rows: dims[1],
        cols: dims[2],
        pixels: bytes[16..].iter().map(|&b| f32::from(b) / 255.0).collect(),
    })
}

/// Parses an IDX1 label file already in memory; every label must be 0..=9.
pub fn parse_idx_labels(bytes: &[u8], path: &Path) -> Result<Vec<u8>> {
    let dims = header(bytes, path, LABELS_MAGIC, 1)?;
    check_payload(bytes, path, 8, &dims)?;
    let labels = bytes[8..].to_vec();
    if let Some((index, &label)) = labels.iter().enumerate().find(|(_, &l)| l > 9) {
        return Err(HarnessError::InvalidLabel {
            path: path.to_path_buf(),
            index,
            label,
        });
    }
    Ok(labels)
}

pub fn load_idx_images(path: impl AsRef<Path>) -> Result<ImageTensor> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(io_err(path))?;
    parse_idx_images(&bytes, path)
}

pub fn load_idx_labels(path: impl AsRef<Path>) -> Result<Vec<u8>> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(io_err(path))?;
    parse_idx_labels(&bytes, path)
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub enum Split {
    Train,
    Test,
    Subset {
        parent: Box<Split>,
        n: usize,
        seed: u64,
    },
}

/// Labelled images.
#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    images: Vec<f32>,
    labels: Vec<u8>,
    image_len: usize,
    split: Split,
}

impl Dataset {
    pub fn new(images: ImageTensor, labels: Vec<u8>, split: Split) -> Result<Self> {
        if images.count != labels.len() {
            return Err(HarnessError::Consistency(format!(
                "{} images but {} labels",
                images.count,
                labels.len()
            )));
        }
        Self::from_parts(images.pixels, labels, images.rows * images.cols, split)
    }

    pub fn from_parts(
        images: Vec<f32>,
        labels: Vec<u8>,
        image_len: usize,
        split: Split,
    ) -> Result<Self> {
        if images.len() != labels.len() * image_len {
            return Err(HarnessError::Consistency(format!(
                "{} pixels do not form {} images of {image_len}",
                images.len(),
                labels.len()
            )));
        }
        if let Some(p) = images.iter().find(|p| !(0.0..=1.0).contains(*p)) {
            return Err(HarnessError::Consistency(format!(
                "pixel value {p} outside [0, 1]"
            )));
        }
        if let Some(l) = labels.iter().find(|&&l| l > 9) {
            return Err(HarnessError::Consistency(format!(
                "label {l} is not a digit"
            )));
        }
        Ok(Self {
            images,
            labels,
            image_len,
            split,
        })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn image_len(&self) -> usize {
        self.image_len
    }

    pub fn image(&self, i: usize) -> &[f32] {
        &self.images[i * self.image_len..(i + 1) * self.image_len]
    }

    pub fn images(&self) -> &[f32] {
        &self.images
    }

    pub fn labels(&self) -> &[u8] {
        &self.labels
    }

    pub fn split(&self) -> &Split {
        &self.split
    }

    pub fn class_counts(&self) -> [usize; 10] {
        let mut counts = [0; 10];
        for &l in &self.labels {
            counts[usize::from(l)] += 1;
        }
        counts
    }

    /// Binarizes every image at `threshold`.
    pub fn binarized(&self, threshold: f64) -> Result<BinarizedSet> {
        Ok(BinarizedSet::from_images(
            &self.images,
            self.image_len,
            &self.labels,
            threshold,
        )?)
    }
}

/// Deterministic random subset: the first `n` entries of a seeded shuffle.
pub fn subset(data: &Dataset, n: usize, seed: u64) -> Result<Dataset> {
    if n > data.len() {
        return Err(HarnessError::InvalidSubset {
            requested: n,
            available: data.len(),
        });
    }
    let mut order: Vec<usize> = (0..data.len()).collect();
    rng::shuffle(&mut rng::stream(seed, "subset"), &mut order);
    order.truncate(n);
    let mut images = Vec::with_capacity(n * data.image_len);
    let mut labels = Vec::with_capacity(n);
    for &i in &order {
        images.extend_from_slice(data.image(i));
        labels.push(data.labels[i]);
    }
    Ok(Dataset {
        images,
        labels,
        image_len: data.image_len,
        split: Split::Subset {
            parent: Box::new(data.split.clone()),
            n,
            seed,
        },
    })
}

/// How to obtain the data when it is missing.
pub fn fetch_instructions(dir: &Path) -> String {
    format!(
        "Place the four uncompressed MNIST IDX files in {}:\n  {TRAIN_IMAGES}\n  {TRAIN_LABELS}\n  {TEST_IMAGES}\n  {TEST_LABELS}\n\
         They are distributed as .gz archives from the MNIST database mirrors; decompress with `gunzip`.",
        dir.display()
    )
}

/// Loads the train or test split from `dir`.
pub fn load_mnist(dir: impl AsRef<Path>, split: Split) -> Result<Dataset> {
    let dir = dir.as_ref();
    let (img, lab) = match split {
        Split::Train => (TRAIN_IMAGES, TRAIN_LABELS),
        Split::Test => (TEST_IMAGES, TEST_LABELS),
        Split::Subset { .. } => {
            return Err(HarnessError::Config(
                "load a base split, then take a subset".into(),
            ))
        }
    };
    let (img_path, lab_path): (PathBuf, PathBuf) = (dir.join(img), dir.join(lab));
    if !img_path.exists() || !lab_path.exists() {
        return Err(HarnessError::MissingData {
            dir: dir.to_path_buf(),
            instructions: fetch_instructions(dir),
        });
    }
    Dataset::new(
        load_idx_images(&img_path)?,
        load_idx_labels(&lab_path)?,
        split,
    )
}
