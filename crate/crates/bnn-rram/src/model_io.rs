//! Model and training-checkpoint files.

use std::fs;
use std::path::Path;

use bnn_rram_core::bnn::BnnModel;
use bnn_rram_core::format::{decode_model, encode_model};
use bnn_rram_core::training::{decode_checkpoint, encode_checkpoint, TrainConfig, Trainer};

use crate::error::io_err;
use crate::Result;

/// Writes through a temporary sibling and renames, so readers never observe
/// a half-written file.
pub(crate) fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(io_err(dir))?;
    }
    let tmp = path.with_extension(format!("tmp{}", std::process::id()));
    fs::write(&tmp, bytes).map_err(io_err(&tmp))?;
    fs::rename(&tmp, path).map_err(io_err(path))
}

pub fn save_model(model: &BnnModel, path: impl AsRef<Path>) -> Result<()> {
    write_atomic(path.as_ref(), &encode_model(model))
}

pub fn load_model(path: impl AsRef<Path>) -> Result<BnnModel> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(io_err(path))?;
    Ok(decode_model(&bytes)?)
}

pub fn save_checkpoint(trainer: &Trainer, path: impl AsRef<Path>) -> Result<()> {
    write_atomic(path.as_ref(), &encode_checkpoint(trainer))
}

pub fn load_checkpoint(path: impl AsRef<Path>, config: &TrainConfig) -> Result<Trainer> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(io_err(path))?;
    Ok(decode_checkpoint(&bytes, config)?)
}
