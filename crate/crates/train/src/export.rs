//! Loading checkpoints back into models, and the int8 parameter export.
//!
//! Quantized export layout (little-endian): `"THQ8" | version u32 | count u32`
//! then per tensor `name (u32 len + utf8) | rank u32 | dims u64 | scale f32 |
//! i8 values`.

use std::path::Path;

use byteorder::{LittleEndian, WriteBytesExt};
use thaw_core::data::{load_idx, Dataset};
use thaw_core::nn::Model;
use thaw_core::quant::quantize_tensor;

use crate::checkpoint::{load_checkpoint, Checkpoint};
use crate::config::TrainConfig;
use crate::harness::{evaluate, prepare_data};
use crate::TrainError;

pub const QUANT_MAGIC: &[u8; 4] = b"THQ8";
pub const QUANT_VERSION: u32 = 1;

/// Rebuilds the architecture from the stored config and loads the weights.
pub fn model_from_checkpoint(ckpt: &Checkpoint) -> Result<(TrainConfig, Model<f32>), TrainError> {
    let config = TrainConfig::from_toml(&ckpt.config_text)?;
    let mut model = config.build_model(&ckpt.input_shape, ckpt.classes)?;
    ckpt.restore_into(&mut model)?;
    Ok((config, model))
}

/// Labels file for an images file, by swapping `images` for `labels` in the name.
pub fn labels_path_for(images: &Path) -> Option<std::path::PathBuf> {
    let name = images.file_name()?.to_str()?;
    name.contains("images")
        .then(|| images.with_file_name(name.replace("images", "labels")))
}

/// Accuracy of a checkpoint on an IDX dataset, or on the validation split of
/// its own config when `data` is `None`.
pub fn eval_checkpoint(
    path: &Path,
    data: Option<(&Path, &Path)>,
) -> Result<(f64, usize), TrainError> {
    let ckpt = load_checkpoint(path)?;
    let (config, model) = model_from_checkpoint(&ckpt)?;
    let dataset: Dataset = match data {
        Some((images, labels)) => load_idx(images, labels)?,
        None => prepare_data(&config)?.1,
    };
    if dataset.sample_shape() != model.input_shape() {
        return Err(TrainError::Config(format!(
            "data: samples of shape {:?} do not fit a model expecting {:?}",
            dataset.sample_shape(),
            model.input_shape()
        )));
    }
    Ok((evaluate(&model, &dataset)?, dataset.len()))
}

/// Writes every trainable parameter of the checkpoint as symmetric int8.
/// Returns the number of tensors written.
pub fn export_quantized(checkpoint: &Path, out: &Path) -> Result<usize, TrainError> {
    let ckpt = load_checkpoint(checkpoint)?;
    let (_, model) = model_from_checkpoint(&ckpt)?;
    let mut buf = Vec::new();
    buf.extend_from_slice(QUANT_MAGIC);
    buf.write_u32::<LittleEndian>(QUANT_VERSION)?;
    let params: Vec<_> = model
        .parameters()
        .map(|p| (p.name.as_str(), p.value()))
        .collect();
    buf.write_u32::<LittleEndian>(params.len() as u32)?;
    for (name, value) in &params {
        let q = quantize_tensor(value)?;
        buf.write_u32::<LittleEndian>(name.len() as u32)?;
        buf.extend_from_slice(name.as_bytes());
        buf.write_u32::<LittleEndian>(q.shape().len() as u32)?;
        for &d in q.shape() {
            buf.write_u64::<LittleEndian>(d as u64)?;
        }
        buf.write_f32::<LittleEndian>(q.scale())?;
        buf.extend(q.values().iter().map(|&v| v as u8));
    }
    std::fs::write(out, buf)?;
    Ok(params.len())
}
