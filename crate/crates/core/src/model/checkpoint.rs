//! Checkpoints: `manifest.json` (config, seed, step, tensor table) next to
//! `params.bin`, which holds one little-endian f32 block per tensor in key
//! order.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{param_specs, ModelConfig};
use crate::error::{Error, Result};
use crate::params::ModelParams;
use crate::tensor::Tensor;

pub const MANIFEST_FILE: &str = "manifest.json";
pub const PARAMS_FILE: &str = "params.bin";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TensorEntry {
    pub name: String,
    pub shape: Vec<usize>,
    /// Byte offset into `params.bin`.
    pub offset: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointManifest {
    pub config: ModelConfig,
    pub seed: u64,
    pub step: u64,
    pub total_bytes: usize,
    pub tensors: Vec<TensorEntry>,
}

pub fn save_checkpoint(params: &ModelParams<f32>, config: &ModelConfig, seed: u64, step: u64, dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut blob = Vec::with_capacity(4 * params.num_scalars());
    let mut tensors = Vec::with_capacity(params.len());
    for (name, t) in params.iter() {
        tensors.push(TensorEntry { name: name.clone(), shape: t.shape().to_vec(), offset: blob.len() });
        for v in t.values() {
            blob.extend_from_slice(&v.to_le_bytes());
        }
    }
    let manifest = CheckpointManifest { config: config.clone(), seed, step, total_bytes: blob.len(), tensors };
    let mpath = dir.join(MANIFEST_FILE);
    let json = serde_json::to_string_pretty(&manifest).expect("manifest serialises");
    fs::write(&mpath, json).map_err(|e| Error::io(&mpath, e))?;
    let ppath = dir.join(PARAMS_FILE);
    fs::write(&ppath, blob).map_err(|e| Error::io(&ppath, e))
}

/// Loads a checkpoint. With `expected` set, each tensor's shape is checked
/// against that config (error names the key), then the configs must match.
pub fn load_checkpoint(dir: &Path, expected: Option<&ModelConfig>) -> Result<(ModelParams<f32>, CheckpointManifest)> {
    let mpath = dir.join(MANIFEST_FILE);
    let text = fs::read_to_string(&mpath).map_err(|e| Error::io(&mpath, e))?;
    let manifest: CheckpointManifest =
        serde_json::from_str(&text).map_err(|e| Error::Checkpoint(format!("{}: {e}", mpath.display())))?;
    let ppath = dir.join(PARAMS_FILE);
    let blob = fs::read(&ppath).map_err(|e| Error::io(&ppath, e))?;
    if blob.len() != manifest.total_bytes {
        return Err(Error::Checkpoint(format!(
            "{} has {} bytes, manifest declares {}",
            ppath.display(),
            blob.len(),
            manifest.total_bytes
        )));
    }
    let mut params = ModelParams::new();
    let mut expected_offset = 0;
    for entry in &manifest.tensors {
        let n: usize = entry.shape.iter().product();
        if entry.offset != expected_offset || entry.offset + 4 * n > blob.len() {
            return Err(Error::Checkpoint(format!("tensor `{}` lies outside the data block", entry.name)));
        }
        let values = blob[entry.offset..entry.offset + 4 * n]
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
            .collect();
        params.insert(entry.name.clone(), Tensor::new(entry.shape.clone(), values)?);
        expected_offset += 4 * n;
    }
    if expected_offset != blob.len() {
        return Err(Error::Checkpoint("trailing bytes after the last tensor".into()));
    }
    if let Some(cfg) = expected {
        let specs = param_specs(cfg);
        for (name, shape, _) in &specs {
            match params.get(name) {
                None => return Err(Error::Shape(format!("checkpoint lacks parameter `{name}`"))),
                Some(t) if t.shape() != shape.as_slice() => {
                    return Err(Error::Shape(format!(
                        "parameter `{name}` has shape {:?} in the checkpoint, config wants {shape:?}",
                        t.shape()
                    )))
                }
                _ => {}
            }
        }
        if specs.len() != params.len() {
            return Err(Error::Shape("checkpoint carries parameters the config does not define".into()));
        }
        if &manifest.config != cfg {
            return Err(Error::Checkpoint("manifest config differs from the requested config".into()));
        }
    }
    Ok((params, manifest))
}
