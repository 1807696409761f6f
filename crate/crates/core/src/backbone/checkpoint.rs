//! Checkpoint layout: `<name>.bin` holds every tensor as little-endian `f64`
//! values concatenated in manifest order; `<name>.json` is the manifest.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{BackboneConfig, ModelState, Params};
use crate::error::{Error, Result};

pub const CHECKPOINT_FORMAT: &str = "vcil-checkpoint";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TensorEntry {
    pub name: String,
    pub shape: Vec<usize>,
    /// Offset in values (not bytes) from the start of the blob.
    pub offset: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointManifest {
    pub format: String,
    pub version: u32,
    pub dtype: String,
    pub config: BackboneConfig,
    pub num_classes: usize,
    pub total_values: usize,
    pub tensors: Vec<TensorEntry>,
    pub sha256: String,
}

pub fn save_checkpoint(model: &ModelState, dir: &Path, name: &str) -> Result<CheckpointManifest> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let params = model.params();
    let mut offset = 0;
    let mut tensors = Vec::new();
    let mut blob = Vec::with_capacity(params.len() * 8);
    for (name, shape, values) in params.tensors() {
        tensors.push(TensorEntry { name, shape, offset });
        offset += values.len();
        for v in values {
            blob.extend_from_slice(&v.to_le_bytes());
        }
    }
    let manifest = CheckpointManifest {
        format: CHECKPOINT_FORMAT.into(),
        version: CHECKPOINT_VERSION,
        dtype: "f64-le".into(),
        config: model.config().clone(),
        num_classes: model.num_classes(),
        total_values: offset,
        tensors,
        sha256: params.digest(),
    };
    let bin = dir.join(format!("{name}.bin"));
    fs::write(&bin, blob).map_err(|e| Error::io(&bin, e))?;
    let json = dir.join(format!("{name}.json"));
    let text = serde_json::to_string_pretty(&manifest).expect("manifest serializes");
    fs::write(&json, text).map_err(|e| Error::io(&json, e))?;
    Ok(manifest)
}

/// Restores a model; the distillation snapshot is not part of a checkpoint.
pub fn load_checkpoint(dir: &Path, name: &str) -> Result<ModelState> {
    let json = dir.join(format!("{name}.json"));
    let text = fs::read_to_string(&json).map_err(|e| Error::io(&json, e))?;
    let manifest: CheckpointManifest =
        serde_json::from_str(&text).map_err(|e| Error::format(&json, e))?;
    if manifest.format != CHECKPOINT_FORMAT || manifest.version != CHECKPOINT_VERSION {
        return Err(Error::format(
            &json,
            format!("unsupported checkpoint {} v{}", manifest.format, manifest.version),
        ));
    }
    if manifest.dtype != "f64-le" {
        return Err(Error::format(&json, format!("unsupported dtype {}", manifest.dtype)));
    }
    manifest.config.validate()?;
    let bin = dir.join(format!("{name}.bin"));
    let bytes = fs::read(&bin).map_err(|e| Error::io(&bin, e))?;
    if bytes.len() != manifest.total_values * 8 {
        return Err(Error::format(&bin, "blob length does not match manifest"));
    }
    let flat: Vec<f64> = bytes
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().expect("8-byte chunk")))
        .collect();
    let mut params = Params::zeros(&manifest.config, manifest.num_classes);
    let expected: Vec<(String, Vec<usize>)> =
        params.tensors().into_iter().map(|(n, s, _)| (n, s)).collect();
    let listed: Vec<(String, Vec<usize>)> =
        manifest.tensors.iter().map(|t| (t.name.clone(), t.shape.clone())).collect();
    if expected != listed {
        return Err(Error::format(&json, "tensor list does not match the configuration"));
    }
    params.assign_flat(&flat).map_err(|e| Error::format(&bin, e))?;
    if params.digest() != manifest.sha256 {
        return Err(Error::format(&bin, "checksum mismatch"));
    }
    ModelState::from_params(manifest.config, params)
}
