//! Model checkpoints: a JSON manifest next to a raw little-endian f64 blob.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::{Model, ModelConfig};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ManifestEntry {
    pub name: String,
    pub shape: Vec<usize>,
    /// Offset into the blob, in f64 elements.
    pub offset: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CheckpointManifest {
    pub config: ModelConfig,
    pub width: usize,
    pub gate_seed: u64,
    pub blob: String,
    pub checksum: u64,
    pub params: Vec<ManifestEntry>,
}

fn blob_path(manifest: &Path) -> PathBuf {
    manifest.with_extension("bin")
}

/// Writes `path` (manifest) and `path` with a `.bin` extension (weights).
pub fn save_checkpoint(model: &Model, path: &Path) -> Result<()> {
    let blob = blob_path(path);
    let mut bytes = Vec::with_capacity(model.param_count() * 8);
    let mut params = Vec::with_capacity(model.store.len());
    let mut offset = 0;
    for p in model.store.iter() {
        params.push(ManifestEntry { name: p.name.clone(), shape: p.value.shape().to_vec(), offset });
        for v in p.value.data() {
            bytes.extend_from_slice(&v.to_le_bytes());
        }
        offset += p.value.len();
    }
    let manifest = CheckpointManifest {
        config: model.config.clone(),
        width: model.width,
        gate_seed: model.gate_seed,
        blob: blob.file_name().map(|n| n.to_string_lossy().into_owned()).unwrap_or_default(),
        checksum: model.store.checksum(),
        params,
    };
    fs::write(&blob, bytes)?;
    fs::write(path, serde_json::to_string_pretty(&manifest)?)?;
    Ok(())
}

pub fn load_checkpoint(path: &Path) -> Result<Model> {
    let manifest: CheckpointManifest = serde_json::from_str(&fs::read_to_string(path)?)?;
    let blob_file = path.parent().unwrap_or(Path::new(".")).join(&manifest.blob);
    let bytes = fs::read(&blob_file)?;
    if bytes.len() % 8 != 0 {
        return Err(Error::invalid(format!("{} is not a whole number of f64 values", blob_file.display())));
    }
    let values: Vec<f64> = bytes.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes"))).collect();

    let mut model = Model::assemble(&manifest.config, manifest.width, None)?;
    model.gate_seed = manifest.gate_seed;
    if manifest.params.len() != model.store.len() {
        return Err(Error::invalid(format!(
            "checkpoint has {} tensors, model expects {}",
            manifest.params.len(),
            model.store.len()
        )));
    }
    for entry in &manifest.params {
        let id = model
            .store
            .find(&entry.name)
            .ok_or_else(|| Error::invalid(format!("checkpoint tensor '{}' not in model", entry.name)))?;
        if model.store.value(id).shape() != entry.shape.as_slice() {
            return Err(Error::shape("load_checkpoint", format!("tensor '{}' has shape {:?}", entry.name, entry.shape)));
        }
        let n: usize = entry.shape.iter().product();
        let data = values
            .get(entry.offset..entry.offset + n)
            .ok_or_else(|| Error::invalid(format!("tensor '{}' runs past the end of the blob", entry.name)))?;
        model.store.replace(id, Tensor::new(entry.shape.clone(), data.to_vec())?);
    }
    if model.store.checksum() != manifest.checksum {
        return Err(Error::invalid("checkpoint checksum mismatch"));
    }
    Ok(model)
}
