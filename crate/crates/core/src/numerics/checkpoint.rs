//! Checkpoint directories: `manifest.json` plus one little-endian `f64` blob.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{NumericsError, ParamStore, Tensor};

pub const MANIFEST_FILE: &str = "manifest.json";
pub const BLOB_FILE: &str = "params.bin";
pub const FORMAT: &str = "ovsg-checkpoint-v1";

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TensorEntry {
    pub name: String,
    pub shape: Vec<usize>,
    /// Byte offset into the blob.
    pub offset: u64,
    pub trainable: bool,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CheckpointManifest {
    pub format: String,
    pub blob: String,
    pub tensors: Vec<TensorEntry>,
    #[serde(default)]
    pub metadata: serde_json::Value,
}

pub fn save(dir: &Path, params: &ParamStore, metadata: serde_json::Value) -> Result<(), NumericsError> {
    fs::create_dir_all(dir)?;
    let mut blob = Vec::new();
    let mut tensors = Vec::with_capacity(params.len());
    for (name, p) in params.iter() {
        tensors.push(TensorEntry {
            name: name.clone(),
            shape: p.value.shape().to_vec(),
            offset: blob.len() as u64,
            trainable: p.trainable,
        });
        for v in p.value.data() {
            blob.extend_from_slice(&v.to_le_bytes());
        }
    }
    let manifest = CheckpointManifest {
        format: FORMAT.to_string(),
        blob: BLOB_FILE.to_string(),
        tensors,
        metadata,
    };
    fs::write(dir.join(BLOB_FILE), blob)?;
    fs::write(dir.join(MANIFEST_FILE), serde_json::to_vec_pretty(&manifest)?)?;
    Ok(())
}

pub fn load(dir: &Path) -> Result<(ParamStore, serde_json::Value), NumericsError> {
    let bad = |msg: String| NumericsError::Checkpoint(format!("{}: {msg}", dir.display()));
    let raw = fs::read(dir.join(MANIFEST_FILE))
        .map_err(|e| bad(format!("cannot read {MANIFEST_FILE}: {e}")))?;
    let manifest: CheckpointManifest =
        serde_json::from_slice(&raw).map_err(|e| bad(format!("invalid {MANIFEST_FILE}: {e}")))?;
    if manifest.format != FORMAT {
        return Err(bad(format!("unsupported format {:?}", manifest.format)));
    }
    let blob = fs::read(dir.join(&manifest.blob))
        .map_err(|e| bad(format!("cannot read blob {}: {e}", manifest.blob)))?;
    let total: usize = manifest
        .tensors
        .iter()
        .map(|t| t.shape.iter().product::<usize>() * 8)
        .sum();
    if total != blob.len() {
        return Err(bad(format!(
            "manifest shapes need {total} bytes, blob has {}",
            blob.len()
        )));
    }
    let mut store = ParamStore::new();
    let mut expected_offset = 0u64;
    for t in &manifest.tensors {
        if t.offset != expected_offset {
            return Err(bad(format!("tensor {} at offset {} (expected {expected_offset})", t.name, t.offset)));
        }
        let n: usize = t.shape.iter().product();
        let start = t.offset as usize;
        let data = blob[start..start + n * 8]
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8-byte chunk")))
            .collect();
        let tensor = Tensor::new(t.shape.clone(), data).map_err(|e| bad(format!("{}: {e}", t.name)))?;
        store.insert(&t.name, tensor, t.trainable)?;
        expected_offset += (n * 8) as u64;
    }
    Ok((store, manifest.metadata))
}
