use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::ParamStore;
use crate::error::{Error, Result};

pub const MANIFEST_FILE: &str = "checkpoint.json";
pub const BLOB_FILE: &str = "params.bin";
const FORMAT: &str = "egocog-checkpoint";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ParamEntry {
    pub name: String,
    pub shape: Vec<usize>,
    /// Offset into the blob, in f32 elements.
    pub offset: usize,
}

/// JSON side of a checkpoint; values live in a little-endian f32 blob.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointManifest {
    pub format: String,
    pub version: u32,
    pub dtype: String,
    pub seed: u64,
    pub step: u64,
    pub epoch: usize,
    pub params: Vec<ParamEntry>,
    /// Free-form payload, e.g. the serialized model configuration.
    #[serde(default)]
    pub extra: serde_json::Value,
}

impl CheckpointManifest {
    pub fn read(dir: &Path) -> Result<Self> {
        let path = dir.join(MANIFEST_FILE);
        let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
        let m: CheckpointManifest = serde_json::from_str(&text)?;
        if m.format != FORMAT {
            return Err(Error::BadMagic(path.display().to_string()));
        }
        if m.dtype != "f32" {
            return Err(Error::BadConfig(format!("unsupported dtype {}", m.dtype)));
        }
        Ok(m)
    }
}

pub(crate) fn encode_f32(values: impl Iterator<Item = f64>) -> Vec<u8> {
    values.flat_map(|v| (v as f32).to_le_bytes()).collect()
}

pub(crate) fn decode_f32(bytes: &[u8]) -> Vec<f64> {
    bytes
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]) as f64)
        .collect()
}

pub fn save_checkpoint(
    dir: &Path,
    store: &ParamStore,
    seed: u64,
    step: u64,
    epoch: usize,
    extra: serde_json::Value,
) -> Result<CheckpointManifest> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut offset = 0;
    let params = store
        .iter()
        .map(|(_, p)| {
            let e = ParamEntry {
                name: p.name.clone(),
                shape: p.value.shape().to_vec(),
                offset,
            };
            offset += p.value.len();
            e
        })
        .collect();
    let manifest = CheckpointManifest {
        format: FORMAT.into(),
        version: 1,
        dtype: "f32".into(),
        seed,
        step,
        epoch,
        params,
        extra,
    };
    let blob = encode_f32(store.iter().flat_map(|(_, p)| p.value.data().to_vec()));
    let blob_path = dir.join(BLOB_FILE);
    fs::write(&blob_path, blob).map_err(|e| Error::io(&blob_path, e))?;
    let man_path = dir.join(MANIFEST_FILE);
    fs::write(&man_path, serde_json::to_string_pretty(&manifest)?)
        .map_err(|e| Error::io(&man_path, e))?;
    Ok(manifest)
}

/// Loads values into `store`, whose names and shapes must match the manifest.
pub fn load_checkpoint(dir: &Path, store: &mut ParamStore) -> Result<CheckpointManifest> {
    let manifest = CheckpointManifest::read(dir)?;
    if manifest.params.len() != store.len() {
        return Err(Error::LengthMismatch {
            expected: store.len(),
            got: manifest.params.len(),
        });
    }
    let blob_path = dir.join(BLOB_FILE);
    let bytes = fs::read(&blob_path).map_err(|e| Error::io(&blob_path, e))?;
    let total = store.num_scalars();
    if bytes.len() != total * 4 {
        return Err(Error::LengthMismatch {
            expected: total * 4,
            got: bytes.len(),
        });
    }
    let values = decode_f32(&bytes);
    for (entry, p) in manifest.params.iter().zip(store.iter_mut()) {
        if entry.name != p.name || entry.shape != p.value.shape() {
            return Err(Error::BadConfig(format!(
                "checkpoint entry {} {:?} does not match parameter {} {:?}",
                entry.name,
                entry.shape,
                p.name,
                p.value.shape()
            )));
        }
        let n = p.value.len();
        p.value
            .data_mut()
            .copy_from_slice(&values[entry.offset..entry.offset + n]);
    }
    Ok(manifest)
}
