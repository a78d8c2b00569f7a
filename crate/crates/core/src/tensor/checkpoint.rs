//! Parameter checkpoints: one little-endian f64 blob plus a JSON manifest
//! with names, shapes, byte offsets and a format version.

use super::{ParamStore, Result, Tensor, TensorError};
use serde::{Deserialize, Serialize};
use std::fs;
use std::path::Path;

pub const CHECKPOINT_FORMAT_VERSION: u32 = 1;

const MANIFEST_FILE: &str = "manifest.json";
const BLOB_FILE: &str = "params.bin";

#[derive(Debug, Serialize, Deserialize)]
struct Manifest {
    format_version: u32,
    entries: Vec<Entry>,
}

#[derive(Debug, Serialize, Deserialize)]
struct Entry {
    name: String,
    shape: Vec<usize>,
    frozen: bool,
    byte_offset: u64,
    byte_len: u64,
}

fn ckpt_err(e: impl std::fmt::Display) -> TensorError {
    TensorError::Checkpoint(e.to_string())
}

pub fn save_checkpoint(store: &ParamStore, dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(ckpt_err)?;
    let mut blob: Vec<u8> = Vec::new();
    let mut entries = Vec::new();
    for (_, p) in store.iter() {
        let offset = blob.len() as u64;
        for v in p.value.data() {
            blob.extend_from_slice(&v.to_le_bytes());
        }
        entries.push(Entry {
            name: p.name.clone(),
            shape: p.value.shape().to_vec(),
            frozen: p.frozen,
            byte_offset: offset,
            byte_len: blob.len() as u64 - offset,
        });
    }
    let manifest = Manifest { format_version: CHECKPOINT_FORMAT_VERSION, entries };
    fs::write(dir.join(BLOB_FILE), &blob).map_err(ckpt_err)?;
    fs::write(
        dir.join(MANIFEST_FILE),
        serde_json::to_vec_pretty(&manifest).map_err(ckpt_err)?,
    )
    .map_err(ckpt_err)?;
    Ok(())
}

/// Loads a checkpoint saved by [`save_checkpoint`]. Parameter order, names,
/// shapes and frozen flags are restored exactly.
pub fn load_checkpoint(dir: &Path) -> Result<ParamStore> {
    let manifest: Manifest =
        serde_json::from_slice(&fs::read(dir.join(MANIFEST_FILE)).map_err(ckpt_err)?)
            .map_err(ckpt_err)?;
    if manifest.format_version != CHECKPOINT_FORMAT_VERSION {
        return Err(TensorError::Checkpoint(format!(
            "unsupported checkpoint format version {}",
            manifest.format_version
        )));
    }
    let blob = fs::read(dir.join(BLOB_FILE)).map_err(ckpt_err)?;
    let mut store = ParamStore::new();
    for entry in manifest.entries {
        let start = entry.byte_offset as usize;
        let end = start + entry.byte_len as usize;
        if end > blob.len() || entry.byte_len % 8 != 0 {
            return Err(TensorError::Checkpoint(format!(
                "blob range {start}..{end} out of bounds for '{}'",
                entry.name
            )));
        }
        let data: Vec<f64> = blob[start..end]
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect();
        let numel: usize = entry.shape.iter().product();
        if numel != data.len() {
            return Err(TensorError::Checkpoint(format!(
                "shape {:?} does not match {} stored values for '{}'",
                entry.shape,
                data.len(),
                entry.name
            )));
        }
        let id = store.add(entry.name, Tensor::new(entry.shape, data)?);
        store.get_mut(id).frozen = entry.frozen;
    }
    Ok(store)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_trip_is_bitwise() {
        let dir = tempfile::tempdir().unwrap();
        let mut store = ParamStore::new();
        let a = store.add("w", Tensor::new(vec![2, 2], vec![0.1, -0.2, 1e-300, 3.5]).unwrap());
        store.add("b", Tensor::new(vec![3], vec![1.0, 2.0, 3.0]).unwrap());
        store.set_frozen(&[a], true);

        save_checkpoint(&store, dir.path()).unwrap();
        let loaded = load_checkpoint(dir.path()).unwrap();
        assert_eq!(loaded.len(), 2);
        for ((_, p), (_, q)) in store.iter().zip(loaded.iter()) {
            assert_eq!(p.name, q.name);
            assert_eq!(p.frozen, q.frozen);
            assert_eq!(p.value.shape(), q.value.shape());
            assert_eq!(p.value.data(), q.value.data());
        }
    }

    #[test]
    fn version_mismatch_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let store = ParamStore::new();
        save_checkpoint(&store, dir.path()).unwrap();
        let manifest_path = dir.path().join("manifest.json");
        let text = std::fs::read_to_string(&manifest_path).unwrap();
        std::fs::write(&manifest_path, text.replace("\"format_version\": 1", "\"format_version\": 99"))
            .unwrap();
        assert!(load_checkpoint(dir.path()).is_err());
    }
}
