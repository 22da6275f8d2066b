//! Parameter checkpoints: a JSON manifest listing names and shapes, plus one
//! binary file holding each parameter's little-endian `f64` data back to back
//! in manifest order.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::params::ParamSet;
use super::tensor::Tensor;
use crate::error::{Error, FormatError, Result};

pub const CHECKPOINT_VERSION: u32 = 1;
pub const MANIFEST_FILE: &str = "checkpoint.json";
pub const BLOB_FILE: &str = "checkpoint.bin";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ParamEntry {
    pub name: String,
    pub shape: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointManifest {
    pub version: u32,
    /// Free-form description of the model the parameters belong to.
    pub meta: serde_json::Value,
    pub params: Vec<ParamEntry>,
}

pub fn save_checkpoint(dir: &Path, params: &ParamSet, meta: serde_json::Value) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let manifest = CheckpointManifest {
        version: CHECKPOINT_VERSION,
        meta,
        params: params
            .iter()
            .map(|(n, t)| ParamEntry { name: n.to_string(), shape: t.shape().to_vec() })
            .collect(),
    };
    let mut blob = Vec::with_capacity(params.numel() * 8);
    for (_, t) in params.iter() {
        for v in t.data() {
            blob.extend_from_slice(&v.to_le_bytes());
        }
    }
    let mpath = dir.join(MANIFEST_FILE);
    let json = serde_json::to_string_pretty(&manifest).expect("manifest serializes");
    fs::write(&mpath, json).map_err(|e| Error::io(&mpath, e))?;
    let bpath = dir.join(BLOB_FILE);
    fs::write(&bpath, blob).map_err(|e| Error::io(&bpath, e))?;
    Ok(())
}

pub fn load_checkpoint(dir: &Path) -> Result<(CheckpointManifest, ParamSet)> {
    let mpath = dir.join(MANIFEST_FILE);
    let text = read_file(&mpath)?;
    let manifest: CheckpointManifest = serde_json::from_slice(&text).map_err(|e| {
        FormatError::Invalid { path: mpath.clone(), msg: e.to_string() }
    })?;
    if manifest.version != CHECKPOINT_VERSION {
        return Err(FormatError::Version {
            path: mpath,
            expected: CHECKPOINT_VERSION,
            found: manifest.version,
        }
        .into());
    }
    let bpath = dir.join(BLOB_FILE);
    let blob = read_file(&bpath)?;
    let total: usize = manifest.params.iter().map(|p| p.shape.iter().product::<usize>()).sum();
    if blob.len() < total * 8 {
        return Err(FormatError::UnexpectedEof { path: bpath }.into());
    }
    if blob.len() != total * 8 {
        return Err(FormatError::CountMismatch {
            path: bpath,
            expected: total * 8,
            found: blob.len(),
        }
        .into());
    }
    let mut params = ParamSet::new();
    let mut chunks = blob.chunks_exact(8);
    for entry in &manifest.params {
        let n: usize = entry.shape.iter().product();
        let data: Vec<f64> = chunks
            .by_ref()
            .take(n)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8-byte chunk")))
            .collect();
        params.insert(entry.name.clone(), Tensor::new(entry.shape.clone(), data)?)?;
    }
    Ok((manifest, params))
}

fn read_file(path: &Path) -> Result<Vec<u8>> {
    fs::read(path).map_err(|e| {
        if e.kind() == std::io::ErrorKind::NotFound {
            FormatError::MissingFile { path: path.to_path_buf() }.into()
        } else {
            Error::io(path, e)
        }
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_trip_preserves_bits() {
        let dir = tempfile::tempdir().unwrap();
        let mut p = ParamSet::new();
        p.insert("a", Tensor::new(vec![2, 2], vec![1.0, -0.0, f64::MIN_POSITIVE, 1e300]).unwrap())
            .unwrap();
        p.insert("b", Tensor::scalar(std::f64::consts::PI)).unwrap();
        save_checkpoint(dir.path(), &p, serde_json::json!({"model": "test"})).unwrap();
        let (m, q) = load_checkpoint(dir.path()).unwrap();
        assert_eq!(m.params.len(), 2);
        for ((_, a), (_, b)) in p.iter().zip(q.iter()) {
            let ab: Vec<u64> = a.data().iter().map(|v| v.to_bits()).collect();
            let bb: Vec<u64> = b.data().iter().map(|v| v.to_bits()).collect();
            assert_eq!(ab, bb);
        }
    }

    #[test]
    fn rejects_version_mismatch_and_truncation() {
        let dir = tempfile::tempdir().unwrap();
        let mut p = ParamSet::new();
        p.insert("w", Tensor::zeros(vec![3])).unwrap();
        save_checkpoint(dir.path(), &p, serde_json::Value::Null).unwrap();

        let bpath = dir.path().join(BLOB_FILE);
        let blob = fs::read(&bpath).unwrap();
        fs::write(&bpath, &blob[..10]).unwrap();
        let err = load_checkpoint(dir.path()).unwrap_err();
        assert!(err.to_string().contains("unexpected end of file"), "{err}");
        fs::write(&bpath, &blob).unwrap();

        let mpath = dir.path().join(MANIFEST_FILE);
        let text = fs::read_to_string(&mpath).unwrap().replace("\"version\": 1", "\"version\": 7");
        fs::write(&mpath, text).unwrap();
        let err = load_checkpoint(dir.path()).unwrap_err();
        assert!(err.to_string().contains("unsupported version 7"), "{err}");
    }
}
