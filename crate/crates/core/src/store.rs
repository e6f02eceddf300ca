//! Named-tensor store: the on-disk checkpoint format.
//!
//! A store is a directory holding `manifest.json` (version, tensor names,
//! shapes, dtype, byte offsets) and `weights.bin`, the little-endian f32
//! payloads concatenated in manifest order. Round trips are bit-exact.

use crate::error::{Error, Result};
use crate::real::Real;
use crate::tensor::Tensor;
use serde::{Deserialize, Serialize};
use std::fs;
use std::io::{Read, Write};
use std::path::Path;

pub const STORE_VERSION: u32 = 1;
const MANIFEST_FILE: &str = "manifest.json";
const WEIGHTS_FILE: &str = "weights.bin";

#[derive(Debug, Serialize, Deserialize)]
struct TensorEntry {
    name: String,
    shape: Vec<usize>,
    dtype: String,
    offset: u64,
    byte_len: u64,
}

#[derive(Debug, Serialize, Deserialize)]
struct Manifest {
    version: u32,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    config: Option<serde_json::Value>,
    tensors: Vec<TensorEntry>,
}

/// Write named tensors (and an optional config blob) as a store directory.
pub fn save<F: Real>(
    dir: &Path,
    tensors: &[(String, &Tensor<F>)],
    config: Option<serde_json::Value>,
) -> Result<()> {
    fs::create_dir_all(dir)?;
    let mut entries = Vec::with_capacity(tensors.len());
    let mut payload: Vec<u8> = Vec::new();
    for (name, tensor) in tensors {
        let offset = payload.len() as u64;
        for v in tensor.data() {
            payload.extend_from_slice(&(v.as_f64() as f32).to_le_bytes());
        }
        entries.push(TensorEntry {
            name: name.clone(),
            shape: tensor.shape().to_vec(),
            dtype: "f32".to_string(),
            offset,
            byte_len: (tensor.numel() * 4) as u64,
        });
    }
    let manifest = Manifest { version: STORE_VERSION, config, tensors: entries };
    fs::write(dir.join(MANIFEST_FILE), serde_json::to_vec_pretty(&manifest)?)?;
    let mut f = fs::File::create(dir.join(WEIGHTS_FILE))?;
    f.write_all(&payload)?;
    Ok(())
}

/// A loaded store: tensors in manifest order plus the optional config blob.
pub struct Loaded<F: Real> {
    pub tensors: Vec<(String, Tensor<F>)>,
    pub config: Option<serde_json::Value>,
}

impl<F: Real> Loaded<F> {
    pub fn get(&self, name: &str) -> Option<&Tensor<F>> {
        self.tensors.iter().find(|(n, _)| n == name).map(|(_, t)| t)
    }
}

/// Read a full store directory, validating version, offsets and sizes.
/// Any inconsistency fails before a single tensor is handed out.
pub fn load<F: Real>(dir: &Path) -> Result<Loaded<F>> {
    let manifest_path = dir.join(MANIFEST_FILE);
    let raw = fs::read(&manifest_path)
        .map_err(|e| Error::Checkpoint(format!("cannot read {}: {e}", manifest_path.display())))?;
    let manifest: Manifest = serde_json::from_slice(&raw)
        .map_err(|e| Error::Checkpoint(format!("malformed {}: {e}", manifest_path.display())))?;
    if manifest.version != STORE_VERSION {
        return Err(Error::Checkpoint(format!(
            "version mismatch: found {}, expected {STORE_VERSION}",
            manifest.version
        )));
    }
    let mut payload = Vec::new();
    fs::File::open(dir.join(WEIGHTS_FILE))
        .map_err(|e| Error::Checkpoint(format!("cannot open weights.bin: {e}")))?
        .read_to_end(&mut payload)?;

    let mut tensors = Vec::with_capacity(manifest.tensors.len());
    for entry in &manifest.tensors {
        if entry.dtype != "f32" {
            return Err(Error::Checkpoint(format!("unsupported dtype {:?}", entry.dtype)));
        }
        let numel: usize = entry.shape.iter().product();
        if entry.byte_len != (numel * 4) as u64 {
            return Err(Error::Checkpoint(format!(
                "tensor {} byte_len {} disagrees with shape {:?}",
                entry.name, entry.byte_len, entry.shape
            )));
        }
        let start = entry.offset as usize;
        let end = start + entry.byte_len as usize;
        if end > payload.len() {
            return Err(Error::Checkpoint(format!(
                "tensor {} extends past weights.bin ({} > {})",
                entry.name,
                end,
                payload.len()
            )));
        }
        let data: Vec<F> = payload[start..end]
            .chunks_exact(4)
            .map(|b| F::from_f64(f32::from_le_bytes([b[0], b[1], b[2], b[3]]) as f64))
            .collect();
        tensors.push((entry.name.clone(), Tensor::new(entry.shape.clone(), data)?));
    }
    Ok(Loaded { tensors, config: manifest.config })
}
