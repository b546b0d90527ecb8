//! Parameter checkpoints: raw little-endian `f64` values plus a JSON sidecar
//! listing `{name, shape, offset}` (byte offsets into the value file).

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::params::ParamSet;
use super::tensor::Tensor;
use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointEntry {
    pub name: String,
    pub shape: Vec<usize>,
    pub offset: u64,
    #[serde(default = "default_true")]
    pub decay: bool,
}

fn default_true() -> bool {
    true
}

pub fn sidecar_path(path: &Path) -> PathBuf {
    let mut s = path.as_os_str().to_owned();
    s.push(".json");
    PathBuf::from(s)
}

pub fn encode(params: &ParamSet) -> (Vec<u8>, Vec<CheckpointEntry>) {
    let mut bytes = Vec::with_capacity(params.num_values() * 8);
    let mut entries = Vec::with_capacity(params.len());
    for p in params.iter() {
        entries.push(CheckpointEntry {
            name: p.name.clone(),
            shape: p.value.shape().to_vec(),
            offset: bytes.len() as u64,
            decay: p.decay,
        });
        for v in p.value.data() {
            bytes.extend_from_slice(&v.to_le_bytes());
        }
    }
    (bytes, entries)
}

pub fn decode(bytes: &[u8], entries: &[CheckpointEntry]) -> Result<ParamSet> {
    let mut params = ParamSet::new();
    for e in entries {
        let n: usize = e.shape.iter().product();
        let start = e.offset as usize;
        let end = start + n * 8;
        if end > bytes.len() {
            return Err(Error::Corruption(format!(
                "checkpoint tensor {} needs bytes {start}..{end}, file has {}",
                e.name,
                bytes.len()
            )));
        }
        let data = bytes[start..end]
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
            .collect();
        params.push(e.name.clone(), Tensor::new(e.shape.clone(), data)?, e.decay);
    }
    Ok(params)
}

pub fn save(params: &ParamSet, path: &Path) -> Result<()> {
    let (bytes, entries) = encode(params);
    fs::write(path, bytes).map_err(|e| Error::io(path, e))?;
    let side = sidecar_path(path);
    let json = serde_json::to_vec_pretty(&entries).map_err(|e| Error::Json {
        path: side.clone(),
        source: e,
    })?;
    fs::write(&side, json).map_err(|e| Error::io(&side, e))
}

pub fn load(path: &Path) -> Result<ParamSet> {
    let side = sidecar_path(path);
    let json = fs::read(&side).map_err(|e| Error::io(&side, e))?;
    let entries: Vec<CheckpointEntry> =
        serde_json::from_slice(&json).map_err(|e| Error::Json { path: side, source: e })?;
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode(&bytes, &entries)
}
