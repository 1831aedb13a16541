//! Checkpoints: a binary weights blob plus a JSON sidecar with the epoch,
//! validation scores and the config fingerprint. Writes go through a
//! temp-file + rename so a crash mid-write never leaves a truncated
//! checkpoint under the final name.

use crate::autodiff::ParamStore;
use crate::error::{Error, Result};
use ndarray::{ArrayD, IxDyn};
use serde::{Deserialize, Serialize};
use std::io::{Read, Write};
use std::path::{Path, PathBuf};

const MAGIC: &[u8; 8] = b"TSEGW001";
/// Upper bound on elements per tensor when decoding untrusted blobs.
const MAX_ELEMENTS: u64 = 1 << 28;
const MAX_NDIM: u8 = 8;
const MAX_NAME: u32 = 4096;
const MAX_TENSORS: u32 = 1 << 20;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CheckpointMeta {
    pub epoch: usize,
    pub val_loss: f64,
    pub val_iou: f64,
    /// Fingerprint of the full experiment config (provenance).
    pub config_hash: String,
    /// Fingerprint of the model section only (compatibility checks).
    #[serde(default)]
    pub model_hash: String,
}

#[derive(Clone)]
pub struct Checkpoint {
    pub weights: Vec<(String, ArrayD<f64>)>,
    pub meta: CheckpointMeta,
}

impl Checkpoint {
    /// Snapshot every tensor of the store, sorted by name.
    pub fn from_store(store: &ParamStore, meta: CheckpointMeta) -> Self {
        let mut weights: Vec<(String, ArrayD<f64>)> = store
            .snapshot()
            .into_iter()
            .map(|(name, rc)| (name, rc.as_ref().clone()))
            .collect();
        weights.sort_by(|a, b| a.0.cmp(&b.0));
        Checkpoint { weights, meta }
    }

    /// Load every tensor back into a store. Every store tensor must be
    /// present with a matching shape.
    pub fn apply(&self, store: &ParamStore) -> Result<()> {
        let by_name: std::collections::HashMap<&str, &ArrayD<f64>> = self
            .weights
            .iter()
            .map(|(n, a)| (n.as_str(), a))
            .collect();
        for pid in store.ids() {
            let name = store.name(pid);
            let tensor = by_name.get(name).ok_or_else(|| {
                Error::CheckpointMismatch(format!("missing tensor {name}"))
            })?;
            if tensor.shape() != store.value_rc(pid).shape() {
                return Err(Error::CheckpointMismatch(format!(
                    "tensor {name} has shape {:?}, model expects {:?}",
                    tensor.shape(),
                    store.value_rc(pid).shape()
                )));
            }
            store.set_value(pid, (*tensor).clone());
        }
        Ok(())
    }

    /// Load a tensor subset (external pretrained weights): names present in
    /// both sides are applied, everything else keeps its initialization.
    /// Returns how many tensors were applied.
    pub fn apply_partial(&self, store: &ParamStore) -> Result<usize> {
        let mut applied = 0;
        for (name, tensor) in &self.weights {
            if let Some(pid) = store.id(name) {
                if tensor.shape() != store.value_rc(pid).shape() {
                    return Err(Error::CheckpointMismatch(format!(
                        "tensor {name} has shape {:?}, model expects {:?}",
                        tensor.shape(),
                        store.value_rc(pid).shape()
                    )));
                }
                store.set_value(pid, tensor.clone());
                applied += 1;
            }
        }
        Ok(applied)
    }

    pub fn encode(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&(self.weights.len() as u32).to_le_bytes());
        for (name, tensor) in &self.weights {
            out.extend_from_slice(&(name.len() as u32).to_le_bytes());
            out.extend_from_slice(name.as_bytes());
            out.push(tensor.ndim() as u8);
            for &d in tensor.shape() {
                out.extend_from_slice(&(d as u64).to_le_bytes());
            }
            for &v in tensor.iter() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        out
    }

    pub fn decode(bytes: &[u8]) -> Result<Vec<(String, ArrayD<f64>)>> {
        let mut cur = std::io::Cursor::new(bytes);
        let mut magic = [0u8; 8];
        cur.read_exact(&mut magic)
            .map_err(|_| Error::InvalidCheckpoint("truncated header".into()))?;
        if &magic != MAGIC {
            return Err(Error::InvalidCheckpoint("bad magic".into()));
        }
        let count = read_u32(&mut cur)?;
        if count > MAX_TENSORS {
            return Err(Error::InvalidCheckpoint("tensor count too large".into()));
        }
        let mut weights = Vec::new();
        for _ in 0..count {
            let name_len = read_u32(&mut cur)?;
            if name_len > MAX_NAME {
                return Err(Error::InvalidCheckpoint("name too long".into()));
            }
            let mut name_bytes = vec![0u8; name_len as usize];
            cur.read_exact(&mut name_bytes)
                .map_err(|_| Error::InvalidCheckpoint("truncated name".into()))?;
            let name = String::from_utf8(name_bytes)
                .map_err(|_| Error::InvalidCheckpoint("name not utf8".into()))?;
            let mut ndim = [0u8; 1];
            cur.read_exact(&mut ndim)
                .map_err(|_| Error::InvalidCheckpoint("truncated ndim".into()))?;
            if ndim[0] > MAX_NDIM {
                return Err(Error::InvalidCheckpoint("rank too large".into()));
            }
            let mut shape = Vec::with_capacity(ndim[0] as usize);
            let mut elements: u64 = 1;
            for _ in 0..ndim[0] {
                let d = read_u64(&mut cur)?;
                elements = elements.saturating_mul(d.max(1));
                if elements > MAX_ELEMENTS {
                    return Err(Error::InvalidCheckpoint("tensor too large".into()));
                }
                shape.push(d as usize);
            }
            let n: usize = shape.iter().product();
            // Refuse to allocate more than the remaining bytes could fill.
            let remaining = bytes.len() as u64 - cur.position();
            if (n as u64) * 8 > remaining {
                return Err(Error::InvalidCheckpoint("truncated tensor data".into()));
            }
            let mut data = Vec::with_capacity(n);
            let mut buf = [0u8; 8];
            for _ in 0..n {
                cur.read_exact(&mut buf)
                    .map_err(|_| Error::InvalidCheckpoint("truncated data".into()))?;
                data.push(f64::from_le_bytes(buf));
            }
            let tensor = ArrayD::from_shape_vec(IxDyn(&shape), data)
                .map_err(|e| Error::InvalidCheckpoint(e.to_string()))?;
            weights.push((name, tensor));
        }
        Ok(weights)
    }

    /// Write `<base>.bin` and `<base>.json` atomically.
    pub fn save(&self, base: &Path) -> Result<()> {
        let bin = with_extension(base, "bin");
        let json = with_extension(base, "json");
        write_atomic(&bin, &self.encode())?;
        let mut sidecar = serde_json::to_string_pretty(&self.meta)?;
        sidecar.push('\n');
        write_atomic(&json, sidecar.as_bytes())?;
        Ok(())
    }

    pub fn load(base: &Path) -> Result<Self> {
        let bin = with_extension(base, "bin");
        let json = with_extension(base, "json");
        let weights = Self::decode(&std::fs::read(&bin)?)?;
        let meta: CheckpointMeta = serde_json::from_str(&std::fs::read_to_string(&json)?)?;
        Ok(Checkpoint { weights, meta })
    }
}

fn with_extension(base: &Path, ext: &str) -> PathBuf {
    let mut p = base.as_os_str().to_os_string();
    p.push(".");
    p.push(ext);
    PathBuf::from(p)
}

fn read_u32(cur: &mut std::io::Cursor<&[u8]>) -> Result<u32> {
    let mut buf = [0u8; 4];
    cur.read_exact(&mut buf)
        .map_err(|_| Error::InvalidCheckpoint("truncated u32".into()))?;
    Ok(u32::from_le_bytes(buf))
}

fn read_u64(cur: &mut std::io::Cursor<&[u8]>) -> Result<u64> {
    let mut buf = [0u8; 8];
    cur.read_exact(&mut buf)
        .map_err(|_| Error::InvalidCheckpoint("truncated u64".into()))?;
    Ok(u64::from_le_bytes(buf))
}

/// Write-to-temp then rename; the final path is never partially written.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let tmp = path.with_extension("tmp");
    {
        let mut f = std::fs::File::create(&tmp)?;
        f.write_all(bytes)?;
        f.sync_all()?;
    }
    std::fs::rename(&tmp, path)?;
    Ok(())
}
