//! Single-file checkpoints: the magic `FMASHCKP`, a little-endian `u32`
//! format version, a `u64` manifest length, the JSON manifest, then every
//! tensor as little-endian `f64` in manifest order.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use fmash_core::params::ParamStore;
use fmash_core::tensor::Matrix;

use crate::error::{Error, Result};

pub const MAGIC: &[u8; 8] = b"FMASHCKP";
pub const VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct TensorEntry {
    pub name: String,
    pub rows: usize,
    pub cols: usize,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Manifest {
    pub version: u32,
    pub dtype: String,
    pub config_hash: String,
    /// Stages that have been trained, in order.
    pub stages: Vec<String>,
    pub tensors: Vec<TensorEntry>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub manifest: Manifest,
    pub values: Vec<(String, Matrix)>,
}

pub fn save(path: &Path, store: &ParamStore, config_hash: &str, stages: &[String]) -> Result<()> {
    let manifest = Manifest {
        version: VERSION,
        dtype: "f64".into(),
        config_hash: config_hash.into(),
        stages: stages.to_vec(),
        tensors: store.iter().map(|(n, m)| TensorEntry { name: n.into(), rows: m.rows, cols: m.cols }).collect(),
    };
    let json = serde_json::to_vec(&manifest).expect("manifest serialises");
    let mut buf = Vec::with_capacity(20 + json.len() + 8 * store.num_scalars());
    buf.extend_from_slice(MAGIC);
    buf.extend_from_slice(&VERSION.to_le_bytes());
    buf.extend_from_slice(&(json.len() as u64).to_le_bytes());
    buf.extend_from_slice(&json);
    for (_, m) in store.iter() {
        for x in &m.data {
            buf.extend_from_slice(&x.to_le_bytes());
        }
    }
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    fs::write(path, buf).map_err(|e| Error::io(path, e))
}

pub fn load(path: &Path) -> Result<Checkpoint> {
    let bytes = fs::read(path).map_err(|e| {
        if e.kind() == std::io::ErrorKind::NotFound {
            Error::MissingArtifact { path: path.into(), hint: "run the matching train command first".into() }
        } else {
            Error::io(path, e)
        }
    })?;
    let bad = |msg: &str| Error::Checkpoint { path: path.into(), msg: msg.into() };
    if bytes.len() < 20 || &bytes[..8] != MAGIC {
        return Err(bad("not a checkpoint (bad magic)"));
    }
    let version = u32::from_le_bytes(bytes[8..12].try_into().expect("4 bytes"));
    if version != VERSION {
        return Err(bad(&format!("unsupported version {version} (expected {VERSION})")));
    }
    let len = u64::from_le_bytes(bytes[12..20].try_into().expect("8 bytes")) as usize;
    let body = bytes.get(20..20 + len).ok_or_else(|| bad("truncated manifest"))?;
    let manifest: Manifest = serde_json::from_slice(body).map_err(|e| bad(&format!("manifest: {e}")))?;
    if manifest.version != version {
        return Err(bad("manifest version disagrees with header"));
    }
    let mut off = 20 + len;
    let mut values = Vec::with_capacity(manifest.tensors.len());
    for t in &manifest.tensors {
        let n = t.rows * t.cols;
        let raw = bytes.get(off..off + 8 * n).ok_or_else(|| bad(&format!("truncated tensor '{}'", t.name)))?;
        let data = raw.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes"))).collect();
        values.push((t.name.clone(), Matrix::from_vec(t.rows, t.cols, data)));
        off += 8 * n;
    }
    if off != bytes.len() {
        return Err(bad("trailing bytes after the last tensor"));
    }
    Ok(Checkpoint { manifest, values })
}
