//! Parameter checkpoints.
//!
//! Layout: an 8-byte little-endian manifest length, the JSON manifest, then
//! every parameter's values as little-endian `f64` in manifest order.

use std::io::{Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{ParamStore, Tensor};
use crate::error::{GtpError, Result};

pub const CHECKPOINT_FORMAT: &str = "gtp-ckpt-1";

#[derive(Debug, Serialize, Deserialize)]
struct Manifest {
    format: String,
    params: Vec<ManifestEntry>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    meta: Option<serde_json::Value>,
}

#[derive(Debug, Serialize, Deserialize)]
struct ManifestEntry {
    name: String,
    shape: Vec<usize>,
}

pub fn write_checkpoint<W: Write>(
    mut out: W,
    params: &ParamStore,
    meta: Option<serde_json::Value>,
) -> Result<()> {
    let manifest = Manifest {
        format: CHECKPOINT_FORMAT.to_string(),
        params: params
            .iter()
            .map(|(_, name, t)| ManifestEntry {
                name: name.to_string(),
                shape: t.shape().to_vec(),
            })
            .collect(),
        meta,
    };
    let json = serde_json::to_vec(&manifest)?;
    out.write_all(&(json.len() as u64).to_le_bytes())?;
    out.write_all(&json)?;
    for (_, _, t) in params.iter() {
        for v in t.data() {
            out.write_all(&v.to_le_bytes())?;
        }
    }
    out.flush()?;
    Ok(())
}

/// Returns the parameters and the optional metadata blob stored alongside them.
pub fn read_checkpoint<R: Read>(mut input: R) -> Result<(ParamStore, Option<serde_json::Value>)> {
    let mut len = [0u8; 8];
    input.read_exact(&mut len)?;
    let len = u64::from_le_bytes(len) as usize;
    if len > 64 << 20 {
        return Err(GtpError::Checkpoint(format!("manifest length {len} is implausible")));
    }
    let mut json = vec![0u8; len];
    input.read_exact(&mut json)?;
    let manifest: Manifest = serde_json::from_slice(&json)?;
    if manifest.format != CHECKPOINT_FORMAT {
        return Err(GtpError::Checkpoint(format!(
            "unsupported format {:?}, expected {CHECKPOINT_FORMAT:?}",
            manifest.format
        )));
    }
    let mut store = ParamStore::new();
    let mut buf = [0u8; 8];
    for entry in manifest.params {
        let count: usize = entry.shape.iter().product();
        let mut data = Vec::with_capacity(count);
        for _ in 0..count {
            input.read_exact(&mut buf)?;
            data.push(f64::from_le_bytes(buf));
        }
        store.insert(entry.name, Tensor::new(entry.shape, data)?)?;
    }
    let mut rest = Vec::new();
    input.read_to_end(&mut rest)?;
    if !rest.is_empty() {
        return Err(GtpError::Checkpoint(format!("{} trailing bytes", rest.len())));
    }
    Ok((store, manifest.meta))
}

pub fn save_checkpoint(path: &Path, params: &ParamStore, meta: Option<serde_json::Value>) -> Result<()> {
    let file = std::fs::File::create(path)?;
    write_checkpoint(std::io::BufWriter::new(file), params, meta)
}

pub fn load_checkpoint(path: &Path) -> Result<(ParamStore, Option<serde_json::Value>)> {
    let file = std::fs::File::open(path)?;
    read_checkpoint(std::io::BufReader::new(file))
}
