//! Versioned binary checkpoints.
//!
//! Layout: 8-byte magic, `u32` schema version, `u64` header length, a JSON
//! header, then every tensor as little-endian `f64` in header order.

use std::fs;
use std::io::Write;
use std::path::Path;

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{Model, ModelConfig};
use crate::params::ParamStore;
use crate::train::OptimizerState;

pub const MAGIC: &[u8; 8] = b"MMFUSECK";
pub const SCHEMA_VERSION: u32 = 1;

const OPT_M: &str = "opt.m.";
const OPT_V: &str = "opt.v.";

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub model: Model,
    /// Last completed iteration of the stage that wrote the checkpoint.
    pub iteration: usize,
    pub optimizer: Option<OptimizerState>,
    /// Free-form provenance (train config, stage, ...).
    pub metadata: serde_json::Value,
}

#[derive(Debug, Serialize, Deserialize)]
struct TensorEntry {
    name: String,
    rows: usize,
    cols: usize,
}

#[derive(Debug, Serialize, Deserialize)]
struct Header {
    config: ModelConfig,
    iteration: usize,
    optimizer_step: Option<u64>,
    metadata: serde_json::Value,
    tensors: Vec<TensorEntry>,
}

pub fn checkpoint_to_bytes(ck: &Checkpoint) -> Result<Vec<u8>> {
    let mut tensors: Vec<(String, &Array2<f64>)> = ck
        .model
        .params
        .iter()
        .map(|(k, v)| (k.to_string(), v))
        .collect();
    if let Some(opt) = &ck.optimizer {
        tensors.extend(opt.m.iter().map(|(k, v)| (format!("{OPT_M}{k}"), v)));
        tensors.extend(opt.v.iter().map(|(k, v)| (format!("{OPT_V}{k}"), v)));
    }
    let header = Header {
        config: ck.model.config.clone(),
        iteration: ck.iteration,
        optimizer_step: ck.optimizer.as_ref().map(|o| o.step),
        metadata: ck.metadata.clone(),
        tensors: tensors
            .iter()
            .map(|(name, v)| TensorEntry {
                name: name.clone(),
                rows: v.nrows(),
                cols: v.ncols(),
            })
            .collect(),
    };
    let header = serde_json::to_vec(&header)?;
    let n: usize = tensors.iter().map(|(_, v)| v.len()).sum();
    let mut out = Vec::with_capacity(20 + header.len() + 8 * n);
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&SCHEMA_VERSION.to_le_bytes());
    out.extend_from_slice(&(header.len() as u64).to_le_bytes());
    out.extend_from_slice(&header);
    for (_, v) in &tensors {
        for x in v.iter() {
            out.extend_from_slice(&x.to_le_bytes());
        }
    }
    Ok(out)
}

fn take<'a>(bytes: &'a [u8], pos: &mut usize, n: usize, what: &str) -> Result<&'a [u8]> {
    let end = pos
        .checked_add(n)
        .filter(|&e| e <= bytes.len())
        .ok_or_else(|| Error::Checkpoint(format!("file truncated while reading {what}")))?;
    let s = &bytes[*pos..end];
    *pos = end;
    Ok(s)
}

pub fn checkpoint_from_bytes(bytes: &[u8]) -> Result<Checkpoint> {
    let mut pos = 0;
    if take(bytes, &mut pos, 8, "magic")? != MAGIC {
        return Err(Error::Checkpoint("not a checkpoint file (bad magic)".into()));
    }
    let version = u32::from_le_bytes(take(bytes, &mut pos, 4, "version")?.try_into().expect("4 bytes"));
    if version != SCHEMA_VERSION {
        return Err(Error::Checkpoint(format!(
            "schema version {version} unsupported (expected {SCHEMA_VERSION})"
        )));
    }
    let hlen = u64::from_le_bytes(take(bytes, &mut pos, 8, "header length")?.try_into().expect("8 bytes"));
    let hlen = usize::try_from(hlen).map_err(|_| Error::Checkpoint("header length overflows".into()))?;
    let header: Header = serde_json::from_slice(take(bytes, &mut pos, hlen, "header")?)
        .map_err(|e| Error::Checkpoint(format!("bad header: {e}")))?;

    let mut params = ParamStore::new();
    let mut m = ParamStore::new();
    let mut v = ParamStore::new();
    for t in &header.tensors {
        let n = t.rows.checked_mul(t.cols).ok_or_else(|| Error::Checkpoint("tensor too large".into()))?;
        let raw = take(bytes, &mut pos, n.saturating_mul(8), &t.name)?;
        let data: Vec<f64> = raw
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
            .collect();
        let arr = Array2::from_shape_vec((t.rows, t.cols), data).expect("sized above");
        if let Some(rest) = t.name.strip_prefix(OPT_M) {
            m.insert(rest, arr);
        } else if let Some(rest) = t.name.strip_prefix(OPT_V) {
            v.insert(rest, arr);
        } else {
            params.insert(t.name.clone(), arr);
        }
    }
    if pos != bytes.len() {
        return Err(Error::Checkpoint(format!(
            "{} trailing bytes after the last tensor",
            bytes.len() - pos
        )));
    }
    let model = Model::from_parts(header.config, params)
        .map_err(|e| Error::Checkpoint(format!("inconsistent parameters: {e}")))?;
    Ok(Checkpoint {
        model,
        iteration: header.iteration,
        optimizer: header.optimizer_step.map(|step| OptimizerState { step, m, v }),
        metadata: header.metadata,
    })
}

/// Writes via a temporary sibling and a rename.
pub fn save_checkpoint(path: &Path, ck: &Checkpoint) -> Result<()> {
    let bytes = checkpoint_to_bytes(ck)?;
    let tmp = path.with_extension("tmp");
    {
        let mut f = fs::File::create(&tmp)?;
        f.write_all(&bytes)?;
        f.sync_all()?;
    }
    fs::rename(&tmp, path)?;
    Ok(())
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    let bytes = fs::read(path)
        .map_err(|e| Error::Checkpoint(format!("cannot read {}: {e}", path.display())))?;
    checkpoint_from_bytes(&bytes)
}
