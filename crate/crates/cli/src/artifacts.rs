//! Content hashes and the per-run manifest.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{Context, Result};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

pub const RUN_MANIFEST: &str = "run_manifest.json";

/// Everything needed to repeat a command.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub command: String,
    pub argv: Vec<String>,
    pub config_path: Option<PathBuf>,
    pub seed: u64,
    pub out_dir: PathBuf,
    /// Effective configuration after file, overrides and flags.
    pub config: serde_json::Value,
    /// SHA-256 of every input file, keyed by path.
    pub inputs: BTreeMap<String, String>,
    /// SHA-256 of every file written, keyed by path relative to `out_dir`.
    pub outputs: BTreeMap<String, String>,
}

pub fn sha256_file(path: &Path) -> Result<String> {
    let bytes = fs::read(path).with_context(|| format!("hashing {}", path.display()))?;
    Ok(hex::encode(Sha256::digest(&bytes)))
}

fn walk(dir: &Path, out: &mut Vec<PathBuf>) -> Result<()> {
    let mut entries: Vec<PathBuf> = fs::read_dir(dir)
        .with_context(|| format!("listing {}", dir.display()))?
        .map(|e| e.map(|e| e.path()))
        .collect::<std::io::Result<_>>()?;
    entries.sort();
    for p in entries {
        if p.is_dir() {
            walk(&p, out)?;
        } else {
            out.push(p);
        }
    }
    Ok(())
}

/// Hashes of every file under `root` (or `root` itself if it is a file),
/// keyed by path relative to `root`'s parent or `root`.
pub fn hash_tree(root: &Path, skip: &[&str]) -> Result<BTreeMap<String, String>> {
    let mut files = Vec::new();
    if root.is_file() {
        files.push(root.to_path_buf());
    } else {
        walk(root, &mut files)?;
    }
    let mut out = BTreeMap::new();
    for f in files {
        let key = if root.is_file() {
            f.display().to_string()
        } else {
            f.strip_prefix(root).unwrap_or(&f).to_string_lossy().replace('\\', "/")
        };
        if skip.contains(&key.as_str()) {
            continue;
        }
        out.insert(key, sha256_file(&f)?);
    }
    Ok(out)
}

/// Hashes of a list of input files or directories.
pub fn hash_inputs(paths: &[&Path]) -> Result<BTreeMap<String, String>> {
    let mut out = BTreeMap::new();
    for p in paths {
        if p.is_file() {
            out.insert(p.display().to_string(), sha256_file(p)?);
        } else {
            for (k, v) in hash_tree(p, &[])? {
                out.insert(format!("{}/{k}", p.display()), v);
            }
        }
    }
    Ok(out)
}

impl RunManifest {
    /// Fills `outputs` from the contents of `out_dir` and writes the manifest there.
    pub fn finish(mut self) -> Result<Self> {
        self.outputs = hash_tree(&self.out_dir, &[RUN_MANIFEST])?;
        let path = self.out_dir.join(RUN_MANIFEST);
        fs::write(&path, serde_json::to_string_pretty(&self)?)
            .with_context(|| format!("writing {}", path.display()))?;
        Ok(self)
    }
}
