use std::fs;
use std::path::{Path, PathBuf};

use anyhow::Context;
use serde::Serialize;
use sha2::{Digest, Sha256};

pub const MANIFEST_FILE: &str = "run_manifest.json";

#[derive(Debug, Serialize)]
pub struct RunManifest {
    pub command: String,
    pub code_version: String,
    pub config_hash: String,
    pub seed: u64,
    pub template_version: String,
    #[serde(skip_serializing_if = "serde_json::Value::is_null")]
    pub extra: serde_json::Value,
    pub artifacts: Vec<Artifact>,
}

#[derive(Debug, Serialize)]
pub struct Artifact {
    /// Relative to the directory holding the manifest.
    pub path: String,
    pub bytes: u64,
    pub sha256: String,
}

fn collect(dir: &Path, root: &Path, out: &mut Vec<PathBuf>) -> std::io::Result<()> {
    for entry in fs::read_dir(dir)? {
        let path = entry?.path();
        if path.is_dir() {
            collect(&path, root, out)?;
        } else if path.strip_prefix(root).ok() != Some(Path::new(MANIFEST_FILE)) {
            out.push(path);
        }
    }
    Ok(())
}

/// Hashes every file under `dir` into `dir/run_manifest.json`.
pub fn write_manifest(dir: &Path, mut manifest: RunManifest) -> anyhow::Result<()> {
    let mut files = Vec::new();
    collect(dir, dir, &mut files).with_context(|| format!("listing {}", dir.display()))?;
    files.sort();
    for f in files {
        let bytes = fs::read(&f).with_context(|| format!("reading {}", f.display()))?;
        let rel = f.strip_prefix(dir).expect("under dir");
        let path = rel.components().map(|c| c.as_os_str().to_string_lossy()).collect::<Vec<_>>().join("/");
        manifest.artifacts.push(Artifact { path, bytes: bytes.len() as u64, sha256: hex::encode(Sha256::digest(&bytes)) });
    }
    let path = dir.join(MANIFEST_FILE);
    let mut text = serde_json::to_string_pretty(&manifest)?;
    text.push('\n');
    fs::write(&path, text).with_context(|| format!("writing {}", path.display()))
}
