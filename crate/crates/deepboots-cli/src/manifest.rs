//! Run manifests: one JSON document per invocation recording the resolved
//! configuration, dataset fingerprint and artifact paths.

use std::path::{Path, PathBuf};

use serde::Serialize;
use sha2::{Digest, Sha256};

#[derive(Debug, Serialize)]
pub struct RunManifest {
    pub command: String,
    /// All defaults materialized, so a replay needs no implicit state.
    pub config: serde_json::Value,
    pub seed: u64,
    /// SHA-256 of the dataset file bytes, when a dataset was read.
    pub dataset_fingerprint: Option<String>,
    pub artifacts: Vec<String>,
    pub wall_seconds: f64,
}

impl RunManifest {
    pub fn write(&self, out_dir: &Path) -> std::io::Result<PathBuf> {
        let path = out_dir.join("manifest.json");
        std::fs::write(
            &path,
            serde_json::to_string_pretty(self).expect("manifest serializes"),
        )?;
        Ok(path)
    }
}

pub fn fingerprint_file(path: &Path) -> std::io::Result<String> {
    let bytes = std::fs::read(path)?;
    let mut hasher = Sha256::new();
    hasher.update(&bytes);
    Ok(format!("{:x}", hasher.finalize()))
}

/// Output directory: `--out` flag, else `$DEEPBOOTS_OUT`, else
/// `./deepboots-out`. Created if absent.
pub fn resolve_out_dir(flag: Option<PathBuf>) -> std::io::Result<PathBuf> {
    let dir = flag
        .or_else(|| std::env::var_os("DEEPBOOTS_OUT").map(PathBuf::from))
        .unwrap_or_else(|| PathBuf::from("deepboots-out"));
    std::fs::create_dir_all(&dir)?;
    Ok(dir)
}
