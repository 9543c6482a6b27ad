//! Machine-readable run manifest: config hash, schema versions, and content
//! hashes of every input file, so a run directory is self-describing.

use anyhow::Result;
use serde::Serialize;
use sha2::{Digest, Sha256};
use std::path::{Path, PathBuf};

#[derive(Debug, Serialize)]
pub struct RunManifest {
    pub command: String,
    pub config_schema_version: u32,
    pub rounds_schema_version: u32,
    pub master_seed: u64,
    /// SHA-256 of the raw config file bytes.
    pub config_sha256: String,
    /// SHA-256 per input data file (path -> hex digest).
    pub input_sha256: Vec<FileHash>,
    pub package_version: String,
}

#[derive(Debug, Serialize)]
pub struct FileHash {
    pub path: String,
    pub sha256: String,
}

fn sha256_hex(bytes: &[u8]) -> String {
    let mut hasher = Sha256::new();
    hasher.update(bytes);
    let digest = hasher.finalize();
    let mut out = String::with_capacity(64);
    for byte in digest {
        out.push_str(&format!("{byte:02x}"));
    }
    out
}

pub fn write_manifest(
    out_dir: &Path,
    command: &str,
    master_seed: u64,
    raw_config: &[u8],
    input_files: &[PathBuf],
) -> Result<()> {
    let mut input_sha256 = Vec::new();
    for path in input_files {
        let bytes = std::fs::read(path)?;
        input_sha256.push(FileHash {
            path: path.display().to_string(),
            sha256: sha256_hex(&bytes),
        });
    }
    let manifest = RunManifest {
        command: command.to_string(),
        config_schema_version: crate::config::CONFIG_SCHEMA_VERSION,
        rounds_schema_version: dpfl_core::fl::ROUNDS_SCHEMA_VERSION,
        master_seed,
        config_sha256: sha256_hex(raw_config),
        input_sha256,
        package_version: env!("CARGO_PKG_VERSION").to_string(),
    };
    let json = serde_json::to_string_pretty(&manifest)?;
    crate::commands::write_atomic(&out_dir.join("run_manifest.json"), json.as_bytes())?;
    Ok(())
}
