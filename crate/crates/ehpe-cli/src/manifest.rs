//! Run manifests: every command records what it ran, what it read, and the
//! content hash of every artifact it wrote, so identical inputs are checkable
//! for identical outputs.

use std::path::Path;
use std::time::{SystemTime, UNIX_EPOCH};

use serde::Serialize;
use sha2::{Digest, Sha256};

use ehpe_core::checkpoint::file_sha256;
use ehpe_core::{Error, Result};

#[derive(Serialize)]
pub struct Artifact {
    pub path: String,
    pub sha256: String,
}

/// Record of one command invocation.
#[derive(Serialize)]
pub struct RunManifest {
    pub command: String,
    pub tool_version: String,
    pub started_unix_ms: u64,
    pub finished_unix_ms: u64,
    /// Hash of the effective configuration document, when the command has one.
    pub config_sha256: Option<String>,
    /// Hash of the input dataset file, when the command reads one.
    pub dataset_sha256: Option<String>,
    /// Every file the command wrote, with its content hash.
    pub artifacts: Vec<Artifact>,
}

fn now_ms() -> u64 {
    SystemTime::now().duration_since(UNIX_EPOCH).map(|d| d.as_millis() as u64).unwrap_or(0)
}

pub fn hash_bytes_hex(bytes: &[u8]) -> String {
    let mut h = Sha256::new();
    h.update(bytes);
    hex::encode(h.finalize())
}

pub fn hash_file_hex(path: &Path) -> Result<String> {
    Ok(hex::encode(file_sha256(path)?))
}

impl RunManifest {
    pub fn start(command: impl Into<String>) -> RunManifest {
        RunManifest {
            command: command.into(),
            tool_version: env!("CARGO_PKG_VERSION").to_string(),
            started_unix_ms: now_ms(),
            finished_unix_ms: 0,
            config_sha256: None,
            dataset_sha256: None,
            artifacts: Vec::new(),
        }
    }

    pub fn set_config_bytes(&mut self, bytes: &[u8]) {
        self.config_sha256 = Some(hash_bytes_hex(bytes));
    }

    pub fn set_dataset(&mut self, path: &Path) -> Result<()> {
        self.dataset_sha256 = Some(hash_file_hex(path)?);
        Ok(())
    }

    /// Hashes a file the command wrote and lists it.
    pub fn add_artifact(&mut self, path: &Path) -> Result<()> {
        self.artifacts.push(Artifact {
            path: path.display().to_string(),
            sha256: hash_file_hex(path)?,
        });
        Ok(())
    }

    /// Stamps the end time and renders the manifest as pretty JSON.
    pub fn finish(mut self) -> String {
        self.finished_unix_ms = now_ms();
        serde_json::to_string_pretty(&self).expect("manifest serializes")
    }
}

/// Writes `content` to `path`, creating parent directories as needed.
pub fn write_text(path: &Path, content: &str) -> Result<()> {
    if let Some(dir) = path.parent() {
        if !dir.as_os_str().is_empty() {
            std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        }
    }
    std::fs::write(path, content).map_err(|e| Error::io(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;
    use tempfile::TempDir;

    #[test]
    fn manifest_lists_artifacts_with_content_hashes() {
        let dir = TempDir::new().unwrap();
        let f = dir.path().join("out.bin");
        std::fs::write(&f, b"hello").unwrap();

        let mut m = RunManifest::start("gen-data");
        m.set_config_bytes(b"{}");
        m.add_artifact(&f).unwrap();
        let json = m.finish();

        let v: serde_json::Value = serde_json::from_str(&json).unwrap();
        assert_eq!(v["command"], "gen-data");
        assert_eq!(v["artifacts"][0]["sha256"], hash_bytes_hex(b"hello"));
        assert!(v["finished_unix_ms"].as_u64().unwrap() >= v["started_unix_ms"].as_u64().unwrap());
    }

    #[test]
    fn identical_bytes_hash_identically() {
        let dir = TempDir::new().unwrap();
        let a = dir.path().join("a");
        let b = dir.path().join("b");
        std::fs::write(&a, b"same").unwrap();
        std::fs::write(&b, b"same").unwrap();
        assert_eq!(hash_file_hex(&a).unwrap(), hash_file_hex(&b).unwrap());
        assert_eq!(hash_file_hex(&a).unwrap(), hash_bytes_hex(b"same"));
    }
}
