//! Run directory management and the run manifest. Every file a subcommand
//! emits is registered; the manifest is written last with a checksum
//! inventory, so a complete manifest certifies a complete run and a failed
//! run still leaves a manifest recording the failure.

use std::path::{Path, PathBuf};
use std::time::{SystemTime, UNIX_EPOCH};

use serde_json::json;
use sha2::{Digest, Sha256};

pub struct RunDir {
    root: PathBuf,
    files: Vec<String>,
    started_unix_ms: u128,
}

fn now_ms() -> u128 {
    SystemTime::now()
        .duration_since(UNIX_EPOCH)
        .map(|d| d.as_millis())
        .unwrap_or(0)
}

fn sha256_hex(bytes: &[u8]) -> String {
    let mut hasher = Sha256::new();
    hasher.update(bytes);
    format!("{:x}", hasher.finalize())
}

impl RunDir {
    pub fn create(root: &Path) -> std::io::Result<Self> {
        std::fs::create_dir_all(root)?;
        Ok(RunDir {
            root: root.to_path_buf(),
            files: Vec::new(),
            started_unix_ms: now_ms(),
        })
    }

    /// Write a file into the run directory and register it for the manifest.
    pub fn write(&mut self, rel: &str, contents: impl AsRef<[u8]>) -> std::io::Result<()> {
        let path = self.root.join(rel);
        if let Some(parent) = path.parent() {
            std::fs::create_dir_all(parent)?;
        }
        std::fs::write(&path, contents.as_ref())?;
        if !self.files.iter().any(|f| f == rel) {
            self.files.push(rel.to_string());
        }
        Ok(())
    }

    /// Write `manifest.json` last: config hash, artifact version,
    /// timestamps, completeness flag, and the checksum inventory of every
    /// registered file.
    pub fn finish(
        self,
        config_json: &str,
        complete: bool,
        error: Option<&str>,
    ) -> std::io::Result<()> {
        let mut inventory = Vec::new();
        for rel in &self.files {
            let bytes = std::fs::read(self.root.join(rel))?;
            inventory.push(json!({
                "path": rel,
                "bytes": bytes.len(),
                "sha256": sha256_hex(&bytes),
            }));
        }
        let manifest = json!({
            "artifact_version": env!("CARGO_PKG_VERSION"),
            "config_sha256": sha256_hex(config_json.as_bytes()),
            "started_unix_ms": self.started_unix_ms as u64,
            "finished_unix_ms": now_ms() as u64,
            "complete": complete,
            "error": error,
            "files": inventory,
        });
        std::fs::write(
            self.root.join("manifest.json"),
            serde_json::to_string_pretty(&manifest).expect("manifest serializes"),
        )
    }
}
