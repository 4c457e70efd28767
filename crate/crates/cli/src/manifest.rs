//! Artifact manifest: every file a command writes, with its SHA-256.

use mfchain::error::Result;
use sha2::{Digest, Sha256};
use std::fs;
use std::path::{Path, PathBuf};

pub struct Manifest {
    out_dir: PathBuf,
    entries: Vec<(String, String)>,
}

impl Manifest {
    pub fn new(out_dir: &Path) -> Result<Self> {
        fs::create_dir_all(out_dir)?;
        Ok(Manifest {
            out_dir: out_dir.to_path_buf(),
            entries: Vec::new(),
        })
    }

    /// Write an artifact and record its digest.
    pub fn write(&mut self, name: &str, bytes: &[u8]) -> Result<()> {
        let path = self.out_dir.join(name);
        fs::write(&path, bytes)?;
        let mut hasher = Sha256::new();
        hasher.update(bytes);
        let digest = hasher.finalize();
        let hex: String = digest.iter().map(|b| format!("{b:02x}")).collect();
        self.entries.push((name.to_string(), hex));
        Ok(())
    }

    /// Write `manifest.json` listing artifacts sorted by name.
    pub fn finish(mut self) -> Result<()> {
        self.entries.sort();
        let artifacts: Vec<serde_json::Value> = self
            .entries
            .iter()
            .map(|(path, sha256)| serde_json::json!({ "path": path, "sha256": sha256 }))
            .collect();
        let doc = serde_json::json!({ "artifacts": artifacts });
        let text = serde_json::to_string_pretty(&doc).expect("manifest serialization");
        fs::write(self.out_dir.join("manifest.json"), text)?;
        Ok(())
    }
}
