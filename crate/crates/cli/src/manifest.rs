//! Per-run manifest: command line, config snapshot, seed and a SHA-256 of
//! every artifact written.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use serde::Serialize;
use sha2::{Digest, Sha256};

use garnn::{Error, Result};

pub const MANIFEST_FILE: &str = "manifest.json";
pub const CONFIG_SNAPSHOT: &str = "config.txt";

#[derive(Debug, Serialize)]
pub struct Manifest {
    pub command: String,
    pub args: Vec<String>,
    pub seed: u64,
    /// Snapshot file, readable with `--config`.
    pub config: String,
    /// File name → lowercase hex SHA-256.
    pub artifacts: BTreeMap<String, String>,
}

/// Collects artifacts written into one output directory.
pub struct Outputs {
    dir: PathBuf,
    written: Vec<String>,
}

impl Outputs {
    pub fn create(dir: &Path) -> Result<Self> {
        std::fs::create_dir_all(dir).map_err(|e| Error::Io {
            path: dir.into(),
            source: e,
        })?;
        Ok(Outputs {
            dir: dir.to_path_buf(),
            written: Vec::new(),
        })
    }

    pub fn path(&self, name: &str) -> PathBuf {
        self.dir.join(name)
    }

    pub fn write(&mut self, name: &str, contents: impl AsRef<[u8]>) -> Result<()> {
        let path = self.path(name);
        std::fs::write(&path, contents).map_err(|e| Error::Io { path, source: e })?;
        self.record(name);
        Ok(())
    }

    /// Registers a file some other routine already wrote.
    pub fn record(&mut self, name: &str) {
        if !self.written.iter().any(|n| n == name) {
            self.written.push(name.to_string());
        }
    }

    pub fn finish(mut self, command: &str, seed: u64, config_text: &str) -> Result<Manifest> {
        self.write(CONFIG_SNAPSHOT, config_text)?;
        let mut artifacts = BTreeMap::new();
        for name in &self.written {
            let path = self.path(name);
            let bytes = std::fs::read(&path).map_err(|e| Error::Io { path, source: e })?;
            artifacts.insert(name.clone(), format!("{:x}", Sha256::digest(&bytes)));
        }
        let manifest = Manifest {
            command: command.to_string(),
            args: std::env::args().skip(1).collect(),
            seed,
            config: CONFIG_SNAPSHOT.to_string(),
            artifacts,
        };
        let text = serde_json::to_string_pretty(&manifest)?;
        let path = self.path(MANIFEST_FILE);
        std::fs::write(&path, text).map_err(|e| Error::Io { path, source: e })?;
        Ok(manifest)
    }
}
