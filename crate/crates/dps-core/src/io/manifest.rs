//! Run manifests: tool version, command line, input hashes, seeds.

use std::collections::BTreeMap;
use std::path::Path;

use sha2::{Digest, Sha256};

use crate::error::{DpsError, Result};

#[derive(Debug, Clone, Default)]
pub struct RunManifest {
    pub tool_version: String,
    pub command_line: String,
    pub input_hashes: BTreeMap<String, String>,
    pub seeds: BTreeMap<String, u64>,
    pub timestamps: String,
}

impl RunManifest {
    pub fn new(command_line: String) -> Self {
        let now = std::time::SystemTime::now()
            .duration_since(std::time::UNIX_EPOCH)
            .map(|d| d.as_secs().to_string())
            .unwrap_or_default();
        RunManifest {
            tool_version: env!("CARGO_PKG_VERSION").to_string(),
            command_line,
            timestamps: now,
            ..Default::default()
        }
    }

    pub fn add_input(&mut self, name: &str, path: &Path) -> Result<()> {
        self.input_hashes
            .insert(name.to_string(), sha256_file(path)?);
        Ok(())
    }

    pub fn add_seed(&mut self, name: &str, seed: u64) {
        self.seeds.insert(name.to_string(), seed);
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        let mut out = String::new();
        out.push_str(&format!("tool_version = {}\n", self.tool_version));
        out.push_str(&format!("command_line = {}\n", self.command_line));
        out.push_str(&format!("timestamp_unix = {}\n", self.timestamps));
        for (name, hash) in &self.input_hashes {
            out.push_str(&format!("input.{name} = sha256:{hash}\n"));
        }
        for (name, seed) in &self.seeds {
            out.push_str(&format!("seed.{name} = {seed}\n"));
        }
        std::fs::write(path, out).map_err(|e| DpsError::io(path.display().to_string(), e))
    }
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    let mut hasher = Sha256::new();
    hasher.update(bytes);
    let digest = hasher.finalize();
    digest.iter().map(|b| format!("{b:02x}")).collect()
}

pub fn sha256_file(path: &Path) -> Result<String> {
    let bytes = std::fs::read(path).map_err(|e| DpsError::io(path.display().to_string(), e))?;
    Ok(sha256_hex(&bytes))
}
