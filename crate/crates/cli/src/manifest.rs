//! Run manifests: config hash, tool version and output checksums.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::time::Instant;

use serde::{Deserialize, Serialize};
use tokenwalk::io::{sha256_hex, write_atomic};

use crate::config::ExperimentConfig;
use crate::error::CliError;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub command: String,
    pub config_hash: String,
    pub tool_version: String,
    /// File name (relative to the manifest) to SHA-256.
    pub files: BTreeMap<String, String>,
    pub seeds: Vec<u64>,
    pub wall_clock_s: f64,
    /// The resolved configuration that produced the outputs.
    pub config: ExperimentConfig,
    /// Free-form values worth keeping next to the outputs (e.g. calibrated noise).
    #[serde(default, skip_serializing_if = "BTreeMap::is_empty")]
    pub notes: BTreeMap<String, serde_json::Value>,
}

/// Collects written files while a command runs, then writes the manifest.
pub struct Outputs {
    root: PathBuf,
    files: Vec<PathBuf>,
    notes: BTreeMap<String, serde_json::Value>,
    started: Instant,
}

impl Outputs {
    pub fn new(root: &Path) -> Result<Self, CliError> {
        std::fs::create_dir_all(root).map_err(CliError::io)?;
        Ok(Outputs {
            root: root.to_path_buf(),
            files: Vec::new(),
            notes: BTreeMap::new(),
            started: Instant::now(),
        })
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    pub fn path(&self, name: &str) -> PathBuf {
        self.root.join(name)
    }

    /// Registers a file written by library code.
    pub fn track(&mut self, path: PathBuf) {
        if !self.files.contains(&path) {
            self.files.push(path);
        }
    }

    pub fn write(&mut self, name: &str, bytes: &[u8]) -> Result<PathBuf, CliError> {
        let path = self.path(name);
        write_atomic(&path, bytes).map_err(CliError::io)?;
        self.track(path.clone());
        Ok(path)
    }

    pub fn write_json<T: Serialize>(&mut self, name: &str, value: &T) -> Result<PathBuf, CliError> {
        let text = serde_json::to_string_pretty(value).map_err(CliError::io)?;
        self.write(name, text.as_bytes())
    }

    pub fn note(&mut self, key: &str, value: impl Serialize) {
        self.notes
            .insert(key.to_string(), serde_json::to_value(value).expect("note serializes"));
    }

    /// Hashes every tracked file and writes `manifest_name` next to them.
    pub fn finish(self, command: &str, cfg: &ExperimentConfig, seeds: Vec<u64>, manifest_name: &str) -> Result<RunManifest, CliError> {
        let mut files = BTreeMap::new();
        for path in &self.files {
            let bytes = std::fs::read(path).map_err(CliError::io)?;
            let key = path
                .strip_prefix(&self.root)
                .unwrap_or(path)
                .to_string_lossy()
                .into_owned();
            files.insert(key, sha256_hex(&bytes));
        }
        let manifest = RunManifest {
            command: command.to_string(),
            config_hash: cfg.hash(),
            tool_version: env!("CARGO_PKG_VERSION").to_string(),
            files,
            seeds,
            wall_clock_s: self.started.elapsed().as_secs_f64(),
            config: cfg.clone(),
            notes: self.notes,
        };
        let text = serde_json::to_string_pretty(&manifest).map_err(CliError::io)?;
        write_atomic(&self.root.join(manifest_name), text.as_bytes()).map_err(CliError::io)?;
        Ok(manifest)
    }
}
