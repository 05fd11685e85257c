use std::path::{Path, PathBuf};
use std::time::{SystemTime, UNIX_EPOCH};

use anyhow::{Context, Result};
use serde::Serialize;
use toml::Table;

/// One record per command invocation, written beside its outputs.
#[derive(Debug, Serialize)]
pub struct RunManifest {
    pub command: String,
    pub tool_version: String,
    pub seed: Option<u64>,
    pub started_unix_s: u64,
    pub inputs: Vec<String>,
    pub outputs: Vec<String>,
    /// Resolved settings the command ran with.
    pub config: Table,
    /// Wall-clock seconds per stage.
    pub timings: Table,
}

impl RunManifest {
    pub fn new(command: &str) -> Self {
        Self {
            command: command.to_string(),
            tool_version: env!("CARGO_PKG_VERSION").to_string(),
            seed: None,
            started_unix_s: SystemTime::now().duration_since(UNIX_EPOCH).map(|d| d.as_secs()).unwrap_or(0),
            inputs: Vec::new(),
            outputs: Vec::new(),
            config: Table::new(),
            timings: Table::new(),
        }
    }

    pub fn input(&mut self, p: impl AsRef<Path>) {
        self.inputs.push(p.as_ref().display().to_string());
    }

    pub fn output(&mut self, p: impl AsRef<Path>) {
        self.outputs.push(p.as_ref().display().to_string());
    }

    pub fn set(&mut self, key: &str, value: impl Into<toml::Value>) {
        self.config.insert(key.to_string(), value.into());
    }

    pub fn time(&mut self, stage: &str, seconds: f64) {
        self.timings.insert(stage.to_string(), seconds.into());
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        let text = toml::to_string(self).context("serialising run manifest")?;
        std::fs::write(path, text).with_context(|| format!("writing {}", path.display()))
    }
}

/// `<dir>/run_manifest.toml`.
pub fn manifest_in(dir: &Path) -> PathBuf {
    dir.join("run_manifest.toml")
}

/// `<file>.manifest.toml`, for commands whose output is a single file.
pub fn manifest_beside(file: &Path) -> PathBuf {
    let mut name = file.file_name().unwrap_or_default().to_os_string();
    name.push(".manifest.toml");
    file.with_file_name(name)
}
