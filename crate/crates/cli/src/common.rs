use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use clap::Args;
use smarc_core::data::{Dataset, Split, SplitName};
use smarc_core::train::TrainConfig;
use smarc_core::SmarcError;

#[derive(Args, Debug, Clone)]
pub struct DataArgs {
    /// Dataset root laid out as `<root>/<class>/*.png|jpg`.
    #[arg(long, conflicts_with = "synthetic")]
    pub data: Option<PathBuf>,
    /// Use N generated textures per class instead of a directory.
    #[arg(long, value_name = "N")]
    pub synthetic: Option<usize>,
}

impl DataArgs {
    /// Problems with the data arguments, for up-front validation.
    pub fn problems(&self) -> Vec<String> {
        match (&self.data, self.synthetic) {
            (None, None) => vec!["one of --data or --synthetic is required".into()],
            (Some(d), _) if !d.is_dir() => vec![format!("data directory {} does not exist", d.display())],
            (_, Some(0)) => vec!["--synthetic needs at least 1 image per class".into()],
            _ => Vec::new(),
        }
    }

    /// Synthetic sets are seeded with the run seed so `eval` regenerates
    /// exactly the images `train` saw.
    pub fn load(&self, size: usize, seed: u64) -> Result<Dataset> {
        match (&self.data, self.synthetic) {
            (Some(d), _) => Dataset::from_dir(d, size).with_context(|| format!("loading dataset {}", d.display())),
            (None, Some(n)) => Ok(Dataset::synthetic(n, size, seed)?),
            (None, None) => bail!(SmarcError::Config(self.problems())),
        }
    }

    pub fn describe(&self) -> String {
        match (&self.data, self.synthetic) {
            (Some(d), _) => d.display().to_string(),
            (None, Some(n)) => format!("synthetic:{n}"),
            _ => String::new(),
        }
    }
}

/// Parse `key=value`, reading the value as TOML when possible and as a
/// bare string otherwise.
pub fn parse_override(s: &str) -> Result<(String, toml::Value), String> {
    let (k, v) = s.split_once('=').ok_or_else(|| format!("expected KEY=VALUE, got {s:?}"))?;
    let (k, v) = (k.trim(), v.trim());
    if k.is_empty() {
        return Err(format!("empty key in {s:?}"));
    }
    let value = format!("v = {v}")
        .parse::<toml::Table>()
        .ok()
        .and_then(|mut t| t.remove("v"))
        .unwrap_or_else(|| toml::Value::String(v.to_string()));
    Ok((k.to_string(), value))
}

/// Defaults, then the config file, then `--set` pairs, later winning.
pub fn resolve_config(
    desk: bool,
    file: Option<&Path>,
    overrides: &[(String, toml::Value)],
) -> Result<TrainConfig> {
    let mut flat = if desk { TrainConfig::desk() } else { TrainConfig::default() }.to_flat_table();
    if let Some(path) = file {
        let text = std::fs::read_to_string(path).with_context(|| format!("reading config {}", path.display()))?;
        let table: toml::Table = text
            .parse()
            .map_err(|e: toml::de::Error| SmarcError::Config(vec![format!("{}: {}", path.display(), e.message())]))?;
        flat.extend(table);
    }
    flat.extend(overrides.iter().cloned());
    Ok(TrainConfig::from_flat_table(&flat)?)
}

pub fn split_indices(split: &Split, name: SplitName) -> Vec<usize> {
    split.get(name).to_vec()
}

pub fn create_dir(dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))
}
