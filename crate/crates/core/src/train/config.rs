//! Training configuration and its flat `key = value` file form.

use std::collections::BTreeSet;

use serde::{Deserialize, Serialize};
use toml::{Table, Value};

use crate::data::SplitSpec;
use crate::error::{Result, SmarcError};
use crate::loss::LossWeights;
use crate::model::ArchConfig;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    /// Head-only warm-up.
    pub phase_a_lr: f64,
    pub phase_a_epochs: usize,
    /// End-to-end fine-tuning; 0 epochs runs the warm-up alone.
    pub phase_b_lr: f64,
    pub phase_b_max_epochs: usize,
    pub batch_size: usize,
    /// Seeds weight init, epoch shuffles, augmentation and dropout.
    pub seed: u64,
    pub adam_beta1: f64,
    pub adam_beta2: f64,
    pub adam_eps: f64,
    pub plateau_patience: usize,
    pub plateau_factor: f64,
    pub min_lr: f64,
    pub early_stop_patience: usize,
    pub restore_best: bool,
    /// Absolute validation-accuracy gain that counts as an improvement.
    pub min_delta: f64,
    pub augment: bool,
    pub visible_fraction: f64,
    pub arch: ArchConfig,
    pub loss: LossWeights,
    pub split: SplitSpec,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            phase_a_lr: 2e-4,
            phase_a_epochs: 10,
            phase_b_lr: 1e-4,
            phase_b_max_epochs: 150,
            batch_size: 16,
            seed: 42,
            adam_beta1: 0.9,
            adam_beta2: 0.999,
            adam_eps: 1e-8,
            plateau_patience: 8,
            plateau_factor: 0.5,
            min_lr: 1e-6,
            early_stop_patience: 18,
            restore_best: true,
            min_delta: 1e-6,
            augment: true,
            visible_fraction: 0.10,
            arch: ArchConfig::default(),
            loss: LossWeights::default(),
            split: SplitSpec::default(),
        }
    }
}

/// Nested sections whose fields appear at the top level of the flat form.
const SECTIONS: [&str; 3] = ["arch", "loss", "split"];

fn keys_of<S: Serialize>(v: &S) -> BTreeSet<String> {
    Table::try_from(v).map(|t| t.keys().cloned().collect()).unwrap_or_default()
}

impl TrainConfig {
    /// Desk-scale defaults: 64×64 input with base width 16.
    pub fn desk() -> Self {
        Self {
            arch: ArchConfig::desk(),
            ..Self::default()
        }
    }

    /// Every problem with the configuration, not just the first.
    pub fn validation_errors(&self) -> Vec<String> {
        let mut e = Vec::new();
        for (name, lr) in [("phase_a_lr", self.phase_a_lr), ("phase_b_lr", self.phase_b_lr)] {
            if !(lr > 0.0 && lr.is_finite()) {
                e.push(format!("{name} {lr} must be finite and > 0"));
            } else if self.min_lr >= lr {
                e.push(format!("min_lr {} must be below {name} {lr}", self.min_lr));
            }
        }
        if !(self.min_lr >= 0.0 && self.min_lr.is_finite()) {
            e.push(format!("min_lr {} must be finite and >= 0", self.min_lr));
        }
        if self.batch_size == 0 {
            e.push("batch_size must be >= 1".into());
        }
        for (name, b) in [("adam_beta1", self.adam_beta1), ("adam_beta2", self.adam_beta2)] {
            if !(0.0..1.0).contains(&b) {
                e.push(format!("{name} {b} must be in [0, 1)"));
            }
        }
        if !(self.adam_eps > 0.0 && self.adam_eps.is_finite()) {
            e.push(format!("adam_eps {} must be finite and > 0", self.adam_eps));
        }
        if !(self.plateau_factor > 0.0 && self.plateau_factor < 1.0) {
            e.push(format!("plateau_factor {} must be in (0, 1)", self.plateau_factor));
        }
        if self.plateau_patience == 0 {
            e.push("plateau_patience must be >= 1".into());
        }
        if self.early_stop_patience == 0 {
            e.push("early_stop_patience must be >= 1".into());
        }
        if !(self.min_delta >= 0.0 && self.min_delta.is_finite()) {
            e.push(format!("min_delta {} must be finite and >= 0", self.min_delta));
        }
        if !(self.visible_fraction > 0.0 && self.visible_fraction <= 1.0) {
            e.push(format!("visible_fraction {} must be in (0, 1]", self.visible_fraction));
        }
        if let Err(SmarcError::Config(arch)) = self.arch.validate() {
            e.extend(arch);
        }
        e.extend(self.loss.validation_errors());
        e.extend(self.split.validation_errors());
        e
    }

    pub fn validate(&self) -> Result<()> {
        let errs = self.validation_errors();
        if errs.is_empty() {
            Ok(())
        } else {
            Err(SmarcError::Config(errs))
        }
    }

    /// All fields as one flat table (section fields hoisted to the top).
    pub fn to_flat_table(&self) -> Table {
        let mut t = Table::try_from(self).expect("config serialises to a table");
        for s in SECTIONS {
            if let Some(Value::Table(inner)) = t.remove(s) {
                t.extend(inner);
            }
        }
        t
    }

    pub fn to_flat_toml(&self) -> String {
        toml::to_string(&self.to_flat_table()).expect("flat table serialises")
    }

    /// Build from a flat table; keys not given keep their defaults.
    /// Unknown keys are all reported together.
    pub fn from_flat_table(flat: &Table) -> Result<Self> {
        let d = Self::default();
        let owners = [
            ("arch", keys_of(&d.arch)),
            ("loss", keys_of(&d.loss)),
            ("split", keys_of(&d.split)),
        ];
        let top: BTreeSet<String> = keys_of(&d).into_iter().filter(|k| !SECTIONS.contains(&k.as_str())).collect();

        let mut nested = Table::new();
        let mut unknown = Vec::new();
        for (k, v) in flat {
            if top.contains(k) {
                nested.insert(k.clone(), v.clone());
            } else if let Some((section, _)) = owners.iter().find(|(_, keys)| keys.contains(k)) {
                let entry = nested
                    .entry(section.to_string())
                    .or_insert_with(|| Value::Table(Table::new()));
                if let Value::Table(t) = entry {
                    t.insert(k.clone(), v.clone());
                }
            } else {
                unknown.push(format!("unknown config key {k:?}"));
            }
        }
        if !unknown.is_empty() {
            return Err(SmarcError::Config(unknown));
        }
        Value::Table(nested)
            .try_into()
            .map_err(|e: toml::de::Error| SmarcError::Config(vec![e.message().to_string()]))
    }

    pub fn from_flat_toml(text: &str) -> Result<Self> {
        let t: Table = text
            .parse()
            .map_err(|e: toml::de::Error| SmarcError::Config(vec![format!("config syntax: {}", e.message())]))?;
        Self::from_flat_table(&t)
    }
}
