//! Experiment manifest: one TOML document with nested sections, plus
//! `section.key=value` overrides.
//!
//! ```toml
//! seed = 7
//! out = "runs/cp"
//! jobs = 1
//!
//! [[stages]]
//! probe_rp = 1
//! gallery_rp = 2
//!
//! [synth]
//! num_identities = 214
//! drift_sigma = [0.9, 0.9, 0.45]
//!
//! [train]
//! loss = "quadruplet"
//! epochs = 20
//! ```
//!
//! The root `seed` fans out to the `synth` and `train` sections; their own
//! `seed` keys are overwritten.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::eval::StagePair;
use crate::seed::derive_seed;
use crate::synth::SynthConfig;
use crate::trainer::TrainConfig;

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataConfig {
    /// Embedding file; defaults to `<out>/dataset.csv`.
    pub path: Option<PathBuf>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub seed: u64,
    pub out: PathBuf,
    pub jobs: usize,
    pub data: DataConfig,
    pub stages: Vec<StagePair>,
    pub synth: SynthConfig,
    pub train: TrainConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            out: PathBuf::from("runs/default"),
            jobs: 1,
            data: DataConfig { path: None },
            stages: vec![
                StagePair {
                    probe_rp: 1,
                    gallery_rp: 2,
                },
                StagePair {
                    probe_rp: 2,
                    gallery_rp: 3,
                },
            ],
            synth: SynthConfig::default(),
            train: TrainConfig::default(),
        }
    }
}

fn parse_value(raw: &str) -> toml::Value {
    match toml::from_str::<toml::Table>(&format!("v = {raw}")) {
        Ok(mut t) => t.remove("v").unwrap_or_else(|| toml::Value::String(raw.to_string())),
        Err(_) => toml::Value::String(raw.to_string()),
    }
}

/// Applies one `a.b.c=value` override; `value` is read as a TOML literal and
/// falls back to a bare string.
pub fn apply_override(doc: &mut toml::Table, assignment: &str) -> Result<()> {
    let (key, raw) = assignment
        .split_once('=')
        .ok_or_else(|| Error::InvalidConfig(format!("override {assignment:?} is not key=value")))?;
    let path: Vec<&str> = key.trim().split('.').collect();
    if path.iter().any(|p| p.is_empty()) {
        return Err(Error::InvalidConfig(format!("bad override key {key:?}")));
    }
    let (last, parents) = path.split_last().expect("non-empty path");
    let mut table = doc;
    for part in parents {
        let entry = table
            .entry(part.to_string())
            .or_insert_with(|| toml::Value::Table(toml::Table::new()));
        table = entry
            .as_table_mut()
            .ok_or_else(|| Error::InvalidConfig(format!("override {key:?}: {part} is not a section")))?;
    }
    table.insert(last.to_string(), parse_value(raw.trim()));
    Ok(())
}

impl RunConfig {
    pub fn from_toml(text: &str, overrides: &[String]) -> Result<Self> {
        let mut doc: toml::Table = toml::from_str(text).map_err(|e| Error::InvalidConfig(e.to_string()))?;
        for o in overrides {
            apply_override(&mut doc, o)?;
        }
        let config: RunConfig = doc.try_into().map_err(|e: toml::de::Error| Error::InvalidConfig(e.to_string()))?;
        config.validate()?;
        Ok(config)
    }

    /// Reads the manifest at `path` (or starts from defaults) and applies overrides.
    pub fn load(path: Option<&Path>, overrides: &[String]) -> Result<Self> {
        let text = match path {
            Some(p) => fs::read_to_string(p)
                .map_err(|e| Error::InvalidConfig(format!("cannot read config {}: {e}", p.display())))?,
            None => String::new(),
        };
        Self::from_toml(&text, overrides)
    }

    pub fn validate(&self) -> Result<()> {
        if self.stages.is_empty() {
            return Err(Error::InvalidConfig("no stages configured".into()));
        }
        for s in &self.stages {
            StagePair::new(s.probe_rp, s.gallery_rp)?;
        }
        if self.jobs == 0 {
            return Err(Error::InvalidConfig("jobs must be >= 1".into()));
        }
        self.train.validate()
    }

    pub fn data_path(&self) -> PathBuf {
        self.data.path.clone().unwrap_or_else(|| self.out.join("dataset.csv"))
    }

    /// Synthetic-data section with its seed derived from the root seed.
    pub fn synth_config(&self) -> SynthConfig {
        SynthConfig {
            seed: derive_seed(self.seed, "synth"),
            ..self.synth.clone()
        }
    }

    /// Training section with its seed derived from the root seed.
    pub fn train_config(&self) -> TrainConfig {
        TrainConfig {
            seed: derive_seed(self.seed, "train"),
            ..self.train.clone()
        }
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::InvalidConfig(e.to_string()))
    }
}
