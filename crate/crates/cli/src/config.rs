use std::path::{Path, PathBuf};

use anyhow::{Context, Result};
use grayrank_core::trainer::ObjectiveMode;
use grayrank_core::{
    BeamParams, Bm25Params, DualEncoderConfig, GrayscaleConfig, MetricConfig, NGramParams, SyntheticConfig, TrainConfig,
};
use serde::{Deserialize, Serialize};

use crate::failure;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DataConfig {
    pub train: Option<PathBuf>,
    pub valid: Option<PathBuf>,
    pub test: Option<PathBuf>,
    pub min_count: usize,
}

impl Default for DataConfig {
    fn default() -> Self {
        DataConfig {
            train: None,
            valid: None,
            test: None,
            min_count: 1,
        }
    }
}

/// Training settings. Seed and `m` come from the top level and the
/// grayscale section.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainSection {
    pub mode: ObjectiveMode,
    pub mu: f64,
    pub lr: f64,
    pub pretrain_epochs: usize,
    pub epochs: usize,
    pub batch_size: usize,
    pub log_wall_clock: bool,
}

impl Default for TrainSection {
    fn default() -> Self {
        let d = TrainConfig::default();
        TrainSection {
            mode: d.mode,
            mu: d.mu,
            lr: d.lr,
            pretrain_epochs: d.pretrain_epochs,
            epochs: d.epochs,
            batch_size: d.batch_size,
            log_wall_clock: d.log_wall_clock,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SweepConfig {
    pub margins: Vec<f64>,
}

impl Default for SweepConfig {
    fn default() -> Self {
        SweepConfig {
            margins: (1..=9).map(|i| i as f64 / 10.0).collect(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AblationConfig {
    pub modes: Vec<ObjectiveMode>,
}

impl Default for AblationConfig {
    fn default() -> Self {
        AblationConfig {
            modes: ObjectiveMode::ALL.to_vec(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PipelineConfig {
    pub seed: u64,
    pub data: DataConfig,
    pub synthetic: SyntheticConfig,
    pub bm25: Bm25Params,
    pub ngram: NGramParams,
    pub beam: BeamParams,
    pub grayscale: GrayscaleConfig,
    pub model: DualEncoderConfig,
    pub train: TrainSection,
    pub eval: MetricConfig,
    pub sweep: SweepConfig,
    pub ablation: AblationConfig,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        PipelineConfig {
            seed: 1,
            data: DataConfig::default(),
            synthetic: SyntheticConfig::default(),
            bm25: Bm25Params::default(),
            ngram: NGramParams::default(),
            beam: BeamParams::default(),
            grayscale: GrayscaleConfig::default(),
            model: DualEncoderConfig::default(),
            train: TrainSection::default(),
            eval: MetricConfig::default(),
            sweep: SweepConfig::default(),
            ablation: AblationConfig::default(),
        }
    }
}

impl PipelineConfig {
    pub fn train_config(&self) -> TrainConfig {
        let t = &self.train;
        TrainConfig {
            mode: t.mode,
            mu: t.mu,
            lr: t.lr,
            pretrain_epochs: t.pretrain_epochs,
            epochs: t.epochs,
            batch_size: t.batch_size,
            seed: self.seed,
            m: self.grayscale.m,
            log_wall_clock: t.log_wall_clock,
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.synthetic.validate()?;
        self.bm25.validate()?;
        self.ngram.validate()?;
        self.beam.validate()?;
        self.grayscale.validate()?;
        self.model.validate()?;
        self.train_config().validate()?;
        if self.data.min_count == 0 {
            return Err(failure::config("data.min_count must be >= 1"));
        }
        if self.eval.recalls.is_empty() {
            return Err(failure::config("eval.recalls must list at least one metric"));
        }
        if let Some(mu) = self.sweep.margins.iter().find(|m| !(0.0..1.0).contains(*m)) {
            return Err(failure::config(format!("sweep margin {mu} is outside [0, 1)")));
        }
        Ok(())
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).context("serializing resolved configuration")
    }
}

/// Parses `value` as a TOML value, falling back to a bare string.
fn parse_override_value(value: &str) -> toml::Value {
    toml::from_str::<toml::Table>(&format!("v = {value}"))
        .ok()
        .and_then(|mut t| t.remove("v"))
        .unwrap_or_else(|| toml::Value::String(value.to_string()))
}

fn apply_override(table: &mut toml::Table, assignment: &str) -> Result<()> {
    let (key, value) = assignment
        .split_once('=')
        .ok_or_else(|| failure::config(format!("override {assignment:?} is not key=value")))?;
    let path: Vec<&str> = key.trim().split('.').collect();
    if path.iter().any(|p| p.is_empty()) {
        return Err(failure::config(format!("invalid override key {key:?}")));
    }
    let (last, parents) = path.split_last().expect("split yields one element");
    let mut node = table;
    for part in parents {
        let entry = node
            .entry(part.to_string())
            .or_insert_with(|| toml::Value::Table(toml::Table::new()));
        node = entry
            .as_table_mut()
            .ok_or_else(|| failure::config(format!("override key {key:?}: {part} is not a table")))?;
    }
    node.insert(last.to_string(), parse_override_value(value.trim()));
    Ok(())
}

/// Reads the optional config file, applies `key=value` overrides and
/// validates the result.
pub fn resolve(path: Option<&Path>, overrides: &[String]) -> Result<PipelineConfig> {
    let mut table = match path {
        Some(p) => {
            let text = std::fs::read_to_string(p)
                .map_err(|e| failure::config(format!("cannot read config {}: {e}", p.display())))?;
            toml::from_str::<toml::Table>(&text).map_err(|e| failure::config(format!("{}: {e}", p.display())))?
        }
        None => toml::Table::new(),
    };
    for o in overrides {
        apply_override(&mut table, o)?;
    }
    let config: PipelineConfig = toml::Value::Table(table)
        .try_into()
        .map_err(|e: toml::de::Error| failure::config(e.to_string()))?;
    config.validate()?;
    Ok(config)
}
