//! Key-value configuration files with command-line overrides.
//!
//! Files hold `key = value` lines; `#` starts a comment. Every training
//! hyperparameter is a named key so a run is fully described by one file
//! plus `--set key=value` overrides.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use crate::error::Error;
use crate::kg::ColumnOrder;
use crate::model::{MMode, Norm};
use crate::path::PathConfig;
use crate::train::TrainConfig;
use crate::Result;

/// Parsed key-value settings, later materialized into typed configs.
#[derive(Debug, Clone, Default)]
pub struct Settings {
    values: BTreeMap<String, String>,
}

const KNOWN_KEYS: &[&str] = &[
    "train_file",
    "valid_file",
    "test_file",
    "column_order",
    "dim",
    "lr",
    "margin",
    "margin_step1",
    "margin_step2",
    "margin_step3",
    "lambda",
    "epochs",
    "batch_size",
    "norm",
    "seed",
    "max_steps",
    "warm_start_epochs",
    "m_mode",
    "negatives",
    "freeze_matrices",
    "degree_cap",
    "reliability_floor",
    "hits_k",
    "eval_split",
    "checkpoint_every",
    "workers",
];

impl Settings {
    pub fn from_file(path: &Path) -> Result<Self> {
        let content = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut settings = Settings::default();
        for (i, line) in content.lines().enumerate() {
            let line = line.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let Some((key, value)) = line.split_once('=') else {
                return Err(Error::Config(format!(
                    "{}:{}: expected 'key = value', got '{line}'",
                    path.display(),
                    i + 1
                )));
            };
            settings.set(key.trim(), value.trim())?;
        }
        Ok(settings)
    }

    /// Applies one `key=value` override.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        if !KNOWN_KEYS.contains(&key) {
            return Err(Error::Config(format!(
                "unknown config key '{key}' (known keys: {})",
                KNOWN_KEYS.join(", ")
            )));
        }
        self.values.insert(key.to_owned(), value.to_owned());
        Ok(())
    }

    pub fn get(&self, key: &str) -> Option<&str> {
        self.values.get(key).map(String::as_str)
    }

    fn parse<T: std::str::FromStr>(&self, key: &str, default: T) -> Result<T> {
        match self.values.get(key) {
            None => Ok(default),
            Some(raw) => raw
                .parse()
                .map_err(|_| Error::Config(format!("config key '{key}': cannot parse '{raw}'"))),
        }
    }

    pub fn train_config(&self) -> Result<TrainConfig> {
        let defaults = TrainConfig::default();
        let max_steps: usize = self.parse("max_steps", defaults.max_steps)?;
        let mut step_margins = Vec::with_capacity(max_steps);
        for (i, key) in ["margin_step1", "margin_step2", "margin_step3"]
            .iter()
            .enumerate()
            .take(max_steps.max(1))
        {
            let fallback = defaults
                .step_margins
                .get(i)
                .copied()
                .unwrap_or(*defaults.step_margins.last().unwrap());
            step_margins.push(self.parse(key, fallback)?);
        }
        let norm: Norm = match self.values.get("norm") {
            None => defaults.norm,
            Some(raw) => raw.parse()?,
        };
        let m_mode: MMode = match self.values.get("m_mode") {
            None => defaults.m_mode,
            Some(raw) => raw.parse()?,
        };
        let config = TrainConfig {
            dim: self.parse("dim", defaults.dim)?,
            learning_rate: self.parse("lr", defaults.learning_rate)?,
            margin: self.parse("margin", defaults.margin)?,
            step_margins,
            lambda: self.parse("lambda", defaults.lambda)?,
            epochs: self.parse("epochs", defaults.epochs)?,
            batch_size: self.parse("batch_size", defaults.batch_size)?,
            norm,
            seed: self.parse("seed", defaults.seed)?,
            max_steps,
            warm_start_epochs: self.parse("warm_start_epochs", defaults.warm_start_epochs)?,
            m_mode,
            negatives_per_positive: self.parse("negatives", defaults.negatives_per_positive)?,
            freeze_matrices: self.parse("freeze_matrices", defaults.freeze_matrices)?,
        };
        config.validate()?;
        Ok(config)
    }

    pub fn path_config(&self) -> Result<PathConfig> {
        let defaults = PathConfig::default();
        Ok(PathConfig {
            max_steps: self.parse("max_steps", defaults.max_steps)?,
            degree_cap: self.parse("degree_cap", defaults.degree_cap)?,
            reliability_floor: self.parse("reliability_floor", defaults.reliability_floor)?,
        })
    }

    pub fn column_order(&self) -> Result<ColumnOrder> {
        match self.values.get("column_order") {
            None => Ok(ColumnOrder::default()),
            Some(raw) => raw.parse(),
        }
    }

    /// Echo of every explicit setting, for run manifests.
    pub fn echo(&self) -> Vec<(String, String)> {
        self.values
            .iter()
            .map(|(k, v)| (k.clone(), v.clone()))
            .collect()
    }
}
