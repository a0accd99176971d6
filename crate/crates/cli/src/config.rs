//! Layered experiment configuration: a built-in preset or a TOML file, then
//! `--set section.key=value` overrides. Unknown keys are rejected.

use std::path::{Path, PathBuf};

use kasa_core::harness::TaskSpec;
use kasa_core::model::{AdapterSpec, Method};
use kasa_core::trainer::TrainConfig;
use serde::{Deserialize, Serialize};

use crate::CliError;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Experiment {
    pub methods: Vec<Method>,
    pub n_seeds: usize,
    /// Empty means the default grid cut to feasible values, plus `k = 0`.
    pub k_grid: Vec<usize>,
    /// Empty means the default grid cut to feasible values.
    pub r_grid: Vec<usize>,
}

impl Default for Experiment {
    fn default() -> Self {
        Self {
            methods: vec![Method::Kasa, Method::Lora],
            n_seeds: 10,
            k_grid: Vec::new(),
            r_grid: Vec::new(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Output {
    pub dir: PathBuf,
}

impl Default for Output {
    fn default() -> Self {
        Self { dir: PathBuf::from("kasa-out") }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CliConfig {
    pub task: TaskSpec,
    pub adapter: AdapterSpec,
    pub train: TrainConfig,
    pub experiment: Experiment,
    pub output: Output,
}

impl CliConfig {
    /// `default`: instruction-tuning hyperparameters (AdamW, lr 2e-4, batch 16).
    /// `desk`: the synthetic-benchmark preset used by the acceptance suite.
    pub fn preset(name: &str) -> Option<Self> {
        match name {
            "default" => Some(Self::default()),
            "desk" => Some(Self {
                train: TrainConfig::desk(),
                ..Self::default()
            }),
            _ => None,
        }
    }

    pub fn load(source: &str) -> Result<Self, CliError> {
        if let Some(preset) = Self::preset(source) {
            return Ok(preset);
        }
        let text = std::fs::read_to_string(Path::new(source))
            .map_err(|e| CliError::Data(format!("cannot read config '{source}': {e}")))?;
        toml::from_str(&text).map_err(|e| CliError::Data(format!("config '{source}': {e}")))
    }

    /// Applies `section.key=value`; the value is parsed as a TOML value and
    /// taken as a bare string when that fails.
    pub fn apply_override(self, assignment: &str) -> Result<Self, CliError> {
        let (path, raw) = assignment
            .split_once('=')
            .ok_or_else(|| CliError::Usage(format!("override '{assignment}' is not of the form section.key=value")))?;
        let (section, key) = path
            .trim()
            .split_once('.')
            .ok_or_else(|| CliError::Usage(format!("override key '{path}' is not of the form section.key")))?;
        let value: toml::Value = toml::from_str::<toml::Table>(&format!("v = {}", raw.trim()))
            .ok()
            .and_then(|mut t| t.remove("v"))
            .unwrap_or_else(|| toml::Value::String(raw.trim().to_string()));

        let mut root = toml::Value::try_from(&self).map_err(|e| CliError::Data(e.to_string()))?;
        let table = root
            .get_mut(section)
            .and_then(toml::Value::as_table_mut)
            .ok_or_else(|| CliError::Usage(format!("unknown config section '{section}'")))?;
        table.insert(key.to_string(), value);
        root.try_into()
            .map_err(|e: toml::de::Error| CliError::Usage(format!("override '{assignment}': {e}")))
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn presets() {
        assert_eq!(CliConfig::load("default").unwrap().train.learning_rate, 2e-4);
        assert_eq!(CliConfig::load("desk").unwrap().train.batch_size, 800);
    }

    #[test]
    fn overrides() {
        let c = CliConfig::default()
            .apply_override("train.steps=7")
            .unwrap()
            .apply_override("experiment.methods=[\"pissa\"]")
            .unwrap()
            .apply_override("train.optimizer=sgd")
            .unwrap();
        assert_eq!(c.train.steps, 7);
        assert_eq!(c.experiment.methods, vec![Method::Pissa]);
        assert_eq!(c.train.optimizer, kasa_core::trainer::OptimizerKind::Sgd);
        assert!(CliConfig::default().apply_override("train.bogus=1").is_err());
        assert!(CliConfig::default().apply_override("nosection.x=1").is_err());
        assert!(CliConfig::default().apply_override("train.steps").is_err());
    }

    #[test]
    fn echo_round_trips() {
        let c = CliConfig::preset("desk").unwrap();
        assert_eq!(toml::from_str::<CliConfig>(&c.to_toml()).unwrap(), c);
    }

    #[test]
    fn unknown_file_keys_rejected() {
        assert!(toml::from_str::<CliConfig>("[train]\nlr = 1.0\n").is_err());
        assert!(toml::from_str::<CliConfig>("[extra]\n").is_err());
        let partial: CliConfig = toml::from_str("[train]\nsteps = 3\n").unwrap();
        assert_eq!(partial.train.steps, 3);
        assert_eq!(partial.train.learning_rate, 2e-4);
    }
}
