use std::fs;
use std::path::{Path, PathBuf};

use burstforge::model::ModelConfig;
use burstforge::sim::SimParams;
use burstforge::train::TrainConfig;
use serde::{Deserialize, Serialize};

use crate::error::CliError;

fn default_count() -> usize {
    8
}

/// Synthetic data generation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DataConfig {
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "default_count")]
    pub count: usize,
    #[serde(default)]
    pub sim: SimParams,
}

impl Default for DataConfig {
    fn default() -> Self {
        DataConfig {
            seed: 0,
            count: default_count(),
            sim: SimParams::default(),
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct IoConfig {
    /// Directory of source PNG images.
    #[serde(default)]
    pub corpus: Option<PathBuf>,
    /// Dataset written by `simulate`.
    #[serde(default)]
    pub dataset: Option<PathBuf>,
}

/// Top-level run configuration file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub model: ModelConfig,
    #[serde(default)]
    pub train: TrainConfig,
    #[serde(default)]
    pub data: DataConfig,
    #[serde(default)]
    pub io: IoConfig,
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<Self, CliError> {
        let text = fs::read_to_string(path)
            .map_err(|e| CliError::Validation(format!("{}: {e}", path.display())))?;
        serde_json::from_str(&text)
            .map_err(|e| CliError::Validation(format!("{}: {e}", path.display())))
    }

    /// Expands every default and checks the sections against each other.
    pub fn resolved(&self) -> Result<Self, CliError> {
        let model = self.model.resolved()?;
        let mut sim = self.data.sim.clone();
        sim.burst_size.get_or_insert(model.burst_size);
        let sim = sim.resolved(model.task)?;
        self.train.validate()?;
        if sim.burst_size != Some(model.burst_size) {
            return Err(CliError::Validation(format!(
                "data.sim.burst_size is {}, model.burst_size is {}",
                sim.burst_size.unwrap_or(0),
                model.burst_size
            )));
        }
        Ok(RunConfig {
            model,
            train: self.train.clone(),
            data: DataConfig {
                sim,
                ..self.data.clone()
            },
            io: self.io.clone(),
        })
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serialises")
    }
}
