use std::path::{Path, PathBuf};

use attnprune::data::DomainSpec;
use attnprune::model::ModelConfig;
use attnprune::training::{OptimConfig, PruneConfig, TrainConfig};
use serde::{Deserialize, Serialize};

use crate::error::CliError;

/// One experiment as a single JSON document. Missing fields take their
/// defaults; unknown fields are rejected.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ExperimentConfig {
    pub model: ModelConfig,
    pub prune: PruneConfig,
    pub data: DomainSpec,
    pub optim: OptimConfig,
    pub eval_every: usize,
    /// Seeds model initialization and batch order.
    pub seed: u64,
    pub output_dir: PathBuf,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        let train = TrainConfig::default();
        Self {
            model: train.model,
            prune: train.prune,
            data: DomainSpec::default(),
            optim: train.optim,
            eval_every: train.eval_every,
            seed: 0,
            output_dir: PathBuf::from("runs/default"),
        }
    }
}

impl ExperimentConfig {
    pub fn train_config(&self) -> TrainConfig {
        TrainConfig {
            model: self.model.clone(),
            prune: self.prune.clone(),
            optim: self.optim.clone(),
            eval_every: self.eval_every,
        }
    }

    pub fn validate(&self) -> Result<(), CliError> {
        self.train_config().validate()?;
        self.data.validate()?;
        if self.output_dir.as_os_str().is_empty() {
            return Err(CliError::Config("output_dir: must not be empty".into()));
        }
        Ok(())
    }

    /// Parse and validate; every failure maps to a config error.
    pub fn from_json(text: &str) -> Result<Self, CliError> {
        let cfg: Self = serde_json::from_str(text).map_err(|e| CliError::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self, CliError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| CliError::Config(format!("{}: {e}", path.display())))?;
        Self::from_json(&text)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }
}
