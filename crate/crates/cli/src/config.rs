use std::path::Path;

use conspace::aligner::AlignConfig;
use conspace::corpus::WorldConfig;
use conspace::latentdiff::{LcmTrainConfig, SamplerConfig, TwoTowerConfig};
use conspace::projector::ProjectorConfig;
use schemars::JsonSchema;
use serde::{Deserialize, Serialize};

use crate::error::CliError;

/// Fractions and seed used to carve a dataset into train/val/test.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize, JsonSchema)]
#[serde(default, deny_unknown_fields)]
pub struct SplitConfig {
    pub train: f64,
    pub val: f64,
    pub test: f64,
    pub seed: u64,
}

impl Default for SplitConfig {
    fn default() -> Self {
        Self {
            train: 0.8,
            val: 0.1,
            test: 0.1,
            seed: 0,
        }
    }
}

impl SplitConfig {
    pub fn fractions(&self) -> (f64, f64, f64) {
        (self.train, self.val, self.test)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize, JsonSchema)]
#[serde(default, deny_unknown_fields)]
pub struct LatentConfig {
    pub model: TwoTowerConfig,
    pub train: LcmTrainConfig,
    /// Shortest prefix turned into a training item.
    pub min_context: usize,
    /// Share of sequences held out for validation.
    pub val_fraction: f64,
}

impl Default for LatentConfig {
    fn default() -> Self {
        Self {
            model: TwoTowerConfig::default(),
            train: LcmTrainConfig::default(),
            min_context: 1,
            val_fraction: 0.1,
        }
    }
}

/// One config file covering every command; each command reads the blocks it needs.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize, JsonSchema)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub corpus: WorldConfig,
    pub split: SplitConfig,
    pub projector: ProjectorConfig,
    pub aligner: AlignConfig,
    pub latentdiff: LatentConfig,
    pub sampler: SamplerConfig,
}

impl RunConfig {
    pub fn load(path: Option<&Path>) -> Result<Self, CliError> {
        let Some(path) = path else {
            return Ok(Self::default());
        };
        let text = std::fs::read_to_string(path)
            .map_err(|e| CliError::Usage(format!("cannot read config {}: {e}", path.display())))?;
        serde_json::from_str(&text).map_err(|e| CliError::Usage(format!("bad config {}: {e}", path.display())))
    }
}

/// Written as `resolved-config.json` into every output directory.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Resolved {
    pub command: String,
    /// Flags as given on the command line, after defaults.
    pub args: serde_json::Value,
    pub config: RunConfig,
}
