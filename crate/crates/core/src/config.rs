//! TOML run configuration shared by every CLI command.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Result, S4Error};
use crate::evaluation::{validate_edges, DEFAULT_CLOUD_EDGES};
use crate::losses::LossConfig;
use crate::models::ModelConfig;
use crate::synthetic::WorldConfig;
use crate::training::TrainConfig;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalConfig {
    pub cloud_bin_edges: Vec<f64>,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            cloud_bin_edges: DEFAULT_CLOUD_EDGES.to_vec(),
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PathsConfig {
    /// Directory for the echoed config, logs and plots; defaults to the
    /// directory of the command's output.
    pub run_dir: Option<PathBuf>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    /// When set, overrides `world.seed`, `model.init_seed` and `train.seed`.
    pub seed: Option<u64>,
    pub world: WorldConfig,
    pub model: ModelConfig,
    pub loss: LossConfig,
    pub train: TrainConfig,
    pub eval: EvalConfig,
    pub paths: PathsConfig,
}

impl RunConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| S4Error::InvalidConfig(e.to_string()))
    }

    pub fn load(path: &Path) -> Result<Self> {
        if !path.exists() {
            return Err(S4Error::MissingFile(path.to_path_buf()));
        }
        Self::from_toml(&fs::read_to_string(path)?)
    }

    /// Propagates the top-level seed and validates every section.
    pub fn resolve(mut self) -> Result<Self> {
        if let Some(seed) = self.seed {
            self.world.seed = seed;
            self.model.init_seed = seed;
            self.train.seed = seed;
        }
        self.world.validate()?;
        self.model.validate()?;
        self.loss.validate()?;
        self.train.validate(&self.model)?;
        validate_edges(&self.eval.cloud_bin_edges)?;
        Ok(self)
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string_pretty(self).map_err(|e| S4Error::InvalidConfig(e.to_string()))
    }

    /// Writes `<command>_config.toml` into `dir`.
    pub fn echo(&self, dir: &Path, command: &str) -> Result<PathBuf> {
        fs::create_dir_all(dir)?;
        let path = dir.join(format!("{command}_config.toml"));
        fs::write(&path, self.to_toml()?)?;
        Ok(path)
    }
}
