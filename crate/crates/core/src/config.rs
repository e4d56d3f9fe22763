//! Whole-run configuration, stored as TOML in every dataset and run directory.
//!
//! Scene size and class count appear in both the generator and the model
//! sections; [`RunConfig::validate`] rejects a file where they disagree.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::data::GenConfig;
use crate::error::{Error, Result};
use crate::io::write_atomic;
use crate::model::ModelConfig;
use crate::train::TrainConfig;

/// File name used for a resolved config inside output directories.
pub const CONFIG_FILE: &str = "config.toml";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SplitSizes {
    pub train_scenes: usize,
    pub eval_scenes: usize,
}

impl Default for SplitSizes {
    fn default() -> Self {
        SplitSizes {
            train_scenes: 1000,
            eval_scenes: 200,
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub data: SplitSizes,
    pub generator: GenConfig,
    pub model: ModelConfig,
    pub train: TrainConfig,
}

impl RunConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Config(e.to_string()))
    }

    /// Reads and parses a config file. Parse failures are config errors so
    /// callers can treat them as bad input.
    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        toml::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        write_atomic(path, self.to_toml()?.as_bytes())
    }

    /// Sets the seed of both the generator and the training run.
    pub fn set_seed(&mut self, seed: u64) {
        self.generator.seed = seed;
        self.train.seed = seed;
    }

    pub fn validate(&self) -> Result<()> {
        self.generator.validate()?;
        self.model.validate()?;
        self.train.validate()?;
        let (g, m) = (&self.generator, &self.model);
        if (g.height, g.width, g.num_classes) != (m.height, m.width, m.num_classes) {
            return Err(Error::Config(format!(
                "generator makes {}x{} scenes with {} classes but the model expects {}x{} with {}",
                g.height, g.width, g.num_classes, m.height, m.width, m.num_classes
            )));
        }
        if self.data.train_scenes == 0 {
            return Err(Error::Config("data.train_scenes must be at least 1".into()));
        }
        Ok(())
    }
}
