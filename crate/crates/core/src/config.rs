//! Run configuration file.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::datagen::GeneratorConfig;
use crate::error::{Error, Result};
use crate::explain::ExplainConfig;
use crate::model::ModelConfig;
use crate::prototype::EmConfig;
use crate::train_eval::TrainConfig;

/// Every tunable of a run. Missing keys take their defaults; unknown keys
/// are rejected.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub generator: GeneratorConfig,
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub em: EmConfig,
    pub explain: ExplainConfig,
}

impl RunConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: RunConfig = toml::from_str(text).map_err(|e| Error::Config(e.message().trim().to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml(&text).map_err(|e| match e {
            Error::Config(msg) => Error::Config(format!("{}: {msg}", path.display())),
            other => other,
        })
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    pub fn validate(&self) -> Result<()> {
        self.generator.validate()?;
        self.model.validate()?;
        self.train.validate()?;
        if self.em.max_iter == 0 || !(self.em.var_floor > 0.0) || !(self.em.tol >= 0.0) {
            return Err(Error::Config("em needs max_iter > 0, var_floor > 0 and tol >= 0".into()));
        }
        Ok(())
    }
}
