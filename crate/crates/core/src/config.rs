//! Run configuration files (TOML).
//!
//! ```toml
//! out = "runs/full"
//!
//! [data]
//! train = "data/train"   # directory of scenario files; omit to generate a synthetic split
//! val = "data/val"
//!
//! [data.synthetic]
//! seed = 0
//! train = 1000
//! val = 200
//!
//! [model]
//! d_model = 128
//! [model.encoder]
//! layers = 5
//! variant = "full"
//! [model.decoder]
//! kind = "uni_mamba"
//!
//! [train]
//! epochs = 120
//! batch_size = 32
//! lr = 0.001
//! ```
//!
//! Unknown keys anywhere are rejected.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::dataset::{load_dataset, synthetic_split, SplitConfig};
use crate::error::{CoreError, Result};
use crate::model::ModelConfig;
use crate::scene::Scenario;
use crate::training::TrainConfig;

pub const ECHO_FILE: &str = "config.toml";

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DataConfig {
    pub train: Option<PathBuf>,
    pub val: Option<PathBuf>,
    pub synthetic: SplitConfig,
}

impl DataConfig {
    /// Train and validation scenarios; a missing `train` path means the synthetic split.
    pub fn load(&self) -> Result<(Vec<Scenario>, Vec<Scenario>)> {
        match (&self.train, &self.val) {
            (None, None) => synthetic_split(&self.synthetic),
            (Some(t), v) => {
                let train = load_dataset(t)?;
                let val = match v {
                    Some(v) => load_dataset(v)?,
                    None => Vec::new(),
                };
                Ok((train, val))
            }
            (None, Some(_)) => Err(CoreError::Config("data.val given without data.train".into())),
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub out: Option<PathBuf>,
    pub data: DataConfig,
    pub model: ModelConfig,
    pub train: TrainConfig,
}

impl RunConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: RunConfig = toml::from_str(text).map_err(|e| CoreError::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| CoreError::io(path, e))?;
        Self::from_toml(&text)
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.train.validate()
    }

    /// Fully resolved TOML (every key, defaults included).
    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("run config serializes")
    }

    /// Writes the resolved config to `dir/config.toml`.
    pub fn echo(&self, dir: &Path) -> Result<PathBuf> {
        let path = dir.join(ECHO_FILE);
        std::fs::write(&path, self.to_toml()).map_err(|e| CoreError::io(&path, e))?;
        Ok(path)
    }
}
