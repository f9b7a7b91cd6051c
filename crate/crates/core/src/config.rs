//! Top-level TOML configuration for training and sampling.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::diffusion::{ModelConfig, SampleOptions, TrainConfig};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DataConfig {
    /// Dataset manifest to train on. Without one, the rectangle fixture is used.
    pub manifest: Option<PathBuf>,
    pub fixture_samples: usize,
    pub fixture_canvas: usize,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct OutputConfig {
    pub checkpoint: Option<PathBuf>,
    pub loss_log: Option<PathBuf>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LotsConfig {
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub sample: SampleOptions,
    pub data: DataConfig,
    pub output: OutputConfig,
}

impl LotsConfig {
    pub fn from_toml_str(s: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(s)?;
        cfg.model.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let s = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml_str(&s)
    }

    pub fn to_toml_string(&self) -> Result<String> {
        toml::to_string_pretty(self).map_err(|e| Error::invalid("config", e.to_string()))
    }
}
