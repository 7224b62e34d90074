//! Run configuration file (TOML) consumed by the CLI.

use super::pretrain::PretrainConfig;
use super::train::TrainHyper;
use crate::baselines::DmsEncoding;
use crate::error::{Error, Result};
use crate::model::RespLlmConfig;
use serde::{Deserialize, Serialize};
use std::path::Path;

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainSettings {
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub weight_decay: f64,
    pub max_vocab: usize,
    pub snapshot_every: usize,
}

impl Default for TrainSettings {
    fn default() -> Self {
        let h = TrainHyper::default();
        TrainSettings {
            epochs: h.epochs,
            batch_size: h.batch_size,
            learning_rate: h.learning_rate,
            weight_decay: h.weight_decay,
            max_vocab: 2000,
            snapshot_every: h.snapshot_every,
        }
    }
}

impl TrainSettings {
    pub fn hyper(&self) -> TrainHyper {
        TrainHyper {
            epochs: self.epochs,
            batch_size: self.batch_size,
            learning_rate: self.learning_rate,
            weight_decay: self.weight_decay,
            snapshot_every: self.snapshot_every,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct FusionSettings {
    pub dms_encoding: DmsEncoding,
}

impl Default for FusionSettings {
    fn default() -> Self {
        FusionSettings {
            dms_encoding: DmsEncoding::Soft,
        }
    }
}

/// Everything a training run needs beyond the data itself.
#[derive(Debug, Clone, Default, Serialize, Deserialize)]
#[serde(default)]
pub struct RunConfig {
    pub model: RespLlmConfig,
    pub train: TrainSettings,
    pub pretrain: PretrainConfig,
    pub fusion: FusionSettings,
}

impl RunConfig {
    pub fn from_toml(text: &str) -> Result<RunConfig> {
        toml::from_str(text).map_err(|e| Error::Config(format!("bad run config: {e}")))
    }

    pub fn load(path: &Path) -> Result<RunConfig> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::io(path.display().to_string(), e))?;
        Self::from_toml(&text)
    }
}
