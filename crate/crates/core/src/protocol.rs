//! Run configuration: every tunable of the pipeline in one document, read
//! from TOML with unspecified fields left at their defaults, and echoed into
//! result files.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::StannConfig;
use crate::prep::PrepConfig;
use crate::train::Hyper;
use crate::transfer::{Budget, FinetuneConfig};

/// Network size.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ModelSize {
    /// Full layer widths.
    Full,
    /// Narrow columns for quick runs.
    Desk,
    /// One filter per conv stage; for gradient checks.
    Tiny,
}

impl ModelSize {
    pub fn config(self, n_channels: usize, timesteps: usize) -> StannConfig {
        match self {
            ModelSize::Full => StannConfig::full(n_channels, timesteps),
            ModelSize::Desk => StannConfig::desk(n_channels, timesteps),
            ModelSize::Tiny => StannConfig::tiny(n_channels, timesteps),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub model: ModelSize,
    pub prep: PrepConfig,
    pub train: Hyper,
    pub finetune: FinetuneConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self { model: ModelSize::Full, prep: PrepConfig::default(), train: Hyper::default(), finetune: FinetuneConfig::default() }
    }
}

impl RunConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: RunConfig = toml::from_str(text).map_err(|e| Error::arg(format!("config: {e}")))?;
        cfg.train.validate()?;
        Ok(cfg)
    }

    /// The configuration plus the per-budget fine-tuning schedule, for result provenance.
    pub fn echo(&self) -> serde_json::Value {
        let schedule: serde_json::Map<String, serde_json::Value> = Budget::ALL
            .iter()
            .map(|b| (b.name().to_string(), serde_json::json!({ "epochs": b.epochs(), "patience": b.patience() })))
            .collect();
        let mut v = serde_json::to_value(self).expect("config serializes");
        v["finetune_schedule"] = serde_json::Value::Object(schedule);
        v
    }
}
