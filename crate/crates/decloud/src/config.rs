//! Run configuration: a JSON-loadable merge of training and sampling
//! settings. Command-line flags override file values, and every command
//! echoes the effective configuration to `run.json` beside its outputs so a
//! run can be reproduced from the artifact alone.

use crate::diffusion::{SampleConfig, TrainConfig, TrainEnable};
use crate::error::{Error, Result};
use serde::{Deserialize, Serialize};
use std::path::Path;

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub train: TrainConfig,
    pub sample: SampleConfig,
    pub enable: TrainEnable,
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::io(format!("reading config {}", path.display()), e))?;
        let cfg: RunConfig = serde_json::from_str(&text).map_err(|e| Error::Parse {
            path: path.to_path_buf(),
            reason: e.to_string(),
        })?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        self.train.validate()?;
        self.sample.validate()
    }
}

/// Effective settings of one command invocation, written as `run.json`.
#[derive(Debug, Clone, Serialize)]
pub struct RunRecord {
    pub command: String,
    pub config: RunConfig,
    /// Command-specific arguments after all overrides.
    pub args: serde_json::Value,
}

impl RunRecord {
    pub fn write(&self, dir: &Path) -> Result<()> {
        let path = dir.join("run.json");
        let text = serde_json::to_string_pretty(self)
            .map_err(|e| Error::Config(format!("run record serialization: {e}")))?;
        std::fs::write(&path, text)
            .map_err(|e| Error::io(format!("writing {}", path.display()), e))
    }
}
