//! Pipeline configuration. Values resolve as command-line flag, then
//! config file, then built-in default.

use std::path::Path;

use serde::{Deserialize, Serialize};
use vgloop::maskio::DEFAULT_TAU_EXCL;
use vgloop::vectorize::VectorizeConfig;
use vgloop_flow::TrainConfig;

use crate::error::{CliError, Result};

pub const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PipelineConfig {
    pub format_version: u32,
    /// Root seed; every random stream is split from it.
    pub seed: u64,
    pub tau_excl: f64,
    pub vectorize: VectorizeConfig,
    pub flow: TrainConfig,
    pub sample_steps: usize,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        PipelineConfig {
            format_version: FORMAT_VERSION,
            seed: 0,
            tau_excl: DEFAULT_TAU_EXCL,
            vectorize: VectorizeConfig::default(),
            flow: TrainConfig::default(),
            sample_steps: 32,
        }
    }
}

impl PipelineConfig {
    pub fn load(path: Option<&Path>) -> Result<Self> {
        let Some(path) = path else {
            return Ok(PipelineConfig::default());
        };
        let text = std::fs::read_to_string(path).map_err(|e| CliError::Io {
            path: path.display().to_string(),
            message: e.to_string(),
        })?;
        let cfg: PipelineConfig = serde_json::from_str(&text)
            .map_err(|e| CliError::Config(format!("{}: {e}", path.display())))?;
        if cfg.format_version != FORMAT_VERSION {
            return Err(CliError::Config(format!(
                "{}: unsupported format_version {}",
                path.display(),
                cfg.format_version
            )));
        }
        Ok(cfg)
    }
}
