//! JSON checkpoints.

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{FlowError, Result};
use crate::model::{FlowModel, ModelConfig, NpvHead, Params};
use crate::tape::Tensor;
use crate::train::LossRecord;

pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct StoredTensor {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct Stored {
    format_version: u32,
    config: ModelConfig,
    velocity: BTreeMap<String, StoredTensor>,
    npv: BTreeMap<String, StoredTensor>,
    #[serde(default)]
    trace: Vec<LossRecord>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub model: FlowModel,
    pub head: NpvHead,
    pub trace: Vec<LossRecord>,
}

fn store(p: &Params) -> BTreeMap<String, StoredTensor> {
    p.entries
        .iter()
        .map(|(k, t)| {
            (
                k.clone(),
                StoredTensor {
                    rows: t.rows,
                    cols: t.cols,
                    data: t.data.clone(),
                },
            )
        })
        .collect()
}

fn restore(
    stored: BTreeMap<String, StoredTensor>,
    expected: &Params,
    what: &str,
) -> std::result::Result<Params, String> {
    let mut out = Params::default();
    for (k, t) in &expected.entries {
        let s = stored
            .get(k)
            .ok_or_else(|| format!("{what} parameter '{k}' missing"))?;
        if (s.rows, s.cols) != t.shape() || s.data.len() != t.len() {
            return Err(format!(
                "{what} parameter '{k}' has shape {}x{}, expected {}x{}",
                s.rows, s.cols, t.rows, t.cols
            ));
        }
        if !s.data.iter().all(|v| v.is_finite()) {
            return Err(format!("{what} parameter '{k}' is not finite"));
        }
        out.entries
            .insert(k.clone(), Tensor::new(s.rows, s.cols, s.data.clone()));
    }
    if let Some(extra) = stored.keys().find(|k| !expected.entries.contains_key(*k)) {
        return Err(format!("unexpected {what} parameter '{extra}'"));
    }
    Ok(out)
}

impl Checkpoint {
    pub fn to_json(&self) -> String {
        let s = Stored {
            format_version: CHECKPOINT_VERSION,
            config: self.model.config,
            velocity: store(&self.model.params),
            npv: store(&self.head.params),
            trace: self.trace.clone(),
        };
        serde_json::to_string_pretty(&s).expect("checkpoint serializes")
    }

    pub fn from_json(text: &str, path: &str) -> Result<Self> {
        let err = |message: String| FlowError::Checkpoint {
            path: path.to_string(),
            message,
        };
        let s: Stored = serde_json::from_str(text).map_err(|e| err(e.to_string()))?;
        if s.format_version != CHECKPOINT_VERSION {
            return Err(err(format!(
                "unsupported format version {}",
                s.format_version
            )));
        }
        let model = FlowModel::new(s.config, 0).map_err(|e| err(e.to_string()))?;
        let head = NpvHead::new(s.config, 0).map_err(|e| err(e.to_string()))?;
        Ok(Checkpoint {
            model: FlowModel {
                config: s.config,
                params: restore(s.velocity, &model.params, "velocity").map_err(err)?,
            },
            head: NpvHead {
                config: s.config,
                params: restore(s.npv, &head.params, "npv").map_err(err)?,
            },
            trace: s.trace,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_json()).map_err(|e| FlowError::Checkpoint {
            path: path.display().to_string(),
            message: e.to_string(),
        })
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| FlowError::Checkpoint {
            path: path.display().to_string(),
            message: e.to_string(),
        })?;
        Checkpoint::from_json(&text, &path.display().to_string())
    }
}
