//! Versioned JSON checkpoints. Floats are written with shortest
//! round-trip formatting and parsed exactly, so save → load is bit-exact.

use std::path::Path;

use anyhow::{bail, Context, Result};
use serde::{Deserialize, Serialize};
use tta_core::backbone::{BackboneParams, Epoch};
use tta_core::data::Scaler;

pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub format_version: u32,
    pub params: BackboneParams,
    pub scaler: Scaler,
    pub channels: Vec<String>,
    pub train_seed: u64,
    pub best_epoch: usize,
    pub best_metric: f64,
    pub history: Vec<Epoch>,
}

impl Checkpoint {
    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string(self)?)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let ck: Self = serde_json::from_str(text).context("parsing checkpoint")?;
        if ck.format_version != CHECKPOINT_VERSION {
            bail!(
                "unsupported checkpoint format {} (expected {CHECKPOINT_VERSION})",
                ck.format_version
            );
        }
        ck.params.validate()?;
        if ck.scaler.mean.len() != ck.params.arch().input_dim() || ck.channels.len() != ck.scaler.mean.len() {
            bail!("checkpoint scaler does not match the input dimension");
        }
        Ok(ck)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_json()?).with_context(|| format!("writing {}", path.display()))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
        Self::from_json(&text).with_context(|| format!("in {}", path.display()))
    }
}
