//! Experiment configuration (TOML, versioned schema, unknown keys rejected).

use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use serde::{Deserialize, Serialize};
use tta_core::adapt::{AdaptConfig, AdaptMode};
use tta_core::augment::AugmentationSet;
use tta_core::backbone::TrainConfig;
use tta_core::data::{FeatureConfig, TaskSpec};
use tta_core::shiftgen::ShiftSpec;

use crate::io::Schema;

pub const SCHEMA_VERSION: u32 = 1;

/// Upper bound on sweep size unless `force` is set.
pub const MAX_SWEEP_RUNS: usize = 500;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub schema_version: u32,
    pub name: String,
    #[serde(default)]
    pub seed: u64,
    pub data: DataConfig,
    pub task: TaskConfig,
    #[serde(default)]
    pub model: ModelConfig,
    #[serde(default)]
    pub train: TrainConfig,
    #[serde(default)]
    pub adapt: AdaptConfig,
    #[serde(default = "all_modes")]
    pub modes: Vec<AdaptMode>,
    #[serde(default)]
    pub shift: Option<ShiftSpec>,
    #[serde(default)]
    pub eval: EvalConfig,
    #[serde(default)]
    pub sweep: Option<SweepConfig>,
}

fn all_modes() -> Vec<AdaptMode> {
    AdaptMode::ALL.to_vec()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DataConfig {
    pub source: SourceConfig,
    pub split: SplitConfig,
    #[serde(default)]
    pub regimes: Vec<RegimeConfig>,
    /// Feature settings, used with the OHLCV schema only.
    #[serde(default)]
    pub features: FeatureConfig,
    /// Channels fed to the model; all channels when empty.
    #[serde(default)]
    pub channels: Vec<String>,
    /// Cache windowed datasets under the output root.
    #[serde(default)]
    pub cache: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind", deny_unknown_fields)]
pub enum SourceConfig {
    Csv {
        path: PathBuf,
        schema: Schema,
    },
    /// Generated hourly seven-channel series shaped like ETTh1.
    EttSurrogate {
        hours: usize,
        seed: u64,
    },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "by", deny_unknown_fields)]
pub enum SplitConfig {
    /// Exclusive end dates, `YYYY-MM-DD` or `YYYY-MM-DD HH:MM:SS`.
    Dates { train_end: String, valid_end: String },
    /// Leading shares of the rows for training and validation.
    Fractions { train: f64, valid: f64 },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RegimeConfig {
    pub name: String,
    pub start: String,
    pub end: String,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TaskKind {
    /// Next-step direction of the log return (OHLCV).
    Direction,
    /// Sum of the next `horizon` log returns (OHLCV).
    CumulativeReturn,
    /// Next `horizon` standardized values of the target channel.
    FutureValues,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TaskConfig {
    pub kind: TaskKind,
    pub window_len: usize,
    #[serde(default = "one")]
    pub horizon: usize,
    /// Target channel for `future_values`; the last channel when absent.
    #[serde(default)]
    pub target: Option<String>,
}

fn one() -> usize {
    1
}

impl TaskConfig {
    pub fn spec(&self) -> TaskSpec {
        match self.kind {
            TaskKind::Direction => TaskSpec::Direction,
            TaskKind::CumulativeReturn => TaskSpec::CumulativeReturn { horizon: self.horizon },
            TaskKind::FutureValues => TaskSpec::FutureValues { horizon: self.horizon },
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    pub hidden: usize,
    pub kernel: usize,
    pub dilations: Vec<usize>,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            hidden: 64,
            kernel: 3,
            dilations: vec![1, 2, 4],
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalConfig {
    /// Trailing window of the rolling curves, in days.
    pub rolling_window: usize,
    /// Annualization factor of the backtest.
    pub days_per_year: f64,
    /// Deploy on at most this many leading test days.
    pub max_test_days: Option<usize>,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            rolling_window: 63,
            days_per_year: tta_core::evalstat::EQUITY_DAYS_PER_YEAR,
            max_test_days: None,
        }
    }
}

/// Which unsupervised terms are active.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LossAblation {
    /// Entropy (or variance) only: `alpha = 1, beta = 0`.
    PrimaryOnly,
    /// Consistency (or distillation) only: `alpha = 0, beta = 1`.
    SecondaryOnly,
    Combined,
}

impl LossAblation {
    pub fn weights(&self) -> (f64, f64) {
        match self {
            LossAblation::PrimaryOnly => (1.0, 0.0),
            LossAblation::SecondaryOnly => (0.0, 1.0),
            LossAblation::Combined => (1.0, 1.0),
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            LossAblation::PrimaryOnly => "primary_only",
            LossAblation::SecondaryOnly => "secondary_only",
            LossAblation::Combined => "combined",
        }
    }
}

/// Grid axes. An empty axis keeps the base `adapt` value.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SweepConfig {
    pub context_size: Vec<usize>,
    pub steps: Vec<usize>,
    pub learning_rate: Vec<f64>,
    pub threshold_quantile: Vec<f64>,
    pub augmentation: Vec<AugmentationSet>,
    pub losses: Vec<LossAblation>,
    /// Allow grids larger than the run guard.
    pub force: bool,
}

impl SweepConfig {
    pub fn size(&self) -> usize {
        [
            self.context_size.len(),
            self.steps.len(),
            self.learning_rate.len(),
            self.threshold_quantile.len(),
            self.augmentation.len(),
            self.losses.len(),
        ]
        .iter()
        .map(|n| (*n).max(1))
        .product()
    }
}

impl ExperimentConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(text).context("parsing experiment config")?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
        let mut cfg = Self::from_toml(&text).with_context(|| format!("in {}", path.display()))?;
        if let SourceConfig::Csv { path: p, .. } = &mut cfg.data.source {
            if p.is_relative() {
                if let Some(dir) = path.parent() {
                    *p = dir.join(&*p);
                }
            }
        }
        Ok(cfg)
    }

    pub fn to_toml(&self) -> Result<String> {
        Ok(toml::to_string_pretty(self)?)
    }

    pub fn validate(&self) -> Result<()> {
        if self.schema_version != SCHEMA_VERSION {
            bail!(
                "unsupported schema_version {} (this build reads version {SCHEMA_VERSION})",
                self.schema_version
            );
        }
        if self.task.window_len == 0 || self.task.horizon == 0 {
            bail!("task.window_len and task.horizon must be positive");
        }
        if self.task.kind == TaskKind::Direction && self.task.horizon != 1 {
            bail!("the direction task has horizon 1");
        }
        if self.modes.is_empty() {
            bail!("modes must not be empty");
        }
        if let SplitConfig::Fractions { train, valid } = self.data.split {
            if !(train > 0.0 && valid > 0.0 && train + valid < 1.0) {
                bail!("split fractions must be positive and sum below 1");
            }
        }
        if self.model.hidden == 0 || self.model.kernel == 0 || self.model.dilations.is_empty() {
            bail!("model.hidden, model.kernel and model.dilations must be non-empty");
        }
        if self.eval.rolling_window == 0 {
            bail!("eval.rolling_window must be positive");
        }
        self.train.validate()?;
        self.adapt.validate()?;
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    const MINIMAL: &str = r#"
schema_version = 1
name = "t"
[data.source]
kind = "ett_surrogate"
hours = 2000
seed = 1
[data.split]
by = "fractions"
train = 0.6
valid = 0.2
[task]
kind = "future_values"
window_len = 48
horizon = 12
"#;

    #[test]
    fn minimal_config_gets_defaults() {
        let c = ExperimentConfig::from_toml(MINIMAL).unwrap();
        assert_eq!(c.adapt, AdaptConfig::default());
        assert_eq!(c.modes.len(), 3);
        assert_eq!(c.model.dilations, vec![1, 2, 4]);
        let again = ExperimentConfig::from_toml(&c.to_toml().unwrap()).unwrap();
        assert_eq!(again, c);
    }

    #[test]
    fn unknown_keys_rejected() {
        let bad = MINIMAL.replace("horizon = 12", "horizon = 12\nhorizn = 3");
        assert!(ExperimentConfig::from_toml(&bad).is_err());
        let bad = format!("{MINIMAL}\n[adapt]\nstepz = 3\n");
        assert!(ExperimentConfig::from_toml(&bad).is_err());
    }

    #[test]
    fn wrong_schema_version_rejected() {
        let bad = MINIMAL.replace("schema_version = 1", "schema_version = 7");
        let err = ExperimentConfig::from_toml(&bad).unwrap_err();
        assert!(format!("{err:#}").contains("schema_version"));
    }

    #[test]
    fn sweep_size_counts_empty_axes_as_one() {
        let s = SweepConfig {
            context_size: vec![32, 64, 96],
            steps: vec![1, 3, 5],
            ..Default::default()
        };
        assert_eq!(s.size(), 9);
        assert_eq!(SweepConfig::default().size(), 1);
    }
}
