//! Series frames, OHLCV features, chronological splits, train-only
//! scalers and sliding windows.

mod batch;
mod features;
mod scaler;
mod source;
mod split;
mod windows;

use alloc::format;
use alloc::string::String;
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

pub use batch::WindowBatch;
pub use features::{compute_features, log_returns, FeatureConfig};
pub use scaler::Scaler;
pub use source::{build_context, Context, TracingSource, WindowSource};
pub use split::{chrono_split, Regime, SplitBoundaries, SplitDescriptor};
pub use windows::{make_windows, Labels, TaskSpec, WindowDataset};

use crate::{Error, Result};

/// Where a frame's values came from.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Provenance {
    Raw,
    Features,
    Shifted,
}

/// Timestamped multivariate series. Timestamps are seconds since the Unix
/// epoch (timezone-naive) and strictly increasing. Values are row-major
/// `[time][channel]`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SeriesFrame {
    timestamps: Vec<i64>,
    channels: Vec<String>,
    values: Vec<f64>,
    provenance: Provenance,
}

impl SeriesFrame {
    pub fn new(timestamps: Vec<i64>, channels: Vec<String>, values: Vec<f64>, provenance: Provenance) -> Result<Self> {
        if channels.is_empty() {
            return Err(Error::Empty("frame channels"));
        }
        if values.len() != timestamps.len() * channels.len() {
            return Err(Error::dim(
                "frame values",
                timestamps.len() * channels.len(),
                values.len(),
            ));
        }
        for (i, w) in timestamps.windows(2).enumerate() {
            if w[1] == w[0] {
                return Err(Error::Data {
                    row: i + 1,
                    reason: format!("duplicate timestamp {}", w[1]),
                });
            }
            if w[1] < w[0] {
                return Err(Error::Data {
                    row: i + 1,
                    reason: format!("timestamp {} precedes {}", w[1], w[0]),
                });
            }
        }
        Ok(Self {
            timestamps,
            channels,
            values,
            provenance,
        })
    }

    pub fn len(&self) -> usize {
        self.timestamps.len()
    }

    pub fn is_empty(&self) -> bool {
        self.timestamps.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.channels.len()
    }

    pub fn timestamps(&self) -> &[i64] {
        &self.timestamps
    }

    pub fn channels(&self) -> &[String] {
        &self.channels
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn provenance(&self) -> Provenance {
        self.provenance
    }

    pub fn row(&self, t: usize) -> &[f64] {
        let d = self.dim();
        &self.values[t * d..(t + 1) * d]
    }

    pub fn channel_index(&self, name: &str) -> Option<usize> {
        self.channels.iter().position(|c| c.eq_ignore_ascii_case(name))
    }

    pub fn column(&self, c: usize) -> Vec<f64> {
        self.values.iter().skip(c).step_by(self.dim()).copied().collect()
    }

    /// Same timestamps and channel names with replaced values.
    pub fn with_values(&self, values: Vec<f64>, provenance: Provenance) -> Result<Self> {
        Self::new(self.timestamps.clone(), self.channels.clone(), values, provenance)
    }

    /// Keeps only the named channels, in the given order.
    pub fn select_channels(&self, names: &[&str]) -> Result<Self> {
        let idx: Vec<usize> = names
            .iter()
            .map(|n| {
                self.channel_index(n)
                    .ok_or_else(|| Error::config("channels", format!("unknown channel `{n}`")))
            })
            .collect::<Result<_>>()?;
        let mut values = Vec::with_capacity(self.len() * idx.len());
        for t in 0..self.len() {
            let row = self.row(t);
            values.extend(idx.iter().map(|&c| row[c]));
        }
        Self::new(
            self.timestamps.clone(),
            idx.iter().map(|&c| self.channels[c].clone()).collect(),
            values,
            self.provenance,
        )
    }

    /// Index of the first row whose timestamp is `>= ts`.
    pub fn lower_bound(&self, ts: i64) -> usize {
        self.timestamps.partition_point(|&t| t < ts)
    }
}
