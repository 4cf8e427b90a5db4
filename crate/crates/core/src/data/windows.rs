use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use super::{SeriesFrame, WindowBatch};
use crate::backbone::TaskHead;
use crate::{Error, Result};

/// What a window is labelled with. `target` below is the per-row series
/// passed to [`make_windows`] (raw log returns for market data, the
/// standardized target channel for ETT-style forecasting).
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind")]
pub enum TaskSpec {
    /// `y = 1` iff `target[t + 1] > 0`; ties go to class 0.
    Direction,
    /// Scalar `sum_{h=1..H} target[t + h]`.
    CumulativeReturn { horizon: usize },
    /// The vector `target[t + 1 ..= t + H]`.
    FutureValues { horizon: usize },
}

impl TaskSpec {
    pub fn horizon(&self) -> usize {
        match self {
            TaskSpec::Direction => 1,
            TaskSpec::CumulativeReturn { horizon } | TaskSpec::FutureValues { horizon } => *horizon,
        }
    }

    pub fn head(&self) -> TaskHead {
        match self {
            TaskSpec::Direction => TaskHead::Classification,
            TaskSpec::CumulativeReturn { .. } => TaskHead::Regression { horizon: 1 },
            TaskSpec::FutureValues { horizon } => TaskHead::Regression { horizon: *horizon },
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub enum Labels {
    Direction(Vec<u8>),
    /// Row-major `[n][dim]`.
    Values {
        dim: usize,
        data: Vec<f64>,
    },
}

impl Labels {
    pub fn len(&self) -> usize {
        match self {
            Labels::Direction(v) => v.len(),
            Labels::Values { dim, data } => data.len() / dim,
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn select(&self, idx: &[usize]) -> Labels {
        match self {
            Labels::Direction(v) => Labels::Direction(idx.iter().map(|&i| v[i]).collect()),
            Labels::Values { dim, data } => Labels::Values {
                dim: *dim,
                data: idx
                    .iter()
                    .flat_map(|&i| data[i * dim..(i + 1) * dim].iter().copied())
                    .collect(),
            },
        }
    }

    /// Label `i` as reals (direction labels become 0.0 / 1.0).
    pub fn values(&self, i: usize) -> Vec<f64> {
        match self {
            Labels::Direction(v) => alloc::vec![f64::from(v[i])],
            Labels::Values { dim, data } => data[i * dim..(i + 1) * dim].to_vec(),
        }
    }
}

/// Sliding-window samples. Sample `i` has origin row `origins[i] = t`; its
/// input covers rows `t - L + 1 ..= t` and its label rows `t + 1 ..= t + H`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct WindowDataset {
    pub task: TaskSpec,
    pub inputs: WindowBatch,
    pub labels: Labels,
    pub origins: Vec<usize>,
    pub timestamps: Vec<i64>,
    pub regimes: Vec<Option<usize>>,
}

impl WindowDataset {
    pub fn len(&self) -> usize {
        self.origins.len()
    }

    pub fn is_empty(&self) -> bool {
        self.origins.is_empty()
    }

    pub fn select(&self, idx: &[usize]) -> WindowDataset {
        WindowDataset {
            task: self.task,
            inputs: self.inputs.select(idx),
            labels: self.labels.select(idx),
            origins: idx.iter().map(|&i| self.origins[i]).collect(),
            timestamps: idx.iter().map(|&i| self.timestamps[i]).collect(),
            regimes: idx.iter().map(|&i| self.regimes[i]).collect(),
        }
    }

    /// Samples whose origin and whole label span lie in `rows`.
    pub fn within(&self, rows: core::ops::Range<usize>) -> WindowDataset {
        let h = self.task.horizon();
        let idx: Vec<usize> = (0..self.len())
            .filter(|&i| rows.contains(&self.origins[i]) && self.origins[i] + h < rows.end)
            .collect();
        self.select(&idx)
    }

    /// Index of the sample with the given origin row.
    pub fn index_of_origin(&self, row: usize) -> Option<usize> {
        self.origins.binary_search(&row).ok()
    }
}

pub fn make_windows(frame: &SeriesFrame, target: &[f64], window_len: usize, task: TaskSpec) -> Result<WindowDataset> {
    let n_rows = frame.len();
    let h = task.horizon();
    if target.len() != n_rows {
        return Err(Error::dim("target series", n_rows, target.len()));
    }
    if window_len == 0 || h == 0 {
        return Err(Error::config("window", "window length and horizon must be positive"));
    }
    if n_rows < window_len + h {
        return Err(Error::Empty("frame shorter than window length plus horizon"));
    }
    let d = frame.dim();
    let count = n_rows - window_len - h + 1;
    let mut data = Vec::with_capacity(count * window_len * d);
    let mut origins = Vec::with_capacity(count);
    let mut timestamps = Vec::with_capacity(count);
    let mut dir = Vec::new();
    let mut vals = Vec::new();
    for t in window_len - 1..window_len - 1 + count {
        data.extend_from_slice(&frame.values()[(t + 1 - window_len) * d..(t + 1) * d]);
        origins.push(t);
        timestamps.push(frame.timestamps()[t]);
        let future = &target[t + 1..=t + h];
        if let Some(i) = future.iter().position(|v| !v.is_finite()) {
            return Err(Error::NonFinite {
                what: "label target",
                index: t + 1 + i,
            });
        }
        match task {
            TaskSpec::Direction => dir.push(u8::from(future[0] > 0.0)),
            TaskSpec::CumulativeReturn { .. } => vals.push(future.iter().sum()),
            TaskSpec::FutureValues { .. } => vals.extend_from_slice(future),
        }
    }
    let labels = match task {
        TaskSpec::Direction => Labels::Direction(dir),
        TaskSpec::CumulativeReturn { .. } => Labels::Values { dim: 1, data: vals },
        TaskSpec::FutureValues { horizon } => Labels::Values {
            dim: horizon,
            data: vals,
        },
    };
    Ok(WindowDataset {
        task,
        inputs: WindowBatch::new(window_len, d, data)?,
        labels,
        origins,
        timestamps,
        regimes: alloc::vec![None; count],
    })
}
