use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::{Error, Result};

/// One evaluated day. For multi-step forecasts the errors are averaged
/// over the horizon.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct DayRecord {
    pub timestamp: i64,
    pub regime: Option<usize>,
    pub abs_error: f64,
    pub sq_error: f64,
    /// Direction hit, for classification.
    pub correct: Option<bool>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RollingMetric {
    Accuracy,
    Mae,
    Rmse,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct CurvePoint {
    /// Index of the last record in the window.
    pub index: usize,
    pub timestamp: i64,
    pub value: f64,
    pub regime: Option<usize>,
}

/// Trailing-window metric for every day with a complete window.
pub fn rolling_metrics(records: &[DayRecord], window: usize, metric: RollingMetric) -> Result<Vec<CurvePoint>> {
    if window == 0 {
        return Err(Error::config("window", "must be positive"));
    }
    if window > records.len() {
        return Err(Error::dim("rolling window", records.len(), window));
    }
    let value = |r: &DayRecord| -> Result<f64> {
        match metric {
            RollingMetric::Accuracy => r
                .correct
                .map(|c| if c { 1.0 } else { 0.0 })
                .ok_or(Error::config("metric", "accuracy needs classification records")),
            RollingMetric::Mae => Ok(r.abs_error),
            RollingMetric::Rmse => Ok(r.sq_error),
        }
    };
    let vals: Vec<f64> = records.iter().map(value).collect::<Result<_>>()?;
    let mut out = Vec::with_capacity(records.len() + 1 - window);
    for end in window - 1..records.len() {
        // direct sum per window: no drift from a running accumulator
        let mean = vals[end + 1 - window..=end].iter().sum::<f64>() / window as f64;
        let v = if metric == RollingMetric::Rmse {
            libm::sqrt(mean)
        } else {
            mean
        };
        out.push(CurvePoint {
            index: end,
            timestamp: records[end].timestamp,
            value: v,
            regime: records[end].regime,
        });
    }
    Ok(out)
}
