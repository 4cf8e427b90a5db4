use alloc::format;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use super::{Provenance, SeriesFrame};
use crate::{Error, Result};

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct FeatureConfig {
    pub momentum_windows: Vec<usize>,
    pub atr_period: usize,
}

impl Default for FeatureConfig {
    fn default() -> Self {
        Self {
            momentum_windows: vec![5, 21],
            atr_period: 14,
        }
    }
}

/// `r_t = ln C_t - ln C_{t-1}`; the first entry is NaN.
pub fn log_returns(close: &[f64]) -> Vec<f64> {
    let mut r = vec![f64::NAN; close.len()];
    for t in 1..close.len() {
        r[t] = libm::log(close[t]) - libm::log(close[t - 1]);
    }
    r
}

/// Builds the OHLCV feature channels:
///
/// - `r`: log return,
/// - `mom_N`: `ln C_t - ln C_{t-N}`,
/// - `rev_N`: `-(r_{t-1} + ... + r_{t-N})`,
/// - `atr`: EMA (smoothing `2 / (period + 1)`) of the true range,
/// - `parkinson`: `ln(H/L)^2 / (4 ln 2)`,
/// - `garman_klass`: `0.5 ln(H/L)^2 - (2 ln 2 - 1) ln(C/O)^2`.
///
/// Rows whose lags are undefined are dropped, so the output starts at row
/// `max(N) + 1` of the input.
pub fn compute_features(ohlcv: &SeriesFrame, cfg: &FeatureConfig) -> Result<SeriesFrame> {
    let col = |name: &str| {
        ohlcv
            .channel_index(name)
            .map(|i| ohlcv.column(i))
            .ok_or_else(|| Error::config("ohlcv", format!("missing `{name}` column")))
    };
    let (open, high, low, close) = (col("open")?, col("high")?, col("low")?, col("close")?);
    if cfg.momentum_windows.is_empty() || cfg.momentum_windows.contains(&0) {
        return Err(Error::config("momentum_windows", "need at least one positive window"));
    }
    if cfg.atr_period == 0 {
        return Err(Error::config("atr_period", "must be positive"));
    }
    let n = close.len();
    for t in 0..n {
        for (name, v) in [
            ("open", open[t]),
            ("high", high[t]),
            ("low", low[t]),
            ("close", close[t]),
        ] {
            if !(v > 0.0) || !v.is_finite() {
                return Err(Error::Data {
                    row: t,
                    reason: format!("non-positive {name} price {v}"),
                });
            }
        }
        if high[t] < low[t] {
            return Err(Error::Data {
                row: t,
                reason: format!("high {} below low {}", high[t], low[t]),
            });
        }
    }
    let max_n = *cfg.momentum_windows.iter().max().expect("non-empty");
    let first = max_n + 1;
    if n <= first {
        return Err(Error::Empty("not enough rows for the requested momentum windows"));
    }

    let r = log_returns(&close);
    let log_c: Vec<f64> = close.iter().map(|c| libm::log(*c)).collect();

    let alpha = 2.0 / (cfg.atr_period as f64 + 1.0);
    let mut atr = vec![f64::NAN; n];
    for t in 1..n {
        let tr = (high[t] - low[t])
            .max(libm::fabs(high[t] - close[t - 1]))
            .max(libm::fabs(low[t] - close[t - 1]));
        atr[t] = if t == 1 {
            tr
        } else {
            alpha * tr + (1.0 - alpha) * atr[t - 1]
        };
    }

    let ln2 = core::f64::consts::LN_2;
    let mut channels: Vec<String> = vec!["r".into()];
    for &w in &cfg.momentum_windows {
        channels.push(format!("mom_{w}"));
    }
    for &w in &cfg.momentum_windows {
        channels.push(format!("rev_{w}"));
    }
    channels.extend(["atr".into(), "parkinson".into(), "garman_klass".into()]);

    let mut values = Vec::with_capacity((n - first) * channels.len());
    for t in first..n {
        values.push(r[t]);
        for &w in &cfg.momentum_windows {
            values.push(log_c[t] - log_c[t - w]);
        }
        for &w in &cfg.momentum_windows {
            let s: f64 = (1..=w).map(|i| r[t - i]).sum();
            values.push(-s);
        }
        let hl = libm::log(high[t] / low[t]);
        let co = libm::log(close[t] / open[t]);
        values.push(atr[t]);
        values.push(hl * hl / (4.0 * ln2));
        values.push(0.5 * hl * hl - (2.0 * ln2 - 1.0) * co * co);
    }
    SeriesFrame::new(
        ohlcv.timestamps()[first..].to_vec(),
        channels,
        values,
        Provenance::Features,
    )
}
