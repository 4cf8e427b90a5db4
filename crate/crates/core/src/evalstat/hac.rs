//! Newey–West (Bartlett kernel) long-run variance, the Diebold–Mariano
//! test of equal predictive accuracy and the HAC t-test of a mean.
//!
//! ```text
//! gamma_h = (1/T) sum_{t=h+1}^{T} (x_t - xbar)(x_{t-h} - xbar)
//! w_h     = 1 - h / (q + 1)
//! Var(xbar) = (gamma_0 + 2 sum_{h=1}^{q} w_h gamma_h) / T
//! q       = floor(4 (T / 100)^(2/9))
//! ```

use alloc::string::String;
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::{Error, Result};

/// Minimum sample size accepted by the tests.
pub const MIN_OBSERVATIONS: usize = 10;

/// Automatic bandwidth `floor(4 (T/100)^(2/9))`.
pub fn newey_west_lag(t: usize) -> usize {
    let q = 4.0 * libm::pow(t as f64 / 100.0, 2.0 / 9.0);
    // guard against 3.9999999 at exact powers
    libm::floor(q + 1e-12) as usize
}

/// Lag-`h` sample autocovariance with the `1/T` normalization.
pub fn autocovariance(x: &[f64], mean: f64, h: usize) -> f64 {
    let t = x.len();
    if h >= t {
        return 0.0;
    }
    let mut s = 0.0;
    for i in h..t {
        s += (x[i] - mean) * (x[i - h] - mean);
    }
    s / t as f64
}

/// Bartlett-weighted long-run variance `gamma_0 + 2 sum w_h gamma_h`. The
/// lag is clipped to `T - 1`.
pub fn long_run_variance(x: &[f64], lag: usize) -> f64 {
    let t = x.len();
    if t == 0 {
        return 0.0;
    }
    let mean = x.iter().sum::<f64>() / t as f64;
    let q = lag.min(t - 1);
    let mut s = autocovariance(x, mean, 0);
    for h in 1..=q {
        let w = 1.0 - h as f64 / (q as f64 + 1.0);
        s += 2.0 * w * autocovariance(x, mean, h);
    }
    s
}

/// Two-sided p-value from the standard normal distribution.
pub fn two_sided_p(z: f64) -> f64 {
    libm::erfc(libm::fabs(z) / core::f64::consts::SQRT_2).clamp(0.0, 1.0)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LossKind {
    CrossEntropy,
    Absolute,
    Squared,
}

/// Per-day losses of one method on one dataset.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossSeries {
    pub kind: LossKind,
    pub timestamps: Vec<i64>,
    pub losses: Vec<f64>,
}

impl LossSeries {
    pub fn new(kind: LossKind, timestamps: Vec<i64>, losses: Vec<f64>) -> Result<Self> {
        if timestamps.len() != losses.len() {
            return Err(Error::dim("loss series", timestamps.len(), losses.len()));
        }
        if let Some(i) = losses.iter().position(|l| !l.is_finite()) {
            return Err(Error::NonFinite {
                what: "loss series",
                index: i,
            });
        }
        Ok(Self {
            kind,
            timestamps,
            losses,
        })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DmResult {
    pub statistic: f64,
    pub p_value: f64,
    pub lag: usize,
    pub n: usize,
    pub mean_difference: f64,
    pub convention: String,
}

pub const DM_CONVENTION: &str = "d_t = loss(A) - loss(B); negative DM means the first method has lower average loss";

/// Diebold–Mariano test on `d_t = loss_A - loss_B` with the automatic lag.
pub fn dm_test(a: &LossSeries, b: &LossSeries) -> Result<DmResult> {
    dm_test_with_lag(a, b, None)
}

pub fn dm_test_with_lag(a: &LossSeries, b: &LossSeries, lag: Option<usize>) -> Result<DmResult> {
    if a.kind != b.kind {
        return Err(Error::config("loss kind", "both series must use the same loss"));
    }
    if a.timestamps != b.timestamps {
        return Err(Error::config("timestamps", "loss series are not aligned"));
    }
    let d: Vec<f64> = a.losses.iter().zip(&b.losses).map(|(x, y)| x - y).collect();
    let t = d.len();
    if t < MIN_OBSERVATIONS {
        return Err(Error::dim("loss series length", MIN_OBSERVATIONS, t));
    }
    let q = lag.unwrap_or_else(|| newey_west_lag(t));
    let lrv = long_run_variance(&d, q);
    debug_assert!(lrv >= -1e-12 * d.iter().map(|x| x * x).sum::<f64>());
    if !(lrv > 0.0) {
        return Err(Error::Degenerate("loss differential has zero long-run variance"));
    }
    let mean = d.iter().sum::<f64>() / t as f64;
    let stat = mean / libm::sqrt(lrv / t as f64);
    Ok(DmResult {
        statistic: stat,
        p_value: two_sided_p(stat),
        lag: q.min(t - 1),
        n: t,
        mean_difference: mean,
        convention: DM_CONVENTION.into(),
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct NwResult {
    pub mean: f64,
    /// HAC variance of the sample mean.
    pub variance: f64,
    pub t_stat: f64,
    pub p_value: f64,
    pub lag: usize,
}

/// Newey–West t-statistic of `E[z] = 0`.
pub fn nw_mean_test(z: &[f64], lag: Option<usize>) -> Result<NwResult> {
    let t = z.len();
    if t < MIN_OBSERVATIONS {
        return Err(Error::dim("return series length", MIN_OBSERVATIONS, t));
    }
    if let Some(i) = z.iter().position(|v| !v.is_finite()) {
        return Err(Error::NonFinite {
            what: "returns",
            index: i,
        });
    }
    let q = lag.unwrap_or_else(|| newey_west_lag(t)).min(t - 1);
    let lrv = long_run_variance(z, q);
    if !(lrv > 0.0) {
        return Err(Error::Degenerate("returns have zero long-run variance"));
    }
    let mean = z.iter().sum::<f64>() / t as f64;
    let variance = lrv / t as f64;
    let t_stat = mean / libm::sqrt(variance);
    Ok(NwResult {
        mean,
        variance,
        t_stat,
        p_value: two_sided_p(t_stat),
        lag: q,
    })
}
