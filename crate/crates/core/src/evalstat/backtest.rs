use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use super::hac::{nw_mean_test, NwResult};
use crate::{Error, Result};

pub const EQUITY_DAYS_PER_YEAR: f64 = 252.0;
pub const FX_DAYS_PER_YEAR: f64 = 260.0;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BacktestReport {
    /// `mean(z) * D`
    pub annual_return: f64,
    /// `std(z) * sqrt(D)`, sample standard deviation.
    pub annual_volatility: f64,
    /// `None` when the volatility is zero.
    pub sharpe: Option<f64>,
    /// `None` when the HAC variance is degenerate.
    pub nw: Option<NwResult>,
    pub returns: Vec<f64>,
}

/// `+1` when `p_up >= 0.5`, otherwise `-1`.
#[inline]
pub fn position(p_up: f64) -> f64 {
    if p_up >= 0.5 {
        1.0
    } else {
        -1.0
    }
}

/// Directional strategy: hold `position(p_t)` over the next day's return.
/// `realized[i]` must be the return earned after prediction `i`.
pub fn backtest(p_up: &[f64], realized: &[f64], days_per_year: f64) -> Result<BacktestReport> {
    let z: Vec<f64> = if p_up.len() == realized.len() {
        p_up.iter().zip(realized).map(|(p, r)| position(*p) * r).collect()
    } else {
        return Err(Error::dim("realized returns", p_up.len(), realized.len()));
    };
    returns_report(z, days_per_year)
}

/// Annualized summary of a daily strategy return series.
pub fn returns_report(z: Vec<f64>, days_per_year: f64) -> Result<BacktestReport> {
    if z.len() < 2 {
        return Err(Error::Empty("need at least two strategy returns"));
    }
    if !(days_per_year > 0.0) {
        return Err(Error::config("days_per_year", "must be positive"));
    }
    if let Some(i) = z.iter().position(|v| !v.is_finite()) {
        return Err(Error::NonFinite {
            what: "strategy returns",
            index: i,
        });
    }
    let n = z.len() as f64;
    let mean = z.iter().sum::<f64>() / n;
    let var = z.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / (n - 1.0);
    let vol = libm::sqrt(var) * libm::sqrt(days_per_year);
    let ann = mean * days_per_year;
    Ok(BacktestReport {
        annual_return: ann,
        annual_volatility: vol,
        sharpe: (vol > 0.0).then(|| ann / vol),
        nw: nw_mean_test(&z, None).ok(),
        returns: z,
    })
}
