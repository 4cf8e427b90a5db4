//! Forecast metrics, Diebold–Mariano / Newey–West inference, calibration
//! and the directional backtest.

mod backtest;
mod hac;
mod metrics;
mod rolling;

pub use backtest::{backtest, position, returns_report, BacktestReport, EQUITY_DAYS_PER_YEAR, FX_DAYS_PER_YEAR};
pub use hac::{
    autocovariance, dm_test, dm_test_with_lag, long_run_variance, newey_west_lag, nw_mean_test, two_sided_p, DmResult,
    LossKind, LossSeries, NwResult, DM_CONVENTION, MIN_OBSERVATIONS,
};
pub use metrics::{
    auc, average_ranks, classification_metrics, cross_entropy_losses, expected_calibration_error, predicted_class,
    regression_metrics, reliability_bins, ClassificationMetrics, RegressionMetrics, ReliabilityBin, ECE_BINS,
};
pub use rolling::{rolling_metrics, CurvePoint, DayRecord, RollingMetric};

use alloc::vec::Vec;

/// Mean rank of each method across datasets (rank 1 = best score), ties
/// sharing the average of the ranks they span. `scores[m][k]` is method
/// `m` on dataset `k`.
pub fn mean_ranks(scores: &[Vec<f64>], higher_is_better: bool) -> Vec<f64> {
    let methods = scores.len();
    if methods == 0 {
        return Vec::new();
    }
    let datasets = scores[0].len();
    let mut total = alloc::vec![0.0; methods];
    for k in 0..datasets {
        let col: Vec<f64> = scores
            .iter()
            .map(|s| if higher_is_better { -s[k] } else { s[k] })
            .collect();
        for (t, r) in total.iter_mut().zip(average_ranks(&col)) {
            *t += r;
        }
    }
    total.into_iter().map(|t| t / datasets as f64).collect()
}
