use proptest::prelude::*;
use tta_core::evalstat::{
    auc, backtest, classification_metrics, dm_test, expected_calibration_error, long_run_variance, newey_west_lag,
    nw_mean_test, regression_metrics, returns_report, rolling_metrics, DayRecord, LossKind, LossSeries, RollingMetric,
    EQUITY_DAYS_PER_YEAR,
};
use tta_core::rng::{normal, seeded, uniform, Rng};

fn series(losses: Vec<f64>) -> LossSeries {
    let ts = (0..losses.len() as i64).collect();
    LossSeries::new(LossKind::Absolute, ts, losses).unwrap()
}

fn normals(rng: &mut Rng, n: usize, mean: f64, sd: f64) -> Vec<f64> {
    (0..n).map(|_| mean + sd * normal(rng)).collect()
}

#[test]
fn regression_metric_examples() {
    let m = regression_metrics(&[0.0, 0.0, 0.0], &[0.0, 1.0, 2.0]).unwrap();
    assert_eq!(m.mae, 1.0);
    assert!((m.rmse - (5.0f64 / 3.0).sqrt()).abs() < 1e-12);
    assert!((m.r2.unwrap() + 1.5).abs() < 1e-12);
    let t = [0.3, -1.0, 2.0, 0.7];
    let exact = regression_metrics(&t, &t).unwrap();
    assert_eq!((exact.mae, exact.rmse, exact.r2), (0.0, 0.0, Some(1.0)));
    let mean = t.iter().sum::<f64>() / 4.0;
    assert!(regression_metrics(&[mean; 4], &t).unwrap().r2.unwrap().abs() < 1e-12);
    assert_eq!(regression_metrics(&[1.0, 2.0], &[3.0, 3.0]).unwrap().r2, None);
}

#[test]
fn classification_metric_examples() {
    let labels = [1, 0, 1, 1, 0];
    let perfect = classification_metrics(&[1.0, 0.0, 1.0, 1.0, 0.0], &labels).unwrap();
    assert_eq!(
        (perfect.accuracy, perfect.f1, perfect.auc, perfect.ece),
        (1.0, 1.0, Some(1.0), 0.0)
    );
    let flat = classification_metrics(&[0.5; 5], &labels).unwrap();
    // 0.5 predicts up, so accuracy is the share of up days
    assert!((flat.accuracy - 0.6).abs() < 1e-12);
    assert!((flat.ece - 0.1).abs() < 1e-12);
    assert_eq!(classification_metrics(&[0.2, 0.7], &[1, 1]).unwrap().auc, None);
}

#[test]
fn random_scores_have_chance_auc() {
    let mut rng = seeded(11);
    let n = 10_000;
    let scores: Vec<f64> = (0..n).map(|_| uniform(&mut rng, 0.0, 1.0)).collect();
    let labels: Vec<u8> = (0..n).map(|_| u8::from(uniform(&mut rng, 0.0, 1.0) < 0.5)).collect();
    let a = auc(&scores, &labels).unwrap();
    assert!((a - 0.5).abs() < 0.02, "auc {a}");
}

#[test]
fn dm_examples() {
    assert_eq!(newey_west_lag(100), 4);
    let a = series(vec![0.4; 50]);
    assert!(dm_test(&a, &a).is_err());
    let mut rng = seeded(12);
    let mut mean = 0.0;
    for _ in 0..200 {
        let d = normals(&mut rng, 400, 0.5, 1.0);
        mean += dm_test(&series(d), &series(vec![0.0; 400])).unwrap().statistic / 200.0;
    }
    assert!((8.0..=12.0).contains(&mean), "mean DM {mean}");
}

#[test]
fn smaller_losses_give_negative_dm() {
    let mut rng = seeded(13);
    let b: Vec<f64> = (0..300).map(|_| 1.0 + uniform(&mut rng, 0.0, 1.0)).collect();
    let a: Vec<f64> = b.iter().map(|v| v - 0.2 - 0.1 * uniform(&mut rng, 0.0, 1.0)).collect();
    let r = dm_test(&series(a), &series(b)).unwrap();
    assert!(r.statistic < 0.0 && r.p_value < 0.05);
}

#[test]
fn dm_size_under_equal_accuracy() {
    let mut rng = seeded(14);
    let reps = 2000;
    let rejected = (0..reps)
        .filter(|_| {
            let a = normals(&mut rng, 500, 1.0, 1.0);
            let b = normals(&mut rng, 500, 1.0, 1.0);
            dm_test(&series(a), &series(b)).unwrap().p_value < 0.05
        })
        .count();
    let rate = rejected as f64 / reps as f64;
    assert!((0.03..=0.07).contains(&rate), "size {rate}");
}

#[test]
fn nw_test_size_on_iid_returns() {
    let mut rng = seeded(15);
    let ok = (0..500)
        .filter(|_| {
            nw_mean_test(&normals(&mut rng, 10_000, 0.0, 1.0), None)
                .unwrap()
                .t_stat
                .abs()
                < 3.0
        })
        .count();
    assert!(ok >= 495, "{ok} of 500");
}

#[test]
fn nw_variance_without_lags_is_classical() {
    let mut rng = seeded(16);
    let z = normals(&mut rng, 200, 0.1, 1.0);
    let r = nw_mean_test(&z, Some(0)).unwrap();
    let m = z.iter().sum::<f64>() / 200.0;
    let g0 = z.iter().map(|v| (v - m) * (v - m)).sum::<f64>() / 200.0;
    assert!((r.variance - g0 / 200.0).abs() < 1e-15);
}

#[test]
fn hac_recovers_ar1_long_run_variance() {
    let mut rng = seeded(17);
    let phi = 0.5;
    let mut x = Vec::with_capacity(100_000);
    let mut prev = 0.0;
    for _ in 0..100_000 {
        prev = phi * prev + normal(&mut rng);
        x.push(prev);
    }
    let ratio = long_run_variance(&x, 20) / long_run_variance(&x, 0);
    assert!((ratio / 3.0 - 1.0).abs() < 0.2, "ratio {ratio}");
}

#[test]
fn always_long_sharpe_closed_form() {
    let mut rng = seeded(18);
    let r = normals(&mut rng, 1000, 0.001, 0.01);
    let rep = backtest(&vec![0.9; 1000], &r, EQUITY_DAYS_PER_YEAR).unwrap();
    let m = r.iter().sum::<f64>() / 1000.0;
    let s = (r.iter().map(|v| (v - m) * (v - m)).sum::<f64>() / 999.0).sqrt();
    assert!((rep.sharpe.unwrap() - m / s * 252f64.sqrt()).abs() < 1e-12);
    let flat = returns_report(vec![0.25; 32], 252.0).unwrap();
    assert_eq!(flat.sharpe, None);
}

fn day(correct: bool) -> DayRecord {
    DayRecord {
        timestamp: 0,
        regime: None,
        abs_error: 0.0,
        sq_error: 0.0,
        correct: Some(correct),
    }
}

#[test]
fn rolling_step_change_spans_window() {
    let recs: Vec<DayRecord> = (0..40).map(|i| day(i >= 20)).collect();
    let w = 5;
    let curve = rolling_metrics(&recs, w, RollingMetric::Accuracy).unwrap();
    let moving: Vec<usize> = curve
        .iter()
        .filter(|p| p.value > 0.0 && p.value < 1.0)
        .map(|p| p.index)
        .collect();
    assert_eq!(moving, (20..20 + w - 1).collect::<Vec<_>>());
    let full = rolling_metrics(&recs, 40, RollingMetric::Accuracy).unwrap();
    assert_eq!(full.len(), 1);
    assert_eq!(full[0].value, 0.5);
    assert!(rolling_metrics(&recs, 41, RollingMetric::Accuracy).is_err());
}

fn loss_vec() -> impl Strategy<Value = Vec<f64>> {
    prop::collection::vec(0.0f64..5.0, 12..80)
}

proptest! {
    #[test]
    fn dm_is_antisymmetric(a in loss_vec(), seed in any::<u64>()) {
        let mut rng = seeded(seed);
        let b: Vec<f64> = a.iter().map(|v| v + normal(&mut rng)).collect();
        let (sa, sb) = (series(a), series(b));
        let ab = dm_test(&sa, &sb).unwrap();
        let ba = dm_test(&sb, &sa).unwrap();
        prop_assert_eq!(ab.statistic, -ba.statistic);
        prop_assert_eq!(ab.p_value, ba.p_value);
    }

    #[test]
    fn dm_ignores_common_location(a in loss_vec(), c in -3.0f64..3.0, seed in any::<u64>()) {
        let mut rng = seeded(seed);
        let b: Vec<f64> = a.iter().map(|v| v + normal(&mut rng)).collect();
        let base = dm_test(&series(a.clone()), &series(b.clone())).unwrap().statistic;
        let moved = dm_test(
            &series(a.iter().map(|v| v + c).collect()),
            &series(b.iter().map(|v| v + c).collect()),
        ).unwrap().statistic;
        prop_assert!((base - moved).abs() <= 1e-8 * (1.0 + base.abs()));
    }

    #[test]
    fn long_run_variance_is_non_negative(x in prop::collection::vec(-10.0f64..10.0, 1..200), lag in 0usize..40) {
        let scale: f64 = x.iter().map(|v| v * v).sum::<f64>() / x.len() as f64;
        prop_assert!(long_run_variance(&x, lag) >= -1e-12 * scale);
    }

    #[test]
    fn ece_within_unit_interval(p in prop::collection::vec(0.0f64..=1.0, 1..100), seed in any::<u64>()) {
        let mut rng = seeded(seed);
        let labels: Vec<u8> = p.iter().map(|_| u8::from(uniform(&mut rng, 0.0, 1.0) < 0.5)).collect();
        let e = expected_calibration_error(&p, &labels, 10).unwrap();
        prop_assert!((0.0..=1.0).contains(&e));
    }

    #[test]
    fn sharpe_sign_follows_mean(z in prop::collection::vec(-0.05f64..0.05, 2..100)) {
        let rep = returns_report(z.clone(), 252.0).unwrap();
        let mean = z.iter().sum::<f64>() / z.len() as f64;
        if let Some(s) = rep.sharpe {
            prop_assert_eq!(s > 0.0, mean > 0.0);
            prop_assert_eq!(s < 0.0, mean < 0.0);
        }
        prop_assert!(rep.annual_volatility >= 0.0);
    }
}

#[test]
fn dm_power_at_small_gap() {
    // both methods share the day's difficulty; each loss has unit std
    let mut rng = seeded(19);
    let reps = 1000;
    let rejected = (0..reps)
        .filter(|_| {
            let common = normals(&mut rng, 500, 0.0, 0.8f64.sqrt());
            let a: Vec<f64> = common
                .iter()
                .map(|c| 1.0 + c + 0.2f64.sqrt() * normal(&mut rng))
                .collect();
            let b: Vec<f64> = common
                .iter()
                .map(|c| 1.1 + c + 0.2f64.sqrt() * normal(&mut rng))
                .collect();
            dm_test(&series(a), &series(b)).unwrap().p_value < 0.05
        })
        .count();
    let power = rejected as f64 / reps as f64;
    assert!(power > 0.8, "power {power}");
}
