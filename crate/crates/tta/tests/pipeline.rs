mod common;

use common::{read_dir, tiny_direction, tiny_forecast, write_ohlcv};
use tta::config::{LossAblation, SweepConfig};
use tta::pipeline::{
    adapt_coords, deploy, derive_seed, mark_incomplete, prepare, run_experiment, train, validation_uncertainty,
    DmEntry, Status, STATUS_FILE,
};
use tta::report::{build_tables, dm_note};
use tta::sweep::{expand, run_sweep};
use tta_core::adapt::{calibrate_threshold, AdaptMode};
use tta_core::data::{compute_features, FeatureConfig, Scaler, TracingSource, WindowSource};
use tta_core::evalstat::{dm_test, LossKind, LossSeries};

#[test]
fn same_config_gives_identical_bundles() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = tiny_forecast("det", r#"["no_tta", "bn_stats", "norm_only"]"#, true);
    run_experiment(&cfg, &tmp.path().join("a"), None).unwrap();
    run_experiment(&cfg, &tmp.path().join("b"), None).unwrap();
    let a = read_dir(&tmp.path().join("a"));
    let b = read_dir(&tmp.path().join("b"));
    assert!(a.contains_key("metrics.json") && a.contains_key("adaptation_log_norm_only.csv"));
    assert_eq!(a.keys().collect::<Vec<_>>(), b.keys().collect::<Vec<_>>());
    for (name, bytes) in &a {
        assert!(bytes == &b[name], "{name} differs");
    }
}

#[test]
fn shifted_run_carries_sidecar() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = tiny_forecast("side", r#"["no_tta", "norm_only"]"#, true);
    let ev = run_experiment(&cfg, &tmp.path().join("r"), None).unwrap();
    assert_eq!(ev.metrics.shift.as_deref(), Some("gradual"));
    assert_eq!(ev.metrics.shift_sidecar.as_deref(), Some("shift.json"));
    assert!(tmp.path().join("r/shift.json").exists());
    let status: Status =
        serde_json::from_slice(&std::fs::read(tmp.path().join("r").join(STATUS_FILE)).unwrap()).unwrap();
    assert!(status.complete);
    let tau = ev.metrics.tau.unwrap();
    assert!(tau.is_finite());
    assert_eq!(ev.metrics.dm.len(), 1);
    assert_eq!(
        (ev.metrics.dm[0].first.as_str(), ev.metrics.dm[0].second.as_str()),
        ("norm_only", "no_tta")
    );
}

#[test]
fn frozen_only_run_has_no_threshold_or_comparisons() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = tiny_forecast("frozen", r#"["no_tta"]"#, false);
    let ev = run_experiment(&cfg, &tmp.path().join("r"), None).unwrap();
    assert_eq!(ev.metrics.tau, None);
    assert!(ev.metrics.dm.is_empty());
    assert!(ev.metrics.shift_sidecar.is_none());
    assert!(!tmp.path().join("r/shift.json").exists());
    let m = &ev.metrics.modes["no_tta"];
    assert_eq!(m.fallback_days, 0);
    assert_eq!(m.days, 60);
}

#[test]
fn one_point_sweep_reproduces_plain_run() {
    let tmp = tempfile::tempdir().unwrap();
    let mut cfg = tiny_forecast("sweep1", r#"["no_tta", "norm_only"]"#, true);
    cfg.sweep = Some(SweepConfig::default());
    let plain = run_experiment(&cfg, &tmp.path().join("plain"), None).unwrap();
    let docs = run_sweep(&cfg, &tmp.path().join("sweep"), false).unwrap();
    assert_eq!(docs.len(), 1);
    for m in ["no_tta", "norm_only"] {
        assert_eq!(docs[0].headline(m), plain.metrics.headline(m));
    }
    assert_eq!(docs[0].adapt_seed, plain.metrics.adapt_seed);
    let table = std::fs::read_to_string(tmp.path().join("sweep/sweep.csv")).unwrap();
    let mae = plain.metrics.headline("norm_only").unwrap()[0].unwrap();
    let row: Vec<&str> = table.lines().nth(1).unwrap().split(',').collect();
    let header: Vec<&str> = table.lines().next().unwrap().split(',').collect();
    let col = header.iter().position(|h| *h == "norm_only_mae").unwrap();
    assert_eq!(row[col].parse::<f64>().unwrap(), mae);
}

#[test]
fn three_by_three_grid_writes_every_point() {
    let tmp = tempfile::tempdir().unwrap();
    let mut cfg = tiny_forecast("grid", r#"["no_tta", "norm_only"]"#, false);
    cfg.eval.max_test_days = Some(20);
    cfg.sweep = Some(SweepConfig {
        context_size: vec![4, 6, 8],
        steps: vec![0, 1, 2],
        ..Default::default()
    });
    let points = expand(&cfg, cfg.sweep.as_ref().unwrap()).unwrap();
    let mut seeds: Vec<u64> = points.iter().map(|p| p.seed).collect();
    seeds.sort_unstable();
    seeds.dedup();
    assert_eq!(seeds.len(), 9);
    let docs = run_sweep(&cfg, &tmp.path().join("s"), false).unwrap();
    assert_eq!(docs.len(), 9);
    for i in 0..9 {
        assert!(tmp.path().join(format!("s/points/{i:03}/metrics.json")).exists());
    }
    let table = std::fs::read_to_string(tmp.path().join("s/sweep.csv")).unwrap();
    assert_eq!(table.lines().count(), 10);
    // the frozen model does not depend on adaptation settings
    for d in &docs[1..] {
        assert_eq!(d.headline("no_tta"), docs[0].headline("no_tta"));
    }
}

#[test]
fn loss_ablation_points_carry_weights() {
    let mut cfg = tiny_forecast("abl", r#"["norm_only"]"#, false);
    let grid = SweepConfig {
        losses: vec![
            LossAblation::PrimaryOnly,
            LossAblation::SecondaryOnly,
            LossAblation::Combined,
        ],
        ..Default::default()
    };
    cfg.sweep = Some(grid.clone());
    let pts = expand(&cfg, &grid).unwrap();
    let w: Vec<(f64, f64)> = pts
        .iter()
        .map(|p| (p.config.adapt.alpha, p.config.adapt.beta))
        .collect();
    assert_eq!(w, [(1.0, 0.0), (0.0, 1.0), (1.0, 1.0)]);
}

#[test]
fn failed_run_is_marked_incomplete() {
    let tmp = tempfile::tempdir().unwrap();
    let mut cfg = tiny_forecast("bad", r#"["no_tta"]"#, false);
    cfg.task.target = Some("missing".into());
    let dir = tmp.path().join("r");
    let err = run_experiment(&cfg, &dir, None).unwrap_err();
    assert!(format!("{err:#}").contains("missing"));
    let status: Status = serde_json::from_slice(&std::fs::read(dir.join(STATUS_FILE)).unwrap()).unwrap();
    assert!(!status.complete);
    assert!(status.error.unwrap().contains("windows"));
    mark_incomplete(&dir, &anyhow::anyhow!("again")).unwrap();
    assert!(!dir.join("metrics.json").exists());
}

#[test]
fn deployment_reads_no_future_window() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = tiny_forecast("leak", r#"["norm_only"]"#, true);
    let prep = prepare(&cfg, tmp.path()).unwrap();
    let ck = train(&cfg, &prep).unwrap();
    let coords = adapt_coords(&cfg.adapt);
    let u = validation_uncertainty(
        &ck.params,
        &prep,
        &cfg.adapt,
        derive_seed(cfg.seed, "calibrate", &coords),
    )
    .unwrap();
    let tau = calibrate_threshold(&u, cfg.adapt.threshold_quantile).unwrap();
    let source = TracingSource::new(prep.dataset.clone());
    let mut a = cfg.adapt.clone();
    a.mode = AdaptMode::NormOnly;
    let seed = derive_seed(derive_seed(cfg.seed, "adapt", &coords), "norm_only", &[]);
    let mut audited = 0;
    let mut last = None;
    let traced = deploy(
        &ck.params,
        &source,
        &prep.test_idx,
        &a,
        tau,
        &prep.feature_std,
        seed,
        |day, s| {
            assert_eq!(s.max_seen(), Some(day));
            let reads = s.take_reads();
            assert!(!reads.is_empty());
            assert!(reads.iter().all(|&i| i <= day), "day {day} read {reads:?}");
            audited += 1;
            last = Some(day);
            Ok(())
        },
    )
    .unwrap();
    assert_eq!(audited, prep.test_idx.len());
    assert_eq!(last, prep.test_idx.last().copied());
    // the untraced run inside the pipeline consumed the same stream
    let ev = tta::pipeline::evaluate(&cfg, &prep, &ck).unwrap();
    assert_eq!(ev.runs[0].stream_hash, traced.stream_hash);
    assert_eq!(ev.runs[0].log, traced.log);
}

#[test]
fn scaler_recomputes_from_train_rows() {
    let tmp = tempfile::tempdir().unwrap();
    let csv = tmp.path().join("px.csv");
    write_ohlcv(&csv, 500, 8);
    let cfg = tiny_direction("px", &csv);
    let prep = prepare(&cfg, tmp.path()).unwrap();
    let raw = tta::io::load_csv(&csv, tta::io::Schema::Ohlcv).unwrap();
    // feature rows start after a warm-up, so cut the raw file by time
    let end = raw.lower_bound(prep.frame.timestamps()[prep.split.train.end]);
    let head = tta_core::data::SeriesFrame::new(
        raw.timestamps()[..end].to_vec(),
        raw.channels().to_vec(),
        raw.values()[..end * raw.dim()].to_vec(),
        raw.provenance(),
    )
    .unwrap();
    let feats = compute_features(&head, &FeatureConfig::default()).unwrap();
    assert_eq!(feats.len(), prep.split.train.end);
    let alone = Scaler::fit(&feats, 0..feats.len()).unwrap();
    assert_eq!(alone, prep.scaler);
    let z = alone.transform(&feats).unwrap();
    assert_eq!(z.values(), &prep.frame.values()[..feats.len() * feats.dim()]);
    // windows ending inside the train range match bit for bit
    let w = prep.dataset.window_len();
    for &i in &prep.train_idx {
        let o = prep.dataset.origins[i];
        assert_eq!(
            prep.dataset.window(i),
            &z.values()[(o + 1 - w) * z.dim()..(o + 1) * z.dim()]
        );
    }
}

#[test]
fn report_tables_have_fixed_shapes() {
    let tmp = tempfile::tempdir().unwrap();
    let mut docs = Vec::new();
    for (i, name) in ["AAA", "BBB"].iter().enumerate() {
        let csv = tmp.path().join(format!("{name}.csv"));
        write_ohlcv(&csv, 500, 20 + i as u64);
        docs.push(
            run_experiment(&tiny_direction(name, &csv), &tmp.path().join(name), None)
                .unwrap()
                .metrics,
        );
    }
    docs.push(
        run_experiment(
            &tiny_forecast("ett", r#"["no_tta", "norm_only"]"#, true),
            &tmp.path().join("ett"),
            None,
        )
        .unwrap()
        .metrics,
    );
    let runs: Vec<_> = ["AAA", "BBB", "ett"].iter().map(|n| tmp.path().join(n)).collect();
    let written = tta::report::write_report(&runs, &tmp.path().join("report")).unwrap();
    let tables = build_tables(&docs).unwrap();
    assert_eq!(written.len(), tables.len());

    let t1: Vec<&str> = tables["table1.csv"].lines().collect();
    assert_eq!(t1[0], "Method,Shift,MAE,RMSE,R2");
    assert_eq!(t1.len(), 3);
    assert!(t1[1].starts_with("no_tta,Gradual,"));

    let t2: Vec<&str> = tables["table2.csv"].lines().collect();
    assert_eq!(t2[0], "Method,AAA,BBB,Avg. rank");
    assert_eq!(t2.len(), 4);
    let ranks: f64 = t2[1..]
        .iter()
        .map(|l| l.rsplit(',').next().unwrap().parse::<f64>().unwrap())
        .sum();
    assert!((ranks - 6.0).abs() < 1e-9);

    let t3: Vec<&str> = tables["table3.csv"].lines().collect();
    assert_eq!(t3[0], "Comparison,Dataset,DM Stat,p-value,Notes");
    assert_eq!(t3.len(), 1 + 2 + 2 + 1);
    assert!(t3[1].starts_with("bn_stats vs no_tta,AAA,"));

    for name in ["AAA", "BBB"] {
        let b: Vec<&str> = tables[&format!("backtest_{name}.csv")].lines().collect();
        assert_eq!(b[0], "Strategy,Ann. return,Ann. volatility,Sharpe (NW t)");
        assert_eq!(b.len(), 4);
        assert!(b[1].starts_with("No-TTA,"));
        let cell = b[1].rsplit(',').next().unwrap();
        assert!(cell.ends_with(')') && cell.contains(" ("), "{cell}");
    }
}

#[test]
fn negative_dm_means_first_method_wins() {
    let ts: Vec<i64> = (0..250).collect();
    let b: Vec<f64> = (0..250).map(|i| 1.0 + 0.5 * ((i * 37 % 101) as f64 / 101.0)).collect();
    let a: Vec<f64> = b
        .iter()
        .enumerate()
        .map(|(i, v)| v - 0.1 - 0.05 * ((i * 13 % 7) as f64 / 7.0))
        .collect();
    assert!(a.iter().zip(&b).all(|(x, y)| x < y));
    let r = dm_test(
        &LossSeries::new(LossKind::Absolute, ts.clone(), a).unwrap(),
        &LossSeries::new(LossKind::Absolute, ts, b).unwrap(),
    )
    .unwrap();
    assert!(r.statistic < 0.0 && r.p_value < 0.05);
    assert_eq!(dm_note("A", "B", r.statistic, r.p_value), "A significantly better");

    let tmp = tempfile::tempdir().unwrap();
    let mut doc = run_experiment(
        &tiny_forecast("sign", r#"["no_tta"]"#, false),
        &tmp.path().join("r"),
        None,
    )
    .unwrap()
    .metrics;
    doc.dm.push(DmEntry {
        first: "A".into(),
        second: "B".into(),
        loss: LossKind::Absolute,
        result: Some(r),
        error: None,
    });
    let t3 = &build_tables(&[doc]).unwrap()["table3.csv"];
    let row = t3.lines().nth(1).unwrap();
    assert!(row.starts_with("A vs B,sign,-"), "{row}");
    assert!(row.ends_with(",A significantly better"));
}

#[test]
fn shipped_configs_parse() {
    let dir = std::path::Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs");
    let mut n = 0;
    for e in std::fs::read_dir(dir).unwrap() {
        let p = e.unwrap().path();
        if p.extension().is_some_and(|x| x == "toml") {
            tta::config::ExperimentConfig::load(&p).unwrap_or_else(|e| panic!("{}: {e:#}", p.display()));
            n += 1;
        }
    }
    assert!(n >= 3);
}
