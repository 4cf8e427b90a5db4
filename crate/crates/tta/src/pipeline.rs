//! The experiment pipeline: load, shift, featurize, split, scale, window,
//! train, calibrate the fallback threshold on validation, deploy each
//! adaptation mode over the test stream and write the report bundle.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use anyhow::{anyhow, bail, Context as _, Result};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use tta_core::adapt::{
    adapt_day, calibrate_threshold, uncertainty, AdaptConfig, AdaptMode, AdaptState, DayLog, UncertaintyKind,
};
use tta_core::backbone::{train_supervised, Architecture, BackboneParams};
use tta_core::data::{
    build_context, chrono_split, compute_features, make_windows, Labels, Regime, Scaler, SeriesFrame, SplitBoundaries,
    SplitDescriptor, TaskSpec, WindowDataset, WindowSource,
};
use tta_core::evalstat::{
    classification_metrics, cross_entropy_losses, dm_test, position, regression_metrics, reliability_bins,
    returns_report, rolling_metrics, ClassificationMetrics, DayRecord, DmResult, LossKind, LossSeries,
    RegressionMetrics, RollingMetric, DM_CONVENTION, ECE_BINS,
};
use tta_core::rng;
use tta_core::shiftgen::{apply_shift, ett_surrogate, ShiftRecord, ShiftSpec};

use crate::cache;
use crate::checkpoint::{Checkpoint, CHECKPOINT_VERSION};
use crate::config::{ExperimentConfig, SourceConfig, SplitConfig, TaskKind};
use crate::io::{self, format_timestamp, Schema};

pub const OUTPUT_ROOT_ENV: &str = "TTA_OUTPUT_ROOT";
pub const THREADS_ENV: &str = "TTA_THREADS";

/// `$TTA_OUTPUT_ROOT`, or `runs` in the working directory.
pub fn output_root() -> PathBuf {
    std::env::var_os(OUTPUT_ROOT_ENV)
        .map(PathBuf::from)
        .unwrap_or_else(|| PathBuf::from("runs"))
}

/// Stable seed from the master seed, a component name and coordinates.
pub fn derive_seed(master: u64, component: &str, coords: &[String]) -> u64 {
    let mut h = Sha256::new();
    h.update(master.to_le_bytes());
    for part in std::iter::once(component).chain(coords.iter().map(String::as_str)) {
        h.update((part.len() as u64).to_le_bytes());
        h.update(part.as_bytes());
    }
    let d = h.finalize();
    u64::from_le_bytes(d[..8].try_into().expect("8 bytes"))
}

/// Coordinates of an adaptation setting; seeds derived from them are
/// identical whether the run comes from `evaluate` or a sweep point.
pub fn adapt_coords(a: &AdaptConfig) -> Vec<String> {
    vec![
        format!("W={}", a.context_size),
        format!("S={}", a.steps),
        format!("lr={:016x}", a.learning_rate.to_bits()),
        format!("q={:016x}", a.threshold_quantile.to_bits()),
        format!("aug={}", a.augmentation.name()),
        format!("alpha={:016x}", a.alpha.to_bits()),
        format!("beta={:016x}", a.beta.to_bits()),
        format!("drift={:016x}", a.drift.to_bits()),
        format!("rho={:016x}", a.ema_rate.to_bits()),
        format!("K={}", a.transforms),
    ]
}

fn stage<T>(name: &'static str, r: Result<T>) -> Result<T> {
    r.with_context(|| format!("stage `{name}` failed"))
}

/// Everything derived from the data before training.
#[derive(Clone, Debug)]
pub struct Prepared {
    /// Model inputs after shift, features, channel selection and scaling.
    pub frame: SeriesFrame,
    pub scaler: Scaler,
    pub split: SplitDescriptor,
    pub dataset: WindowDataset,
    pub train_idx: Vec<usize>,
    pub valid_idx: Vec<usize>,
    pub test_idx: Vec<usize>,
    /// Next-step raw log return of each sample, for market tasks.
    pub realized: Option<Vec<f64>>,
    /// Per-channel std of the scaled training rows.
    pub feature_std: Vec<f64>,
    pub shift: Option<ShiftRecord>,
    pub source_hash: [u8; 32],
}

impl Prepared {
    pub fn train_set(&self) -> WindowDataset {
        self.dataset.select(&self.train_idx)
    }

    pub fn valid_set(&self) -> WindowDataset {
        self.dataset.select(&self.valid_idx)
    }
}

fn load_source(cfg: &ExperimentConfig) -> Result<(SeriesFrame, Schema)> {
    match &cfg.data.source {
        SourceConfig::Csv { path, schema } => Ok((io::load_csv(path, *schema)?, *schema)),
        SourceConfig::EttSurrogate { hours, seed } => {
            Ok((ett_surrogate(*hours, &mut rng::seeded(*seed))?, Schema::Ett))
        }
    }
}

fn boundaries(frame: &SeriesFrame, split: &SplitConfig) -> Result<SplitBoundaries> {
    match split {
        SplitConfig::Dates { train_end, valid_end } => Ok(SplitBoundaries {
            train_end: io::parse_timestamp(train_end).context("split.train_end")?,
            valid_end: io::parse_timestamp(valid_end).context("split.valid_end")?,
        }),
        SplitConfig::Fractions { train, valid } => {
            let n = frame.len();
            let te = (n as f64 * train) as usize;
            let ve = (n as f64 * (train + valid)) as usize;
            if te == 0 || ve <= te || ve >= n {
                bail!("split fractions leave an empty split on {n} rows");
            }
            Ok(SplitBoundaries {
                train_end: frame.timestamps()[te],
                valid_end: frame.timestamps()[ve],
            })
        }
    }
}

fn regimes(cfg: &ExperimentConfig) -> Result<Vec<Regime>> {
    cfg.data
        .regimes
        .iter()
        .map(|r| {
            Ok(Regime {
                name: r.name.clone(),
                start: io::parse_timestamp(&r.start).with_context(|| format!("regime {}", r.name))?,
                end: io::parse_timestamp(&r.end).with_context(|| format!("regime {}", r.name))?,
            })
        })
        .collect()
}

fn frame_hash(frame: &SeriesFrame, target: &[f64]) -> [u8; 32] {
    let mut h = Sha256::new();
    for c in frame.channels() {
        h.update((c.len() as u64).to_le_bytes());
        h.update(c.as_bytes());
    }
    for t in frame.timestamps() {
        h.update(t.to_le_bytes());
    }
    for v in frame.values().iter().chain(target) {
        h.update(v.to_bits().to_le_bytes());
    }
    h.finalize().into()
}

/// Loads and transforms the data. The shift, when configured, is applied
/// to the raw series from the first test row on and calibrated on the
/// training rows.
pub fn prepare(cfg: &ExperimentConfig, output_root: &Path) -> Result<Prepared> {
    let (raw, schema) = stage("load", load_source(cfg))?;
    let bounds = stage("split", boundaries(&raw, &cfg.data.split))?;
    let regimes = stage("split", regimes(cfg))?;
    let raw_split = stage("split", chrono_split(&raw, bounds, &[]).map_err(Into::into))?;

    let (raw, shift) = match &cfg.shift {
        None => (raw, None),
        Some(spec) => {
            let seed = derive_seed(cfg.seed, "shift", &[]);
            let (f, rec) = stage(
                "shift",
                apply_shift(&raw, spec, raw_split.train.clone(), raw_split.test.start, seed).map_err(Into::into),
            )?;
            (f, Some(rec))
        }
    };

    let features = match schema {
        Schema::Ohlcv => stage(
            "features",
            compute_features(&raw, &cfg.data.features).map_err(Into::into),
        )?,
        Schema::Ett => raw,
    };
    let names: Vec<&str> = if cfg.data.channels.is_empty() {
        features.channels().iter().map(String::as_str).collect()
    } else {
        cfg.data.channels.iter().map(String::as_str).collect()
    };
    let inputs = stage("features", features.select_channels(&names).map_err(Into::into))?;
    let split = stage("split", chrono_split(&inputs, bounds, &regimes).map_err(Into::into))?;
    let scaler = stage("scale", Scaler::fit(&inputs, split.train.clone()).map_err(Into::into))?;
    let frame = stage("scale", scaler.transform(&inputs).map_err(Into::into))?;

    let task = cfg.task.spec();
    let returns = features.channel_index("r").map(|c| features.column(c));
    let target = match cfg.task.kind {
        TaskKind::Direction | TaskKind::CumulativeReturn => returns
            .clone()
            .ok_or_else(|| anyhow!("stage `windows` failed: market tasks need the OHLCV schema"))?,
        TaskKind::FutureValues => {
            let name = match &cfg.task.target {
                Some(t) => t.clone(),
                None => features.channels().last().expect("non-empty").clone(),
            };
            let c = features
                .channel_index(&name)
                .ok_or_else(|| anyhow!("stage `windows` failed: no target channel `{name}`"))?;
            let one = features.select_channels(&[name.as_str()])?;
            let s = Scaler::fit(&one, split.train.clone())?;
            s.transform_channel(0, &features.column(c))
        }
    };
    let source_hash = frame_hash(&frame, &target);
    let build = || -> Result<WindowDataset> {
        let mut ds = make_windows(&frame, &target, cfg.task.window_len, task)?;
        ds.regimes = ds.origins.iter().map(|&o| split.regime_of_row(o)).collect();
        Ok(ds)
    };
    let dataset = stage(
        "windows",
        if cfg.data.cache {
            let key = cache::cache_key(&source_hash, cfg.task.window_len, task, &scaler);
            cache::load_or_build(&output_root.join("cache"), &key, build)
        } else {
            build()
        },
    )?;

    let h = task.horizon();
    let pick = |rows: &std::ops::Range<usize>| -> Vec<usize> {
        (0..dataset.len())
            .filter(|&i| rows.contains(&dataset.origins[i]) && dataset.origins[i] + h < rows.end)
            .collect()
    };
    let train_idx = pick(&split.train);
    let valid_idx = pick(&split.valid);
    let mut test_idx = pick(&split.test);
    if let Some(m) = cfg.eval.max_test_days {
        test_idx.truncate(m);
    }
    if train_idx.is_empty() || valid_idx.is_empty() || test_idx.is_empty() {
        bail!(
            "stage `windows` failed: {} train, {} validation and {} test windows; every split needs at least one",
            train_idx.len(),
            valid_idx.len(),
            test_idx.len()
        );
    }
    let realized = returns.map(|r| dataset.origins.iter().map(|&o| r[o + 1]).collect());
    let d = frame.dim();
    let n = split.train.len() as f64;
    let feature_std = (0..d)
        .map(|c| {
            let col = &frame.column(c)[split.train.clone()];
            let m = col.iter().sum::<f64>() / n;
            (col.iter().map(|v| (v - m) * (v - m)).sum::<f64>() / n).sqrt()
        })
        .collect();
    Ok(Prepared {
        frame,
        scaler,
        split,
        dataset,
        train_idx,
        valid_idx,
        test_idx,
        realized,
        feature_std,
        shift,
        source_hash,
    })
}

pub fn train(cfg: &ExperimentConfig, prep: &Prepared) -> Result<Checkpoint> {
    let arch = Architecture::new(
        prep.frame.dim(),
        cfg.task.window_len,
        cfg.model.hidden,
        cfg.model.kernel,
        cfg.model.dilations.clone(),
        cfg.task.spec().head(),
    );
    let mut tc = cfg.train.clone();
    tc.seed = derive_seed(cfg.seed, "train", &[tc.seed.to_string()]);
    let out = stage(
        "train",
        arch.and_then(|a| train_supervised(a, &prep.train_set(), &prep.valid_set(), &tc))
            .map_err(Into::into),
    )?;
    Ok(Checkpoint {
        format_version: CHECKPOINT_VERSION,
        params: out.params,
        scaler: prep.scaler.clone(),
        channels: prep.frame.channels().to_vec(),
        train_seed: tc.seed,
        best_epoch: out.best_epoch,
        best_metric: out.best_metric,
        history: out.history,
    })
}

/// Uncertainty proxy of every validation day under the frozen checkpoint.
pub fn validation_uncertainty(
    params: &BackboneParams,
    prep: &Prepared,
    adapt: &AdaptConfig,
    seed: u64,
) -> Result<Vec<f64>> {
    let mut r = rng::seeded(seed);
    prep.valid_idx
        .iter()
        .map(|&day| {
            let ctx = build_context(&prep.dataset, day, adapt.context_size)?;
            let u = uncertainty(
                params,
                &ctx.batch,
                adapt.transforms,
                adapt.augmentation,
                &prep.feature_std,
                &mut r,
            )?;
            Ok(u.value)
        })
        .collect()
}

/// One deployed mode: the per-day log and a digest of every context batch
/// it consumed.
#[derive(Clone, Debug)]
pub struct ModeRun {
    pub mode: AdaptMode,
    pub log: Vec<DayLog>,
    pub stream_hash: String,
}

/// Streams `days` in order through [`adapt_day`], reading windows only via
/// `source`. `audit` runs after each day with the source, so tests can
/// inspect which windows were read.
#[allow(clippy::too_many_arguments)]
pub fn deploy<S: WindowSource>(
    checkpoint: &BackboneParams,
    source: &S,
    days: &[usize],
    cfg: &AdaptConfig,
    tau: f64,
    feature_std: &[f64],
    seed: u64,
    mut audit: impl FnMut(usize, &S) -> Result<()>,
) -> Result<ModeRun> {
    let mut params = checkpoint.clone();
    let mut state = AdaptState::new(&params, tau)?;
    let mut r = rng::seeded(seed);
    let mut h = Sha256::new();
    for &day in days {
        let ctx = build_context(source, day, cfg.context_size)?;
        for i in &ctx.indices {
            h.update((*i as u64).to_le_bytes());
        }
        for v in ctx.batch.as_slice() {
            h.update(v.to_bits().to_le_bytes());
        }
        adapt_day(&mut params, &mut state, &ctx, cfg, feature_std, &mut r)
            .with_context(|| format!("adaptation failed on sample {day}"))?;
        audit(day, source)?;
    }
    Ok(ModeRun {
        mode: cfg.mode,
        log: state.into_log(),
        stream_hash: hex::encode(h.finalize()),
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainSummary {
    pub seed: u64,
    pub best_epoch: usize,
    pub best_metric: f64,
    pub epochs: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BacktestSummary {
    pub annual_return: f64,
    pub annual_volatility: f64,
    pub sharpe: Option<f64>,
    pub nw_t: Option<f64>,
    pub nw_p: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RegimeMetrics {
    pub days: usize,
    pub regression: Option<RegressionMetrics>,
    pub classification: Option<ClassificationMetrics>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModeMetrics {
    pub days: usize,
    pub regression: Option<RegressionMetrics>,
    pub classification: Option<ClassificationMetrics>,
    /// Mean of the per-day loss used in the DM tests.
    pub mean_loss: f64,
    pub fallback_days: usize,
    pub fallback_rate: f64,
    pub non_finite_days: usize,
    pub backtest: Option<BacktestSummary>,
    pub regimes: BTreeMap<String, RegimeMetrics>,
    pub stream_hash: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DmEntry {
    pub first: String,
    pub second: String,
    pub loss: LossKind,
    pub result: Option<DmResult>,
    pub error: Option<String>,
}

/// `metrics.json`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsDoc {
    pub name: String,
    pub task: TaskSpec,
    pub shift: Option<String>,
    pub shift_sidecar: Option<String>,
    pub checkpoint: String,
    pub master_seed: u64,
    pub adapt_seed: u64,
    pub train: TrainSummary,
    pub tau: Option<f64>,
    pub uncertainty_kind: Option<UncertaintyKind>,
    pub test_days: usize,
    pub modes: BTreeMap<String, ModeMetrics>,
    pub dm: Vec<DmEntry>,
    pub dm_convention: String,
}

impl MetricsDoc {
    /// Headline numbers of a mode: `(MAE, RMSE, R²)` or
    /// `(accuracy, AUC, ECE)`.
    pub fn headline(&self, mode: &str) -> Option<[Option<f64>; 3]> {
        let m = self.modes.get(mode)?;
        match (&m.regression, &m.classification) {
            (Some(r), _) => Some([Some(r.mae), Some(r.rmse), r.r2]),
            (_, Some(c)) => Some([Some(c.accuracy), c.auc, Some(c.ece)]),
            _ => None,
        }
    }
}

/// Files of one run directory, keyed by relative name.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct Bundle {
    pub files: BTreeMap<String, Vec<u8>>,
}

impl Bundle {
    pub fn insert(&mut self, name: impl Into<String>, bytes: impl Into<Vec<u8>>) {
        self.files.insert(name.into(), bytes.into());
    }

    pub fn write(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
        for (name, bytes) in &self.files {
            let p = dir.join(name);
            std::fs::write(&p, bytes).with_context(|| format!("writing {}", p.display()))?;
        }
        Ok(())
    }
}

pub const STATUS_FILE: &str = "status.json";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Status {
    pub complete: bool,
    pub error: Option<String>,
}

fn shift_name(spec: &ShiftSpec) -> &'static str {
    match spec {
        ShiftSpec::Gradual { .. } => "gradual",
        ShiftSpec::NoiseInflation { .. } => "noise",
        ShiftSpec::Structural { .. } => "structural",
    }
}

fn fmt_opt(v: Option<f64>) -> String {
    v.map(|x| x.to_string()).unwrap_or_default()
}

fn nan_blank(v: f64) -> String {
    fmt_opt((!v.is_nan()).then_some(v))
}

fn join(v: &[f64]) -> String {
    v.iter().map(|x| x.to_string()).collect::<Vec<_>>().join(";")
}

struct ModeEval {
    metrics: ModeMetrics,
    losses: LossSeries,
    files: Vec<(String, String)>,
}

fn evaluate_mode(cfg: &ExperimentConfig, prep: &Prepared, run: &ModeRun, tau: Option<f64>) -> Result<ModeEval> {
    let ds = &prep.dataset;
    let days = &prep.test_idx;
    let name = run.mode.name();
    let n = days.len();
    let timestamps: Vec<i64> = days.iter().map(|&d| ds.timestamps[d]).collect();
    let regime_name = |d: usize| {
        ds.regimes[d]
            .map(|r| prep.split.regimes[r].name.clone())
            .unwrap_or_default()
    };

    let mut records = Vec::with_capacity(n);
    let (regression, classification, losses, kind);
    let mut regime_rows: BTreeMap<Option<usize>, Vec<usize>> = BTreeMap::new();
    for (k, &d) in days.iter().enumerate() {
        regime_rows.entry(ds.regimes[d]).or_default().push(k);
    }
    let mut regimes = BTreeMap::new();
    let mut files = Vec::new();
    match &ds.labels {
        Labels::Direction(y) => {
            let p_up: Vec<f64> = run.log.iter().map(|l| l.prediction[1]).collect();
            let labels: Vec<u8> = days.iter().map(|&d| y[d]).collect();
            classification = Some(classification_metrics(&p_up, &labels)?);
            regression = None;
            losses = cross_entropy_losses(&p_up, &labels)?;
            kind = LossKind::CrossEntropy;
            for k in 0..n {
                let e = p_up[k] - f64::from(labels[k]);
                records.push(DayRecord {
                    timestamp: timestamps[k],
                    regime: ds.regimes[days[k]],
                    abs_error: e.abs(),
                    sq_error: e * e,
                    correct: Some(tta_core::evalstat::predicted_class(p_up[k]) == labels[k]),
                });
            }
            for (r, rows) in &regime_rows {
                if let Some(r) = r {
                    let pp: Vec<f64> = rows.iter().map(|&k| p_up[k]).collect();
                    let ll: Vec<u8> = rows.iter().map(|&k| labels[k]).collect();
                    regimes.insert(
                        prep.split.regimes[*r].name.clone(),
                        RegimeMetrics {
                            days: rows.len(),
                            regression: None,
                            classification: Some(classification_metrics(&pp, &ll)?),
                        },
                    );
                }
            }
            let mut csv = String::from("bin,lower,upper,count,confidence,accuracy\n");
            for (i, b) in reliability_bins(&p_up, &labels, ECE_BINS)?.iter().enumerate() {
                writeln!(
                    csv,
                    "{i},{},{},{},{},{}",
                    b.lower,
                    b.upper,
                    b.count,
                    nan_blank(b.confidence),
                    nan_blank(b.accuracy)
                )?;
            }
            files.push((format!("reliability_{name}.csv"), csv));
        }
        Labels::Values { dim, data } => {
            let mut preds = Vec::with_capacity(n * dim);
            let mut targets = Vec::with_capacity(n * dim);
            let mut day_loss = Vec::with_capacity(n);
            for (k, &d) in days.iter().enumerate() {
                let p = &run.log[k].prediction;
                let t = &data[d * dim..(d + 1) * dim];
                let ae = p.iter().zip(t).map(|(a, b)| (a - b).abs()).sum::<f64>() / *dim as f64;
                let se = p.iter().zip(t).map(|(a, b)| (a - b) * (a - b)).sum::<f64>() / *dim as f64;
                preds.extend_from_slice(p);
                targets.extend_from_slice(t);
                day_loss.push(ae);
                records.push(DayRecord {
                    timestamp: timestamps[k],
                    regime: ds.regimes[d],
                    abs_error: ae,
                    sq_error: se,
                    correct: None,
                });
            }
            regression = Some(regression_metrics(&preds, &targets)?);
            classification = None;
            losses = day_loss;
            kind = LossKind::Absolute;
            for (r, rows) in &regime_rows {
                if let Some(r) = r {
                    let pp: Vec<f64> = rows
                        .iter()
                        .flat_map(|&k| preds[k * dim..(k + 1) * dim].to_vec())
                        .collect();
                    let tt: Vec<f64> = rows
                        .iter()
                        .flat_map(|&k| targets[k * dim..(k + 1) * dim].to_vec())
                        .collect();
                    regimes.insert(
                        prep.split.regimes[*r].name.clone(),
                        RegimeMetrics {
                            days: rows.len(),
                            regression: Some(regression_metrics(&pp, &tt)?),
                            classification: None,
                        },
                    );
                }
            }
        }
    }

    let backtest = match &prep.realized {
        Some(real) if n >= 2 => {
            let z: Vec<f64> = run
                .log
                .iter()
                .zip(days)
                .map(|(l, &d)| {
                    let p_up = match ds.task {
                        TaskSpec::Direction => l.prediction[1],
                        _ => {
                            if l.prediction[0] >= 0.0 {
                                1.0
                            } else {
                                0.0
                            }
                        }
                    };
                    position(p_up) * real[d]
                })
                .collect();
            let rep = returns_report(z, cfg.eval.days_per_year)?;
            Some(BacktestSummary {
                annual_return: rep.annual_return,
                annual_volatility: rep.annual_volatility,
                sharpe: rep.sharpe,
                nw_t: rep.nw.map(|r| r.t_stat),
                nw_p: rep.nw.map(|r| r.p_value),
            })
        }
        _ => None,
    };

    let window = cfg.eval.rolling_window.min(n);
    let (first, second) = match ds.labels {
        Labels::Direction(_) => (RollingMetric::Accuracy, RollingMetric::Rmse),
        Labels::Values { .. } => (RollingMetric::Mae, RollingMetric::Rmse),
    };
    let a = rolling_metrics(&records, window, first)?;
    let b = rolling_metrics(&records, window, second)?;
    let first_name = if first == RollingMetric::Accuracy {
        "accuracy"
    } else {
        "mae"
    };
    let mut csv = format!("index,timestamp,regime,{first_name},rmse\n");
    for (pa, pb) in a.iter().zip(&b) {
        writeln!(
            csv,
            "{},{},{},{},{}",
            pa.index,
            format_timestamp(pa.timestamp),
            pa.regime.map(|r| prep.split.regimes[r].name.as_str()).unwrap_or(""),
            pa.value,
            pb.value
        )?;
    }
    files.push((format!("rolling_{name}.csv"), csv));

    let mut log = String::from(
        "day,sample,timestamp,mode,u_t,tau,fallback,non_finite,loss_total,loss_primary,loss_secondary,loss_drift,delta_phi_norm,prediction,target,regime\n",
    );
    for (k, (l, &d)) in run.log.iter().zip(days).enumerate() {
        writeln!(
            log,
            "{k},{d},{},{name},{},{},{},{},{},{},{},{},{},{},{},{}",
            format_timestamp(ds.timestamps[d]),
            fmt_opt(l.uncertainty),
            if run.mode == AdaptMode::NormOnly {
                fmt_opt(tau)
            } else {
                String::new()
            },
            u8::from(l.fallback),
            u8::from(l.non_finite),
            fmt_opt(l.loss_total),
            fmt_opt(l.loss_primary),
            fmt_opt(l.loss_secondary),
            fmt_opt(l.loss_drift),
            l.delta_phi_norm,
            join(&l.prediction),
            join(&ds.labels.values(d)),
            regime_name(d),
        )?;
    }
    files.push((format!("adaptation_log_{name}.csv"), log));

    let fallback_days = run.log.iter().filter(|l| l.fallback).count();
    let mean_loss = losses.iter().sum::<f64>() / n as f64;
    Ok(ModeEval {
        metrics: ModeMetrics {
            days: n,
            regression,
            classification,
            mean_loss,
            fallback_days,
            fallback_rate: fallback_days as f64 / n as f64,
            non_finite_days: run.log.iter().filter(|l| l.non_finite).count(),
            backtest,
            regimes,
            stream_hash: run.stream_hash.clone(),
        },
        losses: LossSeries::new(kind, timestamps, losses)?,
        files,
    })
}

/// Result of evaluating one checkpoint under one adaptation setting.
#[derive(Clone, Debug)]
pub struct Evaluation {
    pub metrics: MetricsDoc,
    pub runs: Vec<ModeRun>,
    pub bundle: Bundle,
}

/// Calibrates tau, deploys every configured mode from the same checkpoint
/// and assembles the report bundle (without writing it).
pub fn evaluate(cfg: &ExperimentConfig, prep: &Prepared, ck: &Checkpoint) -> Result<Evaluation> {
    if ck.channels.as_slice() != prep.frame.channels() {
        bail!(
            "stage `evaluate` failed: checkpoint channels {:?} do not match the data",
            ck.channels
        );
    }
    let coords = adapt_coords(&cfg.adapt);
    let adapt_seed = derive_seed(cfg.seed, "adapt", &coords);
    let needs_tau = cfg.modes.contains(&AdaptMode::NormOnly);
    let tau = if needs_tau {
        let u = stage(
            "calibrate",
            validation_uncertainty(
                &ck.params,
                prep,
                &cfg.adapt,
                derive_seed(cfg.seed, "calibrate", &coords),
            ),
        )?;
        Some(stage(
            "calibrate",
            calibrate_threshold(&u, cfg.adapt.threshold_quantile).map_err(Into::into),
        )?)
    } else {
        None
    };

    let mut runs = Vec::new();
    for &mode in &cfg.modes {
        let mut a = cfg.adapt.clone();
        a.mode = mode;
        let seed = derive_seed(adapt_seed, mode.name(), &[]);
        let run = stage(
            "deploy",
            deploy(
                &ck.params,
                &prep.dataset,
                &prep.test_idx,
                &a,
                tau.unwrap_or(0.0),
                &prep.feature_std,
                seed,
                |_, _| Ok(()),
            ),
        )?;
        runs.push(run);
    }
    if let Some(w) = runs.windows(2).find(|w| w[0].stream_hash != w[1].stream_hash) {
        bail!(
            "modes {} and {} consumed different window streams",
            w[0].mode.name(),
            w[1].mode.name()
        );
    }

    let mut bundle = Bundle::default();
    let mut modes = BTreeMap::new();
    let mut losses = BTreeMap::new();
    for run in &runs {
        let ev = stage("evaluate", evaluate_mode(cfg, prep, run, tau))?;
        for (name, text) in ev.files {
            bundle.insert(name, text);
        }
        modes.insert(run.mode.name().to_string(), ev.metrics);
        losses.insert(run.mode, ev.losses);
    }
    let mut dm = Vec::new();
    if let Some(base) = losses.get(&AdaptMode::NoTta) {
        for mode in &cfg.modes {
            if *mode == AdaptMode::NoTta {
                continue;
            }
            let l = &losses[mode];
            let (result, error) = match dm_test(l, base) {
                Ok(r) => (Some(r), None),
                Err(e) => (None, Some(e.to_string())),
            };
            dm.push(DmEntry {
                first: mode.name().into(),
                second: AdaptMode::NoTta.name().into(),
                loss: l.kind,
                result,
                error,
            });
        }
    }

    let kind = if cfg.task.spec().head().is_classification() {
        UncertaintyKind::MeanEntropy
    } else {
        UncertaintyKind::AugmentationVariance
    };
    let metrics = MetricsDoc {
        name: cfg.name.clone(),
        task: cfg.task.spec(),
        shift: cfg.shift.as_ref().map(|s| shift_name(s).to_string()),
        shift_sidecar: prep.shift.as_ref().map(|_| "shift.json".to_string()),
        checkpoint: "checkpoint.json".into(),
        master_seed: cfg.seed,
        adapt_seed,
        train: TrainSummary {
            seed: ck.train_seed,
            best_epoch: ck.best_epoch,
            best_metric: ck.best_metric,
            epochs: ck.history.len(),
        },
        tau,
        uncertainty_kind: needs_tau.then_some(kind),
        test_days: prep.test_idx.len(),
        modes,
        dm,
        dm_convention: DM_CONVENTION.into(),
    };
    bundle.insert("metrics.json", serde_json::to_vec_pretty(&metrics)?);
    bundle.insert("config.toml", cfg.to_toml()?);
    bundle.insert("checkpoint.json", ck.to_json()?);
    if let Some(rec) = &prep.shift {
        bundle.insert("shift.json", serde_json::to_vec_pretty(rec)?);
    }
    bundle.insert(
        STATUS_FILE,
        serde_json::to_vec_pretty(&Status {
            complete: true,
            error: None,
        })?,
    );
    Ok(Evaluation { metrics, runs, bundle })
}

/// Writes `status.json` marking `dir` incomplete.
pub fn mark_incomplete(dir: &Path, err: &anyhow::Error) -> Result<()> {
    std::fs::create_dir_all(dir)?;
    let status = Status {
        complete: false,
        error: Some(format!("{err:#}")),
    };
    std::fs::write(dir.join(STATUS_FILE), serde_json::to_vec_pretty(&status)?)?;
    Ok(())
}

/// Full run. When `checkpoint` is given training is skipped.
pub fn run_experiment(cfg: &ExperimentConfig, out_dir: &Path, checkpoint: Option<Checkpoint>) -> Result<Evaluation> {
    let result = (|| {
        let prep = prepare(cfg, &output_root_for(out_dir))?;
        let ck = match checkpoint {
            Some(ck) => ck,
            None => train(cfg, &prep)?,
        };
        evaluate(cfg, &prep, &ck)
    })();
    match result {
        Ok(ev) => {
            ev.bundle.write(out_dir)?;
            Ok(ev)
        }
        Err(e) => {
            let _ = mark_incomplete(out_dir, &e);
            Err(e)
        }
    }
}

/// The parent of a run directory, which holds the shared window cache.
pub fn output_root_for(out_dir: &Path) -> PathBuf {
    out_dir.parent().map(Path::to_path_buf).unwrap_or_else(output_root)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn seeds_are_stable_and_separate_components() {
        let a = derive_seed(7, "train", &[]);
        assert_eq!(a, derive_seed(7, "train", &[]));
        assert_ne!(a, derive_seed(8, "train", &[]));
        assert_ne!(a, derive_seed(7, "adapt", &[]));
        // length prefixes keep ("ab", "c") apart from ("a", "bc")
        assert_ne!(
            derive_seed(0, "x", &["ab".into(), "c".into()]),
            derive_seed(0, "x", &["a".into(), "bc".into()])
        );
    }
}
