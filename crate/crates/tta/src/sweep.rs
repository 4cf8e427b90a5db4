//! Ablation sweeps over adaptation settings. All points share one trained
//! checkpoint; each point derives its adaptation seed from its own
//! coordinates, so a one-point grid reproduces a plain run.

use std::fmt::Write as _;
use std::path::Path;

use anyhow::{bail, Context as _, Result};
use rayon::prelude::*;
use tta_core::adapt::AdaptMode;

use crate::config::{ExperimentConfig, LossAblation, SweepConfig, MAX_SWEEP_RUNS};
use crate::pipeline::{self, adapt_coords, derive_seed, MetricsDoc};

/// One grid point: the base config with adapt fields overridden.
#[derive(Clone, Debug)]
pub struct SweepPoint {
    pub index: usize,
    pub config: ExperimentConfig,
    pub losses: Option<LossAblation>,
    pub seed: u64,
}

fn axis<T: Clone>(v: &[T], base: T) -> Vec<T> {
    if v.is_empty() {
        vec![base]
    } else {
        v.to_vec()
    }
}

/// Expands the grid in row-major order (context size outermost).
pub fn expand(cfg: &ExperimentConfig, grid: &SweepConfig) -> Result<Vec<SweepPoint>> {
    let n = grid.size();
    if n > MAX_SWEEP_RUNS && !grid.force {
        bail!("sweep has {n} runs, above the guard of {MAX_SWEEP_RUNS}; set sweep.force = true or pass --force");
    }
    let a = &cfg.adapt;
    let losses: Vec<Option<LossAblation>> = if grid.losses.is_empty() {
        vec![None]
    } else {
        grid.losses.iter().copied().map(Some).collect()
    };
    let mut out = Vec::with_capacity(n);
    for w in axis(&grid.context_size, a.context_size) {
        for s in axis(&grid.steps, a.steps) {
            for lr in axis(&grid.learning_rate, a.learning_rate) {
                for q in axis(&grid.threshold_quantile, a.threshold_quantile) {
                    for aug in axis(&grid.augmentation, a.augmentation) {
                        for l in &losses {
                            let mut c = cfg.clone();
                            c.sweep = None;
                            c.adapt.context_size = w;
                            c.adapt.steps = s;
                            c.adapt.learning_rate = lr;
                            c.adapt.threshold_quantile = q;
                            c.adapt.augmentation = aug;
                            if let Some(l) = l {
                                (c.adapt.alpha, c.adapt.beta) = l.weights();
                            }
                            c.validate().with_context(|| format!("sweep point {}", out.len()))?;
                            let seed = derive_seed(c.seed, "adapt", &adapt_coords(&c.adapt));
                            out.push(SweepPoint {
                                index: out.len(),
                                config: c,
                                losses: *l,
                                seed,
                            });
                        }
                    }
                }
            }
        }
    }
    Ok(out)
}

/// Header and rows of the sweep table.
pub fn sweep_table(points: &[SweepPoint], docs: &[MetricsDoc], modes: &[AdaptMode]) -> Result<String> {
    let classification = docs.first().is_some_and(|d| d.task.head().is_classification());
    let cols = if classification {
        ["accuracy", "auc", "ece"]
    } else {
        ["mae", "rmse", "r2"]
    };
    let mut s = String::from(
        "point,context_size,steps,learning_rate,threshold_quantile,augmentation,losses,alpha,beta,seed,tau",
    );
    for m in modes {
        for c in cols {
            write!(s, ",{}_{c}", m.name())?;
        }
        write!(s, ",{}_fallback_rate", m.name())?;
    }
    s.push('\n');
    for (p, d) in points.iter().zip(docs) {
        let a = &p.config.adapt;
        write!(
            s,
            "{},{},{},{},{},{},{},{},{},{},{}",
            p.index,
            a.context_size,
            a.steps,
            a.learning_rate,
            a.threshold_quantile,
            a.augmentation.name(),
            p.losses.map(|l| l.name()).unwrap_or(""),
            a.alpha,
            a.beta,
            p.seed,
            d.tau.map(|t| t.to_string()).unwrap_or_default()
        )?;
        for m in modes {
            let h = d.headline(m.name()).unwrap_or([None; 3]);
            for v in h {
                write!(s, ",{}", v.map(|x| x.to_string()).unwrap_or_default())?;
            }
            write!(
                s,
                ",{}",
                d.modes.get(m.name()).map(|x| x.fallback_rate).unwrap_or(f64::NAN)
            )?;
        }
        s.push('\n');
    }
    Ok(s)
}

/// Runs every grid point and writes `points/NNN/` bundles plus
/// `sweep.csv` under `out_dir`. Returns the per-point metrics.
pub fn run_sweep(cfg: &ExperimentConfig, out_dir: &Path, force: bool) -> Result<Vec<MetricsDoc>> {
    let mut grid = cfg.sweep.clone().unwrap_or_default();
    grid.force |= force;
    let points = expand(cfg, &grid)?;
    let prep = pipeline::prepare(cfg, &pipeline::output_root_for(out_dir))?;
    let ck = pipeline::train(cfg, &prep)?;
    let docs: Vec<MetricsDoc> = points
        .par_iter()
        .map(|p| -> Result<MetricsDoc> {
            let dir = out_dir.join("points").join(format!("{:03}", p.index));
            match pipeline::evaluate(&p.config, &prep, &ck) {
                Ok(ev) => {
                    ev.bundle.write(&dir)?;
                    Ok(ev.metrics)
                }
                Err(e) => {
                    let _ = pipeline::mark_incomplete(&dir, &e);
                    Err(e.context(format!("sweep point {}", p.index)))
                }
            }
        })
        .collect::<Result<_>>()?;
    std::fs::create_dir_all(out_dir)?;
    std::fs::write(out_dir.join("config.toml"), cfg.to_toml()?)?;
    std::fs::write(out_dir.join("sweep.csv"), sweep_table(&points, &docs, &cfg.modes)?)?;
    Ok(docs)
}

/// Runs `f` on a rayon pool sized by `$TTA_THREADS` when set.
pub fn with_threads<T: Send>(f: impl FnOnce() -> T + Send) -> Result<T> {
    match std::env::var(pipeline::THREADS_ENV) {
        Ok(v) => {
            let n: usize = v
                .parse()
                .with_context(|| format!("{} must be a positive integer", pipeline::THREADS_ENV))?;
            let pool = rayon::ThreadPoolBuilder::new().num_threads(n).build()?;
            Ok(pool.install(f))
        }
        Err(_) => Ok(f()),
    }
}
