use std::path::PathBuf;

use anyhow::{bail, Context as _, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};
use tta_core::adapt::AdaptMode;
use tta_core::shiftgen::{apply_shift, ShiftSpec};

use tta::checkpoint::Checkpoint;
use tta::config::ExperimentConfig;
use tta::io::{self, Schema};
use tta::pipeline::{self, derive_seed};
use tta::{report, sweep};

/// Test-time adaptation experiments for time-series forecasters.
///
/// Environment: TTA_OUTPUT_ROOT (default `runs`) and TTA_THREADS.
#[derive(Parser)]
#[command(name = "tta", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct RunArgs {
    /// Experiment config (TOML).
    #[arg(short, long)]
    config: PathBuf,
    /// Run directory; defaults to `$TTA_OUTPUT_ROOT/<name>`.
    #[arg(short, long)]
    out: Option<PathBuf>,
    /// Override the master seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Override the modes to deploy.
    #[arg(long, value_delimiter = ',', value_enum)]
    modes: Vec<ModeArg>,
    /// Deploy on at most this many test days.
    #[arg(long)]
    max_test_days: Option<usize>,
}

#[derive(Clone, Copy, ValueEnum)]
#[value(rename_all = "snake_case")]
enum ModeArg {
    NoTta,
    BnStats,
    NormOnly,
}

impl From<ModeArg> for AdaptMode {
    fn from(m: ModeArg) -> Self {
        match m {
            ModeArg::NoTta => AdaptMode::NoTta,
            ModeArg::BnStats => AdaptMode::BnStats,
            ModeArg::NormOnly => AdaptMode::NormOnly,
        }
    }
}

impl RunArgs {
    fn load(&self) -> Result<(ExperimentConfig, PathBuf)> {
        let mut cfg = ExperimentConfig::load(&self.config)?;
        if let Some(s) = self.seed {
            cfg.seed = s;
        }
        if !self.modes.is_empty() {
            cfg.modes = self.modes.iter().map(|m| (*m).into()).collect();
        }
        if self.max_test_days.is_some() {
            cfg.eval.max_test_days = self.max_test_days;
        }
        cfg.validate()?;
        let out = self
            .out
            .clone()
            .unwrap_or_else(|| pipeline::output_root().join(&cfg.name));
        Ok((cfg, out))
    }
}

#[derive(Clone, Copy, ValueEnum)]
enum SchemaArg {
    Ett,
    Ohlcv,
}

#[derive(Clone, Copy, ValueEnum)]
enum ShiftKind {
    Gradual,
    Noise,
    Structural,
}

#[derive(Subcommand)]
enum Command {
    /// Train the backbone and write `checkpoint.json`.
    Train(RunArgs),
    /// Deploy modes from an existing checkpoint and write adaptation logs.
    Adapt {
        #[command(flatten)]
        run: RunArgs,
        #[arg(long)]
        checkpoint: PathBuf,
    },
    /// Apply a synthetic shift to a CSV and write it with a JSON sidecar.
    Shift {
        #[arg(long)]
        input: PathBuf,
        #[arg(long, value_enum, default_value = "ett")]
        schema: SchemaArg,
        #[arg(long)]
        output: PathBuf,
        #[arg(long, value_enum)]
        kind: ShiftKind,
        /// Gradual drift rate in training stds per 1000 steps.
        #[arg(long, default_value_t = tta_core::shiftgen::DRIFT_RATE_MIDPOINT)]
        rate: f64,
        /// Noise inflation factor.
        #[arg(long, default_value_t = 2.0)]
        k: f64,
        #[arg(long, default_value_t = 3)]
        segments: usize,
        #[arg(long, default_value_t = 24)]
        trend_window: usize,
        #[arg(long, default_value_t = 24.0)]
        period: f64,
        #[arg(long, default_value_t = 3)]
        harmonics: usize,
        #[arg(long, default_value_t = 2)]
        change_points: usize,
        #[arg(long, default_value_t = 0.0)]
        noise: f64,
        /// Share of leading rows used for calibration; the shift starts
        /// right after them unless `--start-row` is given.
        #[arg(long, default_value_t = 0.6)]
        train_fraction: f64,
        #[arg(long)]
        start_row: Option<usize>,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Full run: prepare, train (or load), calibrate, deploy, evaluate.
    Evaluate {
        #[command(flatten)]
        run: RunArgs,
        /// Skip training and use this checkpoint.
        #[arg(long)]
        checkpoint: Option<PathBuf>,
    },
    /// Run the config's sweep grid.
    Sweep {
        #[command(flatten)]
        run: RunArgs,
        /// Allow grids above the run guard.
        #[arg(long)]
        force: bool,
    },
    /// Aggregate run directories into summary tables.
    Report {
        #[arg(long, num_args = 1.., required = true)]
        runs: Vec<PathBuf>,
        #[arg(short, long)]
        out: PathBuf,
    },
}

fn main() -> Result<()> {
    match Cli::parse().command {
        Command::Train(run) => {
            let (cfg, out) = run.load()?;
            let prep = pipeline::prepare(&cfg, &pipeline::output_root_for(&out))?;
            let ck = pipeline::train(&cfg, &prep)?;
            std::fs::create_dir_all(&out)?;
            std::fs::write(out.join("config.toml"), cfg.to_toml()?)?;
            ck.save(&out.join("checkpoint.json"))?;
            println!(
                "best epoch {} (validation {}) -> {}",
                ck.best_epoch,
                ck.best_metric,
                out.join("checkpoint.json").display()
            );
        }
        Command::Adapt { run, checkpoint } => {
            let (cfg, out) = run.load()?;
            let ck = Checkpoint::load(&checkpoint)?;
            let prep = pipeline::prepare(&cfg, &pipeline::output_root_for(&out))?;
            let ev = pipeline::evaluate(&cfg, &prep, &ck)?;
            std::fs::create_dir_all(&out)?;
            for (name, bytes) in ev.bundle.files.iter().filter(|(n, _)| n.starts_with("adaptation_log_")) {
                std::fs::write(out.join(name), bytes)?;
                println!("{}", out.join(name).display());
            }
        }
        Command::Shift {
            input,
            schema,
            output,
            kind,
            rate,
            k,
            segments,
            trend_window,
            period,
            harmonics,
            change_points,
            noise,
            train_fraction,
            start_row,
            seed,
        } => {
            let schema = match schema {
                SchemaArg::Ett => Schema::Ett,
                SchemaArg::Ohlcv => Schema::Ohlcv,
            };
            let frame = io::load_csv(&input, schema)?;
            let train_end = (frame.len() as f64 * train_fraction) as usize;
            if train_end == 0 || train_end >= frame.len() {
                bail!("--train-fraction leaves no training or shifted rows");
            }
            let spec = match kind {
                ShiftKind::Gradual => ShiftSpec::Gradual { rate },
                ShiftKind::Noise => ShiftSpec::NoiseInflation {
                    k,
                    segments,
                    trend_window,
                },
                ShiftKind::Structural => ShiftSpec::Structural {
                    period,
                    harmonics,
                    change_points,
                    noise,
                },
            };
            let start = start_row.unwrap_or(train_end);
            let seed = derive_seed(seed, "shift", &[]);
            let (shifted, record) = apply_shift(&frame, &spec, 0..train_end, start, seed)?;
            io::save_frame(&output, &shifted)?;
            let sidecar = output.with_extension("shift.json");
            std::fs::write(&sidecar, serde_json::to_vec_pretty(&record)?)
                .with_context(|| format!("writing {}", sidecar.display()))?;
            println!("{} (metadata {})", output.display(), sidecar.display());
        }
        Command::Evaluate { run, checkpoint } => {
            let (cfg, out) = run.load()?;
            let ck = checkpoint.map(|p| Checkpoint::load(&p)).transpose()?;
            let ev = pipeline::run_experiment(&cfg, &out, ck)?;
            for (mode, m) in &ev.metrics.modes {
                let h = ev.metrics.headline(mode).unwrap_or([None; 3]);
                let f = |v: Option<f64>| v.map(|x| format!("{x:.4}")).unwrap_or_else(|| "-".into());
                println!(
                    "{mode:<10} {} {} {}  fallback {:.3}",
                    f(h[0]),
                    f(h[1]),
                    f(h[2]),
                    m.fallback_rate
                );
            }
            println!("report bundle in {}", out.display());
        }
        Command::Sweep { run, force } => {
            let (cfg, out) = run.load()?;
            let docs = sweep::with_threads(|| sweep::run_sweep(&cfg, &out, force))??;
            println!("{} points -> {}", docs.len(), out.join("sweep.csv").display());
        }
        Command::Report { runs, out } => {
            for name in report::write_report(&runs, &out)? {
                println!("{}", out.join(name).display());
            }
        }
    }
    Ok(())
}
