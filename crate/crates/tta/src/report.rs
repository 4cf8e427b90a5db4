//! Aggregation of run directories into summary tables:
//!
//! - `table1.csv`: `Method, Shift, MAE, RMSE, R2` for forecasting runs,
//! - `table2.csv`: direction accuracy per dataset and the average rank,
//! - `table3.csv`: DM comparisons against `no_tta`,
//! - `backtest_<dataset>.csv`: annualized return, volatility and Sharpe
//!   with the Newey–West t-statistic in parentheses.
//!
//! Returns and volatilities are in percent.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;

use anyhow::{bail, Context as _, Result};
use tta_core::adapt::AdaptMode;
use tta_core::evalstat::mean_ranks;

use crate::pipeline::MetricsDoc;

/// Significance level of the notes column.
pub const NOTE_LEVEL: f64 = 0.05;

pub fn load_run(dir: &Path) -> Result<MetricsDoc> {
    let p = dir.join("metrics.json");
    let text = std::fs::read_to_string(&p).with_context(|| format!("reading {}", p.display()))?;
    serde_json::from_str(&text).with_context(|| format!("parsing {}", p.display()))
}

fn strategy_name(mode: &str) -> &str {
    match mode {
        "no_tta" => "No-TTA",
        "bn_stats" => "BN-Stats",
        "norm_only" => "Norm-Only",
        m => m,
    }
}

fn shift_label(s: Option<&str>) -> &str {
    match s {
        Some("gradual") => "Gradual",
        Some("noise") => "Noise",
        Some("structural") => "Structural",
        Some(other) => other,
        None => "None",
    }
}

/// `"X vs Y"` note for a DM statistic under the convention that negative
/// values favour the first method.
pub fn dm_note(first: &str, second: &str, stat: f64, p: f64) -> String {
    if p >= NOTE_LEVEL {
        "no significant difference".into()
    } else if stat < 0.0 {
        format!("{first} significantly better")
    } else {
        format!("{second} significantly better")
    }
}

fn modes_in(docs: &[&MetricsDoc]) -> Vec<&'static str> {
    AdaptMode::ALL
        .iter()
        .map(|m| m.name())
        .filter(|m| docs.iter().all(|d| d.modes.contains_key(*m)))
        .collect()
}

/// Builds every table from the given runs, keyed by file name.
pub fn build_tables(docs: &[MetricsDoc]) -> Result<BTreeMap<String, String>> {
    if docs.is_empty() {
        bail!("no runs to aggregate");
    }
    let mut out = BTreeMap::new();

    let reg: Vec<&MetricsDoc> = docs.iter().filter(|d| !d.task.head().is_classification()).collect();
    if !reg.is_empty() {
        let mut t = String::from("Method,Shift,MAE,RMSE,R2\n");
        for d in &reg {
            for m in AdaptMode::ALL.iter().map(|m| m.name()) {
                if let Some(r) = d.modes.get(m).and_then(|x| x.regression) {
                    let r2 = r.r2.map(|v| format!("{v:.2}")).unwrap_or_default();
                    writeln!(
                        t,
                        "{m},{},{:.2},{:.2},{r2}",
                        shift_label(d.shift.as_deref()),
                        r.mae,
                        r.rmse
                    )?;
                }
            }
        }
        out.insert("table1.csv".into(), t);
    }

    let cls: Vec<&MetricsDoc> = docs.iter().filter(|d| d.task.head().is_classification()).collect();
    if !cls.is_empty() {
        let modes = modes_in(&cls);
        let scores: Vec<Vec<f64>> = modes
            .iter()
            .map(|m| {
                cls.iter()
                    .map(|d| d.modes[*m].classification.map_or(f64::NAN, |c| c.accuracy))
                    .collect()
            })
            .collect();
        let ranks = mean_ranks(&scores, true);
        let mut t = String::from("Method");
        for d in &cls {
            write!(t, ",{}", d.name)?;
        }
        t.push_str(",Avg. rank\n");
        for (i, m) in modes.iter().enumerate() {
            t.push_str(m);
            for v in &scores[i] {
                write!(t, ",{v:.3}")?;
            }
            writeln!(t, ",{:.2}", ranks[i])?;
        }
        out.insert("table2.csv".into(), t);
    }

    let mut t = String::from("Comparison,Dataset,DM Stat,p-value,Notes\n");
    for d in docs {
        for e in &d.dm {
            match &e.result {
                Some(r) => writeln!(
                    t,
                    "{} vs {},{},{:.3},{:.4},{}",
                    e.first,
                    e.second,
                    d.name,
                    r.statistic,
                    r.p_value,
                    dm_note(&e.first, &e.second, r.statistic, r.p_value)
                )?,
                None => writeln!(
                    t,
                    "{} vs {},{},,,{}",
                    e.first,
                    e.second,
                    d.name,
                    e.error.as_deref().unwrap_or("not computed").replace(',', ";")
                )?,
            }
        }
    }
    out.insert("table3.csv".into(), t);

    for d in docs {
        if !d.modes.values().any(|m| m.backtest.is_some()) {
            continue;
        }
        let mut t = String::from("Strategy,Ann. return,Ann. volatility,Sharpe (NW t)\n");
        for m in AdaptMode::ALL.iter().map(|m| m.name()) {
            let Some(b) = d.modes.get(m).and_then(|x| x.backtest.as_ref()) else {
                continue;
            };
            let sharpe = b
                .sharpe
                .map(|s| format!("{s:.3}"))
                .unwrap_or_else(|| "undefined".into());
            let nw = b.nw_t.map(|s| format!("{s:.3}")).unwrap_or_else(|| "undefined".into());
            writeln!(
                t,
                "{},{:.3},{:.3},{sharpe} ({nw})",
                strategy_name(m),
                100.0 * b.annual_return,
                100.0 * b.annual_volatility
            )?;
        }
        out.insert(format!("backtest_{}.csv", d.name), t);
    }
    Ok(out)
}

/// Reads `metrics.json` from every run directory and writes the tables.
pub fn write_report(runs: &[impl AsRef<Path>], out_dir: &Path) -> Result<Vec<String>> {
    let docs: Vec<MetricsDoc> = runs.iter().map(|r| load_run(r.as_ref())).collect::<Result<_>>()?;
    let tables = build_tables(&docs)?;
    std::fs::create_dir_all(out_dir).with_context(|| format!("creating {}", out_dir.display()))?;
    for (name, text) in &tables {
        std::fs::write(out_dir.join(name), text)?;
    }
    Ok(tables.into_keys().collect())
}
