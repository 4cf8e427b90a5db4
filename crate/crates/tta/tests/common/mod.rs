#![allow(dead_code)]

use std::fmt::Write as _;
use std::path::Path;

use tta::config::ExperimentConfig;
use tta_core::rng::{normal, seeded};

/// Small forecasting run on the generated hourly series.
pub fn tiny_forecast(name: &str, modes: &str, shift: bool) -> ExperimentConfig {
    let mut text = format!(
        r#"
schema_version = 1
name = "{name}"
seed = 3
modes = {modes}

[data.source]
kind = "ett_surrogate"
hours = 600
seed = 2

[data.split]
by = "fractions"
train = 0.6
valid = 0.2

[task]
kind = "future_values"
window_len = 16
horizon = 4
target = "OT"

[model]
hidden = 4
kernel = 3
dilations = [1, 2]

[train]
learning_rate = 1e-3
batch_size = 32
max_epochs = 3
patience = 2

[adapt]
context_size = 8
steps = 2
learning_rate = 1e-3
transforms = 3

[eval]
rolling_window = 20
max_test_days = 60
"#
    );
    if shift {
        text.push_str("\n[shift]\nkind = \"gradual\"\nrate = 0.3\n");
    }
    ExperimentConfig::from_toml(&text).unwrap()
}

/// Writes a random-walk OHLCV file with daily dates.
pub fn write_ohlcv(path: &Path, rows: usize, seed: u64) {
    let mut rng = seeded(seed);
    let mut s = String::from("date,open,high,low,close,volume\n");
    let start = chrono::NaiveDate::from_ymd_opt(2015, 1, 1).unwrap();
    let mut close = 100.0f64;
    for i in 0..rows {
        let open = close;
        close = open * (0.01 * normal(&mut rng)).exp();
        let high = open.max(close) * (1.0 + 0.004 * normal(&mut rng).abs());
        let low = open.min(close) * (1.0 - 0.004 * normal(&mut rng).abs());
        let vol = 1e6 * (1.0 + 0.2 * normal(&mut rng).abs());
        let d = start + chrono::Days::new(i as u64);
        writeln!(s, "{d},{open},{high},{low},{close},{vol}").unwrap();
    }
    std::fs::write(path, s).unwrap();
}

/// Direction task on an OHLCV file.
pub fn tiny_direction(name: &str, csv: &Path) -> ExperimentConfig {
    let text = format!(
        r#"
schema_version = 1
name = "{name}"
seed = 5

[data.source]
kind = "csv"
path = "{}"
schema = "ohlcv"

[data.split]
by = "fractions"
train = 0.6
valid = 0.2

[task]
kind = "direction"
window_len = 10

[model]
hidden = 4
kernel = 3
dilations = [1, 2]

[train]
learning_rate = 1e-3
batch_size = 32
max_epochs = 3
patience = 2

[adapt]
context_size = 8
steps = 2
learning_rate = 1e-3
transforms = 3

[eval]
rolling_window = 20
"#,
        csv.display()
    );
    ExperimentConfig::from_toml(&text).unwrap()
}

/// Every file of a run directory, by name.
pub fn read_dir(dir: &Path) -> std::collections::BTreeMap<String, Vec<u8>> {
    std::fs::read_dir(dir)
        .unwrap()
        .map(|e| e.unwrap())
        .filter(|e| e.file_type().unwrap().is_file())
        .map(|e| (e.file_name().into_string().unwrap(), std::fs::read(e.path()).unwrap()))
        .collect()
}
