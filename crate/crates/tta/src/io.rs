//! CSV input and output of series frames.

use std::io::{Read, Write};
use std::path::Path;

use anyhow::{anyhow, bail, Context, Result};
use chrono::{DateTime, NaiveDate, NaiveDateTime};
use serde::{Deserialize, Serialize};
use tta_core::data::{Provenance, SeriesFrame};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Schema {
    /// `date` followed by seven value columns.
    Ett,
    /// `date` (or `timestamp`) plus `open, high, low, close, volume`.
    Ohlcv,
}

pub const OHLCV_COLUMNS: [&str; 5] = ["open", "high", "low", "close", "volume"];

/// Parses `YYYY-MM-DD`, `YYYY-MM-DD HH:MM[:SS]`, RFC 3339 or integer epoch
/// seconds into epoch seconds (timezone-naive, read as UTC).
pub fn parse_timestamp(s: &str) -> Result<i64> {
    let s = s.trim();
    if let Ok(v) = s.parse::<i64>() {
        return Ok(v);
    }
    for fmt in [
        "%Y-%m-%d %H:%M:%S",
        "%Y-%m-%d %H:%M",
        "%Y-%m-%dT%H:%M:%S",
        "%Y/%m/%d %H:%M:%S",
    ] {
        if let Ok(dt) = NaiveDateTime::parse_from_str(s, fmt) {
            return Ok(dt.and_utc().timestamp());
        }
    }
    for fmt in ["%Y-%m-%d", "%Y/%m/%d"] {
        if let Ok(d) = NaiveDate::parse_from_str(s, fmt) {
            return Ok(d.and_hms_opt(0, 0, 0).expect("midnight").and_utc().timestamp());
        }
    }
    if let Ok(dt) = DateTime::parse_from_rfc3339(s) {
        return Ok(dt.timestamp());
    }
    bail!("unrecognized date {s:?}")
}

pub fn format_timestamp(ts: i64) -> String {
    match DateTime::from_timestamp(ts, 0) {
        Some(dt) => dt.naive_utc().format("%Y-%m-%d %H:%M:%S").to_string(),
        None => ts.to_string(),
    }
}

pub fn load_csv(path: &Path, schema: Schema) -> Result<SeriesFrame> {
    let file = std::fs::File::open(path).with_context(|| format!("opening {}", path.display()))?;
    read_csv(file, schema).with_context(|| format!("reading {}", path.display()))
}

/// Reads a frame, sorting rows by time. Duplicate timestamps are rejected.
pub fn read_csv<R: Read>(reader: R, schema: Schema) -> Result<SeriesFrame> {
    let mut rdr = csv::ReaderBuilder::new().trim(csv::Trim::All).from_reader(reader);
    let header: Vec<String> = rdr.headers()?.iter().map(str::to_string).collect();
    let lower: Vec<String> = header.iter().map(|h| h.to_ascii_lowercase()).collect();
    let date_col = lower
        .iter()
        .position(|h| h == "date" || h == "timestamp" || h == "datetime")
        .ok_or_else(|| anyhow!("header has no date column"))?;
    let (channels, cols): (Vec<String>, Vec<usize>) = match schema {
        Schema::Ett => {
            if header.len() != 8 || date_col != 0 {
                bail!(
                    "ETT schema expects `date` plus 7 value columns, found {} columns",
                    header.len()
                );
            }
            (header[1..].to_vec(), (1..8).collect())
        }
        Schema::Ohlcv => {
            let mut cols = Vec::new();
            for name in OHLCV_COLUMNS {
                cols.push(
                    lower
                        .iter()
                        .position(|h| h == name)
                        .ok_or_else(|| anyhow!("OHLCV header is missing `{name}`"))?,
                );
            }
            (OHLCV_COLUMNS.iter().map(|s| s.to_string()).collect(), cols)
        }
    };
    let mut rows: Vec<(i64, Vec<f64>, usize)> = Vec::new();
    for (i, rec) in rdr.records().enumerate() {
        let line = i + 2;
        let rec = rec.with_context(|| format!("malformed row at line {line}"))?;
        let ts =
            parse_timestamp(rec.get(date_col).unwrap_or("")).with_context(|| format!("bad date at line {line}"))?;
        let mut vals = Vec::with_capacity(cols.len());
        for (&c, name) in cols.iter().zip(&channels) {
            let field = rec
                .get(c)
                .ok_or_else(|| anyhow!("line {line}: missing column {name}"))?;
            let v: f64 = field
                .parse()
                .with_context(|| format!("line {line}: column {name} is not a number: {field:?}"))?;
            if !v.is_finite() {
                bail!("line {line}: column {name} is not finite");
            }
            vals.push(v);
        }
        rows.push((ts, vals, line));
    }
    if rows.is_empty() {
        bail!("no data rows");
    }
    rows.sort_by_key(|r| r.0);
    if let Some(w) = rows.windows(2).find(|w| w[0].0 == w[1].0) {
        bail!(
            "duplicate timestamp {} at lines {} and {}",
            format_timestamp(w[0].0),
            w[0].2.min(w[1].2),
            w[0].2.max(w[1].2)
        );
    }
    let timestamps = rows.iter().map(|r| r.0).collect();
    let values = rows.into_iter().flat_map(|r| r.1).collect();
    Ok(SeriesFrame::new(timestamps, channels, values, Provenance::Raw)?)
}

pub fn write_frame<W: Write>(writer: W, frame: &SeriesFrame) -> Result<()> {
    let mut w = csv::Writer::from_writer(writer);
    let mut header = vec!["date".to_string()];
    header.extend(frame.channels().iter().cloned());
    w.write_record(&header)?;
    for t in 0..frame.len() {
        let mut rec = vec![format_timestamp(frame.timestamps()[t])];
        rec.extend(frame.row(t).iter().map(|v| v.to_string()));
        w.write_record(&rec)?;
    }
    w.flush()?;
    Ok(())
}

pub fn save_frame(path: &Path, frame: &SeriesFrame) -> Result<()> {
    let file = std::fs::File::create(path).with_context(|| format!("creating {}", path.display()))?;
    write_frame(std::io::BufWriter::new(file), frame)
}
