//! Versioned binary cache of windowed datasets, keyed by the source
//! content, window length, horizon, task and scaler.
//!
//! Layout (little endian): magic `TTAWIN01`, format `u32`, 32-byte key,
//! task JSON (`u32` length + bytes), `n, L, d` as `u64`, inputs as `f64`,
//! label tag `u8` (0 direction, 1 values) with `u64` dim and data, then
//! origins `u64`, timestamps `i64` and regimes `i64` (`-1` for none).

use std::io::{Read, Write};
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use byteorder::{LittleEndian as LE, ReadBytesExt, WriteBytesExt};
use sha2::{Digest, Sha256};
use tta_core::data::{Labels, Scaler, TaskSpec, WindowBatch, WindowDataset};

const MAGIC: &[u8; 8] = b"TTAWIN01";
pub const CACHE_VERSION: u32 = 1;

pub type CacheKey = [u8; 32];

pub fn cache_key(source_hash: &[u8], window_len: usize, task: TaskSpec, scaler: &Scaler) -> CacheKey {
    let mut h = Sha256::new();
    h.update(source_hash);
    h.update((window_len as u64).to_le_bytes());
    h.update((task.horizon() as u64).to_le_bytes());
    h.update(serde_json::to_vec(&task).expect("task serializes"));
    for v in scaler.mean.iter().chain(&scaler.std) {
        h.update(v.to_bits().to_le_bytes());
    }
    h.finalize().into()
}

pub fn cache_path(dir: &Path, key: &CacheKey) -> PathBuf {
    dir.join(format!("{}.ttawin", hex::encode(&key[..16])))
}

fn write_f64s<W: Write>(w: &mut W, v: &[f64]) -> Result<()> {
    for x in v {
        w.write_f64::<LE>(*x)?;
    }
    Ok(())
}

fn read_f64s<R: Read>(r: &mut R, n: usize) -> Result<Vec<f64>> {
    let mut out = vec![0.0; n];
    r.read_f64_into::<LE>(&mut out)?;
    Ok(out)
}

pub fn write_dataset<W: Write>(mut w: W, key: &CacheKey, ds: &WindowDataset) -> Result<()> {
    w.write_all(MAGIC)?;
    w.write_u32::<LE>(CACHE_VERSION)?;
    w.write_all(key)?;
    let task = serde_json::to_vec(&ds.task)?;
    w.write_u32::<LE>(task.len() as u32)?;
    w.write_all(&task)?;
    w.write_u64::<LE>(ds.len() as u64)?;
    w.write_u64::<LE>(ds.inputs.window_len() as u64)?;
    w.write_u64::<LE>(ds.inputs.dim() as u64)?;
    write_f64s(&mut w, ds.inputs.as_slice())?;
    match &ds.labels {
        Labels::Direction(y) => {
            w.write_u8(0)?;
            w.write_u64::<LE>(1)?;
            w.write_all(y)?;
        }
        Labels::Values { dim, data } => {
            w.write_u8(1)?;
            w.write_u64::<LE>(*dim as u64)?;
            write_f64s(&mut w, data)?;
        }
    }
    for &o in &ds.origins {
        w.write_u64::<LE>(o as u64)?;
    }
    for &t in &ds.timestamps {
        w.write_i64::<LE>(t)?;
    }
    for r in &ds.regimes {
        w.write_i64::<LE>(r.map_or(-1, |v| v as i64))?;
    }
    w.flush()?;
    Ok(())
}

/// Reads a dataset, failing if the stored key differs from `key`.
pub fn read_dataset<R: Read>(mut r: R, key: &CacheKey) -> Result<WindowDataset> {
    let mut magic = [0u8; 8];
    r.read_exact(&mut magic)?;
    if &magic != MAGIC {
        bail!("not a window cache file");
    }
    let version = r.read_u32::<LE>()?;
    if version != CACHE_VERSION {
        bail!("unsupported cache format {version}");
    }
    let mut stored = [0u8; 32];
    r.read_exact(&mut stored)?;
    if &stored != key {
        bail!("cache key mismatch");
    }
    let tlen = r.read_u32::<LE>()? as usize;
    let mut tbytes = vec![0u8; tlen];
    r.read_exact(&mut tbytes)?;
    let task: TaskSpec = serde_json::from_slice(&tbytes)?;
    let n = r.read_u64::<LE>()? as usize;
    let l = r.read_u64::<LE>()? as usize;
    let d = r.read_u64::<LE>()? as usize;
    let inputs = WindowBatch::new(l, d, read_f64s(&mut r, n * l * d)?)?;
    let tag = r.read_u8()?;
    let dim = r.read_u64::<LE>()? as usize;
    let labels = match tag {
        0 => {
            let mut y = vec![0u8; n];
            r.read_exact(&mut y)?;
            Labels::Direction(y)
        }
        1 => Labels::Values {
            dim,
            data: read_f64s(&mut r, n * dim)?,
        },
        t => bail!("unknown label tag {t}"),
    };
    let mut origins = Vec::with_capacity(n);
    for _ in 0..n {
        origins.push(r.read_u64::<LE>()? as usize);
    }
    let mut timestamps = Vec::with_capacity(n);
    for _ in 0..n {
        timestamps.push(r.read_i64::<LE>()?);
    }
    let mut regimes = Vec::with_capacity(n);
    for _ in 0..n {
        let v = r.read_i64::<LE>()?;
        regimes.push((v >= 0).then_some(v as usize));
    }
    Ok(WindowDataset {
        task,
        inputs,
        labels,
        origins,
        timestamps,
        regimes,
    })
}

/// Loads the cached dataset for `key` or builds and stores it.
pub fn load_or_build(
    dir: &Path,
    key: &CacheKey,
    build: impl FnOnce() -> Result<WindowDataset>,
) -> Result<WindowDataset> {
    let path = cache_path(dir, key);
    if let Ok(file) = std::fs::File::open(&path) {
        if let Ok(ds) = read_dataset(std::io::BufReader::new(file), key) {
            return Ok(ds);
        }
    }
    let ds = build()?;
    std::fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    // write then rename so a concurrent reader never sees a partial file
    let tmp = path.with_extension(format!("tmp{}", std::process::id()));
    write_dataset(std::io::BufWriter::new(std::fs::File::create(&tmp)?), key, &ds)?;
    std::fs::rename(&tmp, &path)?;
    Ok(ds)
}
