//! Synthetic regime shifts applied channel-wise to clean series, plus a
//! seasonal hourly generator shaped like the ETT transformer data.
//!
//! All series are row-major `[T][d]`.

use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;
use core::f64::consts::PI;
use core::ops::Range;

use serde::{Deserialize, Serialize};

use crate::data::{Provenance, SeriesFrame};
use crate::rng::{self, Rng};
use crate::{Error, Result};

pub const MIN_SEGMENT: usize = 96;
pub const MAX_SEGMENT: usize = 192;

fn check_shape(values: &[f64], dim: usize) -> Result<usize> {
    if dim == 0 || values.len() % dim != 0 {
        return Err(Error::dim("series values", dim, values.len()));
    }
    if values.is_empty() {
        return Err(Error::Empty("series"));
    }
    Ok(values.len() / dim)
}

/// Per-channel location-scale ramp
/// `x_t = (1 + kappa t/T) s_t + mu0 + nu t/T`, `t = 1..=T`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GradualDrift {
    pub kappa: Vec<f64>,
    pub nu: Vec<f64>,
    pub mu0: Vec<f64>,
}

impl GradualDrift {
    pub fn uniform(dim: usize, kappa: f64, nu: f64, mu0: f64) -> Self {
        Self {
            kappa: vec![kappa; dim],
            nu: vec![nu; dim],
            mu0: vec![mu0; dim],
        }
    }

    /// Coefficients whose end-of-series change in mean and std is `rate`
    /// training stds per 1000 steps over a ramp of `len` steps:
    /// `kappa = rate len / 1000`, `nu = rate len / 1000 * std - kappa * mean`.
    pub fn calibrated(train_mean: &[f64], train_std: &[f64], len: usize, rate: f64) -> Result<Self> {
        if train_mean.len() != train_std.len() {
            return Err(Error::dim("training std", train_mean.len(), train_std.len()));
        }
        if len == 0 {
            return Err(Error::Empty("drift ramp"));
        }
        let kappa = rate * len as f64 / 1000.0;
        Ok(Self {
            kappa: vec![kappa; train_mean.len()],
            nu: train_mean
                .iter()
                .zip(train_std)
                .map(|(m, s)| kappa * s - kappa * m)
                .collect(),
            mu0: vec![0.0; train_mean.len()],
        })
    }
}

/// Midpoint of the calibration band `[0.2, 0.4]`.
pub const DRIFT_RATE_MIDPOINT: f64 = 0.3;

pub fn gradual_drift(values: &[f64], dim: usize, drift: &GradualDrift) -> Result<Vec<f64>> {
    let t_len = check_shape(values, dim)?;
    for v in [&drift.kappa, &drift.nu, &drift.mu0] {
        if v.len() != dim {
            return Err(Error::dim("drift coefficients", dim, v.len()));
        }
        if let Some(i) = v.iter().position(|x| !x.is_finite()) {
            return Err(Error::NonFinite {
                what: "drift coefficient",
                index: i,
            });
        }
    }
    let mut out = values.to_vec();
    for (i, row) in out.chunks_exact_mut(dim).enumerate() {
        let r = (i + 1) as f64 / t_len as f64;
        for c in 0..dim {
            row[c] = (1.0 + drift.kappa[c] * r) * row[c] + drift.mu0[c] + drift.nu[c] * r;
        }
    }
    Ok(out)
}

/// Draws `count` non-overlapping segments with lengths uniform in
/// `[96, 192]` and uniform starts, by rejection.
pub fn sample_segments(len: usize, count: usize, rng: &mut Rng) -> Result<Vec<Range<usize>>> {
    if count == 0 {
        return Ok(Vec::new());
    }
    if count * MAX_SEGMENT > len {
        return Err(Error::config("segments", "series too short for the requested segments"));
    }
    const MAX_ATTEMPTS: usize = 10_000;
    let mut out: Vec<Range<usize>> = Vec::with_capacity(count);
    let mut attempts = 0;
    while out.len() < count {
        attempts += 1;
        if attempts > MAX_ATTEMPTS {
            return Err(Error::config("segments", "could not place non-overlapping segments"));
        }
        let l = rng::int_inclusive(rng, MIN_SEGMENT, MAX_SEGMENT);
        let s = rng::int_inclusive(rng, 0, len - l);
        let cand = s..s + l;
        if out.iter().all(|r| cand.end <= r.start || r.end <= cand.start) {
            out.push(cand);
        }
    }
    out.sort_by_key(|r| r.start);
    Ok(out)
}

/// Residual std of each channel after subtracting a trailing moving
/// average of `window` steps.
pub fn residual_std(values: &[f64], dim: usize, window: usize) -> Result<Vec<f64>> {
    let t_len = check_shape(values, dim)?;
    if window == 0 || t_len < window + 1 {
        return Err(Error::config("window", "series shorter than the moving-average window"));
    }
    let mut out = vec![0.0; dim];
    for c in 0..dim {
        let col: Vec<f64> = values.iter().skip(c).step_by(dim).copied().collect();
        let mut sum: f64 = col[..window].iter().sum();
        let mut resid = Vec::with_capacity(t_len - window + 1);
        resid.push(col[window - 1] - sum / window as f64);
        for t in window..t_len {
            sum += col[t] - col[t - window];
            resid.push(col[t] - sum / window as f64);
        }
        let m = resid.iter().sum::<f64>() / resid.len() as f64;
        out[c] = libm::sqrt(resid.iter().map(|r| (r - m) * (r - m)).sum::<f64>() / resid.len() as f64);
    }
    Ok(out)
}

/// Adds `N(0, sigma_c^2)` noise outside the segments and
/// `N(0, (k sigma_c)^2)` inside. Returns the shifted series and the
/// per-row segment mask.
pub fn noise_inflation(
    values: &[f64],
    dim: usize,
    k: f64,
    segments: &[Range<usize>],
    sigma_base: &[f64],
    rng: &mut Rng,
) -> Result<(Vec<f64>, Vec<bool>)> {
    let t_len = check_shape(values, dim)?;
    if sigma_base.len() != dim {
        return Err(Error::dim("base sigma", dim, sigma_base.len()));
    }
    if !(k >= 0.0) || !k.is_finite() {
        return Err(Error::config("k", "must be non-negative"));
    }
    let mut mask = vec![false; t_len];
    for (i, s) in segments.iter().enumerate() {
        if s.start >= s.end || s.end > t_len {
            return Err(Error::config("segments", "segment outside the series"));
        }
        if segments[..i].iter().any(|r| s.start < r.end && r.start < s.end) {
            return Err(Error::config("segments", "segments overlap"));
        }
        mask[s.clone()].iter_mut().for_each(|m| *m = true);
    }
    let mut out = values.to_vec();
    for (row, &inside) in out.chunks_exact_mut(dim).zip(&mask) {
        let mult = if inside { k } else { 1.0 };
        for (v, s) in row.iter_mut().zip(sigma_base) {
            if *s > 0.0 {
                *v += mult * s * rng::normal(rng);
            }
        }
    }
    Ok((out, mask))
}

/// Sum of harmonics `sum_m A_m cos(2 pi m t / P + phi_m)`, `m = 1..=M`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Seasonal {
    pub period: f64,
    pub amplitudes: Vec<f64>,
    pub phases: Vec<f64>,
}

impl Seasonal {
    pub fn value(&self, t: usize) -> f64 {
        self.amplitudes
            .iter()
            .zip(&self.phases)
            .enumerate()
            .map(|(m, (a, p))| a * libm::cos(2.0 * PI * (m + 1) as f64 * t as f64 / self.period + p))
            .sum()
    }

    /// Least-squares harmonic fit of `x` (Fourier projection).
    pub fn fit(x: &[f64], period: f64, harmonics: usize) -> Self {
        let n = x.len() as f64;
        let mut amplitudes = Vec::with_capacity(harmonics);
        let mut phases = Vec::with_capacity(harmonics);
        for m in 1..=harmonics {
            let (mut a, mut b) = (0.0, 0.0);
            for (t, v) in x.iter().enumerate() {
                let w = 2.0 * PI * m as f64 * t as f64 / period;
                a += v * libm::cos(w);
                b += v * libm::sin(w);
            }
            a *= 2.0 / n;
            b *= 2.0 / n;
            amplitudes.push(libm::sqrt(a * a + b * b));
            phases.push(libm::atan2(-b, a));
        }
        Self {
            period,
            amplitudes,
            phases,
        }
    }

    /// New amplitudes uniform in `[lo, hi]` times the current ones and new
    /// phases uniform in `[0, 2 pi)`.
    pub fn redraw(&self, bounds: RedrawBounds, rng: &mut Rng) -> Self {
        Self {
            period: self.period,
            amplitudes: self
                .amplitudes
                .iter()
                .map(|a| a * rng::uniform(rng, bounds.amp_lo, bounds.amp_hi))
                .collect(),
            phases: self.phases.iter().map(|_| rng::uniform(rng, 0.0, 2.0 * PI)).collect(),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct RedrawBounds {
    pub amp_lo: f64,
    pub amp_hi: f64,
}

impl Default for RedrawBounds {
    fn default() -> Self {
        Self {
            amp_lo: 0.5,
            amp_hi: 1.5,
        }
    }
}

fn check_change_points(len: usize, cps: &[usize]) -> Result<()> {
    if cps.windows(2).any(|w| w[0] >= w[1]) || cps.iter().any(|&c| c == 0 || c >= len) {
        return Err(Error::config(
            "change_points",
            "must be strictly increasing inside (0, length)",
        ));
    }
    Ok(())
}

/// Seasonal parameters in force for each segment between change points.
fn segment_seasonals(base: &Seasonal, n_segments: usize, bounds: RedrawBounds, rng: &mut Rng) -> Vec<Seasonal> {
    let mut out = vec![base.clone()];
    for _ in 1..n_segments {
        out.push(base.redraw(bounds, rng));
    }
    out
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StructuralSeries {
    pub values: Vec<f64>,
    pub change_points: Vec<usize>,
    pub segments: Vec<Seasonal>,
}

/// Piecewise-stationary seasonal series with Gaussian noise `sigma`. The
/// first segment uses `base`, every later one redraws it.
pub fn structural_switch(
    len: usize,
    base: &Seasonal,
    change_points: &[usize],
    bounds: RedrawBounds,
    sigma: f64,
    rng: &mut Rng,
) -> Result<StructuralSeries> {
    if len == 0 {
        return Err(Error::Empty("series"));
    }
    check_change_points(len, change_points)?;
    if !(base.period > 0.0) || base.amplitudes.len() != base.phases.len() {
        return Err(Error::config(
            "seasonal",
            "period must be positive and harmonics matched",
        ));
    }
    let segments = segment_seasonals(base, change_points.len() + 1, bounds, rng);
    let mut values = Vec::with_capacity(len);
    let mut seg = 0;
    for t in 0..len {
        while seg < change_points.len() && t >= change_points[seg] {
            seg += 1;
        }
        let noise = if sigma > 0.0 { sigma * rng::normal(rng) } else { 0.0 };
        values.push(segments[seg].value(t) + noise);
    }
    Ok(StructuralSeries {
        values,
        change_points: change_points.to_vec(),
        segments,
    })
}

/// Draws `j` change points uniformly without replacement in `(0, len)`,
/// sorted.
pub fn sample_change_points(len: usize, j: usize, rng: &mut Rng) -> Result<Vec<usize>> {
    if len < j + 1 {
        return Err(Error::config("change_points", "series too short"));
    }
    let mut pts: Vec<usize> = Vec::with_capacity(j);
    while pts.len() < j {
        let c = rng::int_inclusive(rng, 1, len - 1);
        if !pts.contains(&c) {
            pts.push(c);
        }
    }
    pts.sort_unstable();
    Ok(pts)
}

/// Structural switch on an existing multichannel series: each channel's
/// fitted seasonal component (fitted before the first change point) is
/// swapped for a redrawn one after each change point,
/// `x_t = s_t - c_base(t) + c_seg(t) + noise`.
#[allow(clippy::too_many_arguments)]
pub fn apply_structural(
    values: &[f64],
    dim: usize,
    period: f64,
    harmonics: usize,
    change_points: &[usize],
    bounds: RedrawBounds,
    sigma: &[f64],
    rng: &mut Rng,
) -> Result<Vec<f64>> {
    let t_len = check_shape(values, dim)?;
    check_change_points(t_len, change_points)?;
    if sigma.len() != dim {
        return Err(Error::dim("structural noise", dim, sigma.len()));
    }
    let fit_end = change_points.first().copied().unwrap_or(t_len);
    let mut out = values.to_vec();
    for c in 0..dim {
        let col: Vec<f64> = values[..fit_end * dim].iter().skip(c).step_by(dim).copied().collect();
        let base = Seasonal::fit(&col, period, harmonics);
        let segs = segment_seasonals(&base, change_points.len() + 1, bounds, rng);
        let mut seg = 0;
        for t in 0..t_len {
            while seg < change_points.len() && t >= change_points[seg] {
                seg += 1;
            }
            if seg > 0 {
                out[t * dim + c] += segs[seg].value(t) - base.value(t);
            }
        }
    }
    for row in out.chunks_exact_mut(dim) {
        for (v, s) in row.iter_mut().zip(sigma) {
            if *s > 0.0 {
                *v += s * rng::normal(rng);
            }
        }
    }
    Ok(out)
}

/// A shift applied to rows `start..` of a frame.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind")]
pub enum ShiftSpec {
    Gradual {
        /// Change per 1000 steps in training stds; the band is `[0.2, 0.4]`.
        rate: f64,
    },
    NoiseInflation {
        k: f64,
        segments: usize,
        /// Moving-average window used to calibrate the base noise.
        trend_window: usize,
    },
    Structural {
        period: f64,
        harmonics: usize,
        change_points: usize,
        #[serde(default)]
        noise: f64,
    },
}

/// Everything needed to replay a shift exactly.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ShiftRecord {
    pub spec: ShiftSpec,
    pub seed: u64,
    pub start: usize,
    pub train: Range<usize>,
    pub gradual: Option<GradualDrift>,
    pub sigma_base: Option<Vec<f64>>,
    /// Row ranges of inflated noise, absolute indices.
    pub segments: Vec<Range<usize>>,
    /// Absolute row indices.
    pub change_points: Vec<usize>,
}

fn moments(values: &[f64], dim: usize, rows: Range<usize>) -> (Vec<f64>, Vec<f64>) {
    let n = rows.len() as f64;
    let mut mean = vec![0.0; dim];
    let mut var = vec![0.0; dim];
    for t in rows.clone() {
        for c in 0..dim {
            mean[c] += values[t * dim + c] / n;
        }
    }
    for t in rows {
        for c in 0..dim {
            let e = values[t * dim + c] - mean[c];
            var[c] += e * e / n;
        }
    }
    (mean, var.into_iter().map(libm::sqrt).collect())
}

/// Applies `spec` to rows `start..` of `frame`, calibrating against the
/// `train` rows. Rows before `start` are returned unchanged.
pub fn apply_shift(
    frame: &SeriesFrame,
    spec: &ShiftSpec,
    train: Range<usize>,
    start: usize,
    seed: u64,
) -> Result<(SeriesFrame, ShiftRecord)> {
    let dim = frame.dim();
    let t_len = frame.len();
    if train.is_empty() || train.end > t_len {
        return Err(Error::config("train", "training rows outside the series"));
    }
    if start >= t_len {
        return Err(Error::config("start", "shift starts after the series ends"));
    }
    let mut rng = rng::seeded(seed);
    let head = &frame.values()[..start * dim];
    let tail = &frame.values()[start * dim..];
    let tail_len = t_len - start;
    let mut record = ShiftRecord {
        spec: spec.clone(),
        seed,
        start,
        train: train.clone(),
        gradual: None,
        sigma_base: None,
        segments: Vec::new(),
        change_points: Vec::new(),
    };
    let shifted = match *spec {
        ShiftSpec::Gradual { rate } => {
            let (m, s) = moments(frame.values(), dim, train);
            let drift = GradualDrift::calibrated(&m, &s, tail_len, rate)?;
            let out = gradual_drift(tail, dim, &drift)?;
            record.gradual = Some(drift);
            out
        }
        ShiftSpec::NoiseInflation {
            k,
            segments,
            trend_window,
        } => {
            let sigma = residual_std(&frame.values()[train.start * dim..train.end * dim], dim, trend_window)?;
            let segs = sample_segments(tail_len, segments, &mut rng)?;
            let (out, _) = noise_inflation(tail, dim, k, &segs, &sigma, &mut rng)?;
            record.sigma_base = Some(sigma);
            record.segments = segs.into_iter().map(|r| r.start + start..r.end + start).collect();
            out
        }
        ShiftSpec::Structural {
            period,
            harmonics,
            change_points,
            noise,
        } => {
            let cps = sample_change_points(tail_len, change_points, &mut rng)?;
            let (_, s) = moments(frame.values(), dim, train);
            let sigma: Vec<f64> = s.iter().map(|v| v * noise).collect();
            let out = apply_structural(
                tail,
                dim,
                period,
                harmonics,
                &cps,
                RedrawBounds::default(),
                &sigma,
                &mut rng,
            )?;
            record.change_points = cps.into_iter().map(|c| c + start).collect();
            out
        }
    };
    let mut values = head.to_vec();
    values.extend(shifted);
    Ok((frame.with_values(values, Provenance::Shifted)?, record))
}

pub const ETT_CHANNELS: [&str; 7] = ["HUFL", "HULL", "MUFL", "MULL", "LUFL", "LULL", "OT"];

/// First timestamp of the ETT hourly files, 2016-07-01 00:00 UTC.
pub const ETT_START: i64 = 1_467_331_200;

/// Hourly seven-channel series with daily and weekly seasonality, slow
/// level wander and AR(1) noise. The six load channels share a latent
/// demand factor; the last channel (oil temperature) is a smoothed, lagged
/// response to the loads with its own annual cycle.
pub fn ett_surrogate(hours: usize, rng: &mut Rng) -> Result<SeriesFrame> {
    if hours == 0 {
        return Err(Error::Empty("surrogate length"));
    }
    let load_scale = [5.0, 2.0, 4.0, 1.5, 1.0, 0.6];
    let load_offset = [8.0, 2.5, 5.0, 1.2, 3.0, 1.0];
    let mut demand_ar = 0.0;
    let mut wander = 0.0;
    let mut chan_ar = [0.0; 6];
    let mut ot = 15.0;
    let mut ot_ar = 0.0;
    let mut values = Vec::with_capacity(hours * 7);
    for t in 0..hours {
        let tf = t as f64;
        let daily = libm::sin(2.0 * PI * tf / 24.0) + 0.4 * libm::cos(4.0 * PI * tf / 24.0);
        let weekly = 0.5 * libm::sin(2.0 * PI * tf / 168.0);
        demand_ar = 0.95 * demand_ar + 0.3 * rng::normal(rng);
        wander = 0.999 * wander + 0.05 * rng::normal(rng);
        let demand = daily + weekly + demand_ar + wander;
        let mut load_sum = 0.0;
        for c in 0..6 {
            chan_ar[c] = 0.8 * chan_ar[c] + 0.2 * rng::normal(rng);
            let v = load_offset[c] + load_scale[c] * (0.8 * demand + chan_ar[c]);
            load_sum += v / load_scale[c];
            values.push(v);
        }
        let annual = 8.0 * libm::sin(2.0 * PI * tf / 8760.0);
        ot_ar = 0.9 * ot_ar + 0.3 * rng::normal(rng);
        ot = 0.9 * ot + 0.1 * (15.0 + annual + 0.5 * load_sum) + ot_ar * 0.1;
        values.push(ot + 0.6 * libm::sin(2.0 * PI * (tf - 3.0) / 24.0));
    }
    let timestamps = (0..hours as i64).map(|h| ETT_START + 3600 * h).collect();
    SeriesFrame::new(
        timestamps,
        ETT_CHANNELS.iter().map(|s| String::from(*s)).collect(),
        values,
        Provenance::Raw,
    )
}
