//! Weak transforms that keep time order and only read the window itself.

use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::data::WindowBatch;
use crate::rng::{self, Rng};
use crate::{Error, Result};

pub const MAX_SCALE_DEVIATION: f64 = 0.05;
pub const JITTER_STD: f64 = 0.01;
pub const MAX_CUTOUT: usize = 5;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TransformKind {
    AmplitudeScale,
    GaussianJitter,
    TimeJitter,
    TimeCutout,
}

/// A concrete transform. Gaussian jitter draws its noise from the
/// generator passed to [`apply_transform`].
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind")]
pub enum Transform {
    /// Multiply the whole window by `factor` in `[0.95, 1.05]`.
    AmplitudeScale { factor: f64 },
    /// Add `N(0, (rel_std * feature_std_c)^2)` noise, `rel_std <= 0.01`.
    GaussianJitter { rel_std: f64 },
    /// `out[t] = in[t - shift]` with `shift` in `{-1, 0, 1}`, repeating the
    /// boundary value at the vacated edge.
    TimeShift { shift: i8 },
    /// Replace `len <= 5` steps from `start` with the per-feature window mean.
    Cutout { start: usize, len: usize },
}

impl Transform {
    pub fn kind(&self) -> TransformKind {
        match self {
            Transform::AmplitudeScale { .. } => TransformKind::AmplitudeScale,
            Transform::GaussianJitter { .. } => TransformKind::GaussianJitter,
            Transform::TimeShift { .. } => TransformKind::TimeJitter,
            Transform::Cutout { .. } => TransformKind::TimeCutout,
        }
    }

    pub fn validate(&self, window_len: usize) -> Result<()> {
        match *self {
            Transform::AmplitudeScale { factor } => {
                if !(libm::fabs(factor - 1.0) <= MAX_SCALE_DEVIATION) {
                    return Err(Error::config("amplitude_scale", "factor outside [0.95, 1.05]"));
                }
            }
            Transform::GaussianJitter { rel_std } => {
                if !(0.0..=JITTER_STD).contains(&rel_std) {
                    return Err(Error::config("gaussian_jitter", "relative std outside [0, 0.01]"));
                }
            }
            Transform::TimeShift { shift } => {
                if !(-1..=1).contains(&shift) {
                    return Err(Error::config("time_shift", "shift must be -1, 0 or 1"));
                }
            }
            Transform::Cutout { start, len } => {
                if len > MAX_CUTOUT || start + len > window_len {
                    return Err(Error::config(
                        "cutout",
                        "span longer than 5 steps or outside the window",
                    ));
                }
            }
        }
        Ok(())
    }
}

/// Applies `transform` to one `window_len × dim` window.
pub fn apply_transform(
    window: &[f64],
    window_len: usize,
    transform: &Transform,
    feature_std: &[f64],
    rng: &mut Rng,
) -> Result<Vec<f64>> {
    let d = feature_std.len();
    if d == 0 || window.len() != window_len * d {
        return Err(Error::dim("window", window_len * d, window.len()));
    }
    if let Some(i) = window.iter().position(|v| !v.is_finite()) {
        return Err(Error::NonFinite {
            what: "window",
            index: i,
        });
    }
    transform.validate(window_len)?;
    let mut out = window.to_vec();
    match *transform {
        Transform::AmplitudeScale { factor } => {
            for v in &mut out {
                *v *= factor;
            }
        }
        Transform::GaussianJitter { rel_std } => {
            if rel_std > 0.0 {
                for row in out.chunks_exact_mut(d) {
                    for (v, s) in row.iter_mut().zip(feature_std) {
                        *v += rel_std * s * rng::normal(rng);
                    }
                }
            }
        }
        Transform::TimeShift { shift } => {
            for t in 0..window_len {
                let src = match shift {
                    1 => t.saturating_sub(1),
                    -1 => (t + 1).min(window_len - 1),
                    _ => t,
                };
                out[t * d..(t + 1) * d].copy_from_slice(&window[src * d..(src + 1) * d]);
            }
        }
        Transform::Cutout { start, len } => {
            if len > 0 {
                let mut mean = alloc::vec![0.0; d];
                for row in window.chunks_exact(d) {
                    for (m, v) in mean.iter_mut().zip(row) {
                        *m += *v;
                    }
                }
                for m in &mut mean {
                    *m /= window_len as f64;
                }
                for t in start..start + len {
                    out[t * d..(t + 1) * d].copy_from_slice(&mean);
                }
            }
        }
    }
    Ok(out)
}

/// Named augmentation subsets. `jitter` covers both Gaussian and time
/// jitter.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AugmentationSet {
    Scale,
    ScaleJitter,
    #[default]
    ScaleJitterCutout,
}

impl AugmentationSet {
    pub fn kinds(&self) -> &'static [TransformKind] {
        use TransformKind::*;
        match self {
            AugmentationSet::Scale => &[AmplitudeScale],
            AugmentationSet::ScaleJitter => &[AmplitudeScale, GaussianJitter, TimeJitter],
            AugmentationSet::ScaleJitterCutout => &[AmplitudeScale, GaussianJitter, TimeJitter, TimeCutout],
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            AugmentationSet::Scale => "scale",
            AugmentationSet::ScaleJitter => "scale+jitter",
            AugmentationSet::ScaleJitterCutout => "scale+jitter+cutout",
        }
    }

    /// Draws a kind uniformly from the set, then its parameters: scale
    /// factor uniform in `[0.95, 1.05]`, jitter at the full 0.01 relative
    /// std, shift uniform in `{-1, +1}`, cutout length uniform in `1..=5`
    /// at a uniform start.
    pub fn sample(&self, window_len: usize, rng: &mut Rng) -> Transform {
        let kinds = self.kinds();
        let kind = kinds[rng::int_inclusive(rng, 0, kinds.len() - 1)];
        match kind {
            TransformKind::AmplitudeScale => Transform::AmplitudeScale {
                factor: rng::uniform(rng, 1.0 - MAX_SCALE_DEVIATION, 1.0 + MAX_SCALE_DEVIATION),
            },
            TransformKind::GaussianJitter => Transform::GaussianJitter { rel_std: JITTER_STD },
            TransformKind::TimeJitter => Transform::TimeShift {
                shift: if rng::int_inclusive(rng, 0, 1) == 0 { -1 } else { 1 },
            },
            TransformKind::TimeCutout => {
                let len = rng::int_inclusive(rng, 1, MAX_CUTOUT.min(window_len));
                Transform::Cutout {
                    start: rng::int_inclusive(rng, 0, window_len - len),
                    len,
                }
            }
        }
    }
}

/// Applies one transform to every window of a batch. Jitter noise is drawn
/// independently per window.
pub fn transform_batch(
    batch: &WindowBatch,
    transform: &Transform,
    feature_std: &[f64],
    rng: &mut Rng,
) -> Result<WindowBatch> {
    let mut out = WindowBatch::empty(batch.window_len(), batch.dim());
    for w in batch.iter() {
        out.push(&apply_transform(w, batch.window_len(), transform, feature_std, rng)?)?;
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use alloc::vec;
    use proptest::prelude::*;

    #[test]
    fn identities() {
        let w: Vec<f64> = (0..12).map(|i| i as f64 * 0.7 - 2.0).collect();
        let s = [1.0, 2.0, 0.5];
        let mut r = rng::seeded(0);
        for t in [
            Transform::AmplitudeScale { factor: 1.0 },
            Transform::GaussianJitter { rel_std: 0.0 },
            Transform::TimeShift { shift: 0 },
            Transform::Cutout { start: 2, len: 0 },
        ] {
            assert_eq!(apply_transform(&w, 4, &t, &s, &mut r).unwrap(), w);
        }
    }

    #[test]
    fn time_shift_repeats_boundary() {
        let mut r = rng::seeded(0);
        let out = apply_transform(
            &[1.0, 2.0, 3.0, 4.0],
            4,
            &Transform::TimeShift { shift: 1 },
            &[1.0],
            &mut r,
        )
        .unwrap();
        assert_eq!(out, vec![1.0, 1.0, 2.0, 3.0]);
        let out = apply_transform(
            &[1.0, 2.0, 3.0, 4.0],
            4,
            &Transform::TimeShift { shift: -1 },
            &[1.0],
            &mut r,
        )
        .unwrap();
        assert_eq!(out, vec![2.0, 3.0, 4.0, 4.0]);
    }

    #[test]
    fn cutout_fills_window_mean() {
        let mut r = rng::seeded(0);
        let w = [1.0, 10.0, 2.0, 20.0, 3.0, 30.0, 6.0, 60.0];
        let out = apply_transform(&w, 4, &Transform::Cutout { start: 1, len: 2 }, &[1.0, 1.0], &mut r).unwrap();
        assert_eq!(out, vec![1.0, 10.0, 3.0, 30.0, 3.0, 30.0, 6.0, 60.0]);
    }

    #[test]
    fn out_of_range_specs_rejected() {
        let mut r = rng::seeded(0);
        let w = [0.0; 8];
        for t in [
            Transform::AmplitudeScale { factor: 1.2 },
            Transform::GaussianJitter { rel_std: 0.5 },
            Transform::TimeShift { shift: 2 },
            Transform::Cutout { start: 0, len: 6 },
            Transform::Cutout { start: 7, len: 2 },
        ] {
            assert!(apply_transform(&w, 8, &t, &[1.0], &mut r).is_err(), "{t:?}");
        }
    }

    proptest! {
        #[test]
        fn sampled_transforms_preserve_shape_and_are_seeded(
            vals in prop::collection::vec(-50.0f64..50.0, 24),
            seed in any::<u64>(),
        ) {
            let std = [1.0, 0.3];
            for set in [AugmentationSet::Scale, AugmentationSet::ScaleJitter, AugmentationSet::ScaleJitterCutout] {
                let mut r1 = rng::seeded(seed);
                let mut r2 = rng::seeded(seed);
                let t1 = set.sample(12, &mut r1);
                let t2 = set.sample(12, &mut r2);
                prop_assert_eq!(t1, t2);
                prop_assert!(set.kinds().contains(&t1.kind()));
                let a = apply_transform(&vals, 12, &t1, &std, &mut r1).unwrap();
                let b = apply_transform(&vals, 12, &t2, &std, &mut r2).unwrap();
                prop_assert_eq!(a.len(), vals.len());
                prop_assert_eq!(&a, &b);
            }
        }

        #[test]
        fn amplitude_scaling_is_bounded(
            vals in prop::collection::vec(-50.0f64..50.0, 10),
            seed in any::<u64>(),
        ) {
            let mut r = rng::seeded(seed);
            let t = AugmentationSet::Scale.sample(10, &mut r);
            let out = apply_transform(&vals, 10, &t, &[1.0], &mut r).unwrap();
            let inf = vals.iter().fold(0.0f64, |m, v| m.max(v.abs()));
            let diff = out.iter().zip(&vals).fold(0.0f64, |m, (a, b)| m.max((a - b).abs()));
            prop_assert!(diff <= 0.05 * inf + 1e-12);
        }
    }
}
