use alloc::vec::Vec;
use core::ops::Range;

use serde::{Deserialize, Serialize};

use super::{Provenance, SeriesFrame};
use crate::{Error, Result};

/// Per-channel standardization fit on a training range only. Uses the
/// population standard deviation (divide by `n`).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Scaler {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

impl Scaler {
    pub fn fit(frame: &SeriesFrame, train: Range<usize>) -> Result<Self> {
        if train.is_empty() {
            return Err(Error::Empty("scaler training range"));
        }
        if train.end > frame.len() {
            return Err(Error::dim("scaler training range", frame.len(), train.end));
        }
        let d = frame.dim();
        let n = train.len() as f64;
        let mut mean = alloc::vec![0.0; d];
        for t in train.clone() {
            for (m, v) in mean.iter_mut().zip(frame.row(t)) {
                *m += *v;
            }
        }
        for m in &mut mean {
            *m /= n;
        }
        let mut var = alloc::vec![0.0; d];
        for t in train {
            for ((s, v), m) in var.iter_mut().zip(frame.row(t)).zip(&mean) {
                *s += (*v - *m) * (*v - *m);
            }
        }
        let mut std = Vec::with_capacity(d);
        for (c, s) in var.into_iter().enumerate() {
            let sd = libm::sqrt(s / n);
            if !(sd > 0.0) || !sd.is_finite() {
                return Err(Error::ZeroVariance {
                    channel: frame.channels()[c].clone(),
                });
            }
            std.push(sd);
        }
        Ok(Self { mean, std })
    }

    pub fn dim(&self) -> usize {
        self.mean.len()
    }

    pub fn transform(&self, frame: &SeriesFrame) -> Result<SeriesFrame> {
        if frame.dim() != self.dim() {
            return Err(Error::dim("scaler channels", self.dim(), frame.dim()));
        }
        let d = self.dim();
        let values = frame
            .values()
            .iter()
            .enumerate()
            .map(|(i, v)| (*v - self.mean[i % d]) / self.std[i % d])
            .collect();
        frame.with_values(values, frame.provenance())
    }

    pub fn inverse(&self, frame: &SeriesFrame) -> Result<SeriesFrame> {
        if frame.dim() != self.dim() {
            return Err(Error::dim("scaler channels", self.dim(), frame.dim()));
        }
        let d = self.dim();
        let values = frame
            .values()
            .iter()
            .enumerate()
            .map(|(i, v)| *v * self.std[i % d] + self.mean[i % d])
            .collect();
        frame.with_values(values, Provenance::Raw)
    }

    /// Standardizes a single channel's values.
    pub fn transform_channel(&self, c: usize, values: &[f64]) -> Vec<f64> {
        values.iter().map(|v| (*v - self.mean[c]) / self.std[c]).collect()
    }
}
