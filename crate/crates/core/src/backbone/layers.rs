//! Layer primitives: causal dilated convolution, temporal batch norm and
//! the linear head. Activations are channels-last, `[n][time][channel]`.

use alloc::vec;
use alloc::vec::Vec;

use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::rng::Rng;
use crate::{Error, Result};

/// Variance floor used in every batch-norm division.
pub const BN_EPS: f64 = 1e-5;

/// Smallest standard deviation a batch-norm layer will divide by.
#[inline]
pub fn std_floor() -> f64 {
    libm::sqrt(BN_EPS)
}

#[inline]
pub(crate) fn floored_std(var: f64) -> f64 {
    libm::sqrt(if var > BN_EPS { var } else { BN_EPS })
}

/// Four-accumulator dot product. The fixed association order keeps the
/// result deterministic while letting the compiler pipeline the adds.
#[inline]
pub(crate) fn dot(a: &[f64], b: &[f64]) -> f64 {
    let n = a.len().min(b.len());
    let (a, b) = (&a[..n], &b[..n]);
    let mut acc = [0.0f64; 4];
    let chunks = n / 4;
    for i in 0..chunks {
        let j = 4 * i;
        acc[0] += a[j] * b[j];
        acc[1] += a[j + 1] * b[j + 1];
        acc[2] += a[j + 2] * b[j + 2];
        acc[3] += a[j + 3] * b[j + 3];
    }
    let mut tail = 0.0;
    for j in 4 * chunks..n {
        tail += a[j] * b[j];
    }
    (acc[0] + acc[1]) + (acc[2] + acc[3]) + tail
}

#[inline]
pub(crate) fn axpy(y: &mut [f64], alpha: f64, x: &[f64]) {
    for (yi, xi) in y.iter_mut().zip(x) {
        *yi += alpha * *xi;
    }
}

fn uniform_init(rng: &mut Rng, n: usize, fan_in: usize) -> Vec<f64> {
    let bound = 1.0 / libm::sqrt(fan_in as f64);
    (0..n).map(|_| bound * (2.0 * rng.random::<f64>() - 1.0)).collect()
}

/// Causal dilated 1-D convolution with left zero padding.
///
/// Weight layout is `[tap][out][in]`; tap `k - 1` reads the current time
/// step, tap `k - 1 - j` reads `j * dilation` steps back.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Conv1d {
    pub cin: usize,
    pub cout: usize,
    pub kernel: usize,
    pub dilation: usize,
    pub weight: Vec<f64>,
    pub bias: Vec<f64>,
}

impl Conv1d {
    pub fn new(cin: usize, cout: usize, kernel: usize, dilation: usize, rng: &mut Rng) -> Self {
        let fan_in = cin * kernel;
        Self {
            cin,
            cout,
            kernel,
            dilation,
            weight: uniform_init(rng, kernel * cout * cin, fan_in),
            bias: uniform_init(rng, cout, fan_in),
        }
    }

    #[inline]
    fn tap(&self, tap: usize) -> &[f64] {
        let s = self.cout * self.cin;
        &self.weight[tap * s..(tap + 1) * s]
    }

    pub fn forward(&self, x: &[f64], n: usize, len: usize) -> Vec<f64> {
        let (cin, cout) = (self.cin, self.cout);
        debug_assert_eq!(x.len(), n * len * cin);
        let mut out = vec![0.0; n * len * cout];
        for b in 0..n {
            for t in 0..len {
                let orow = &mut out[(b * len + t) * cout..(b * len + t + 1) * cout];
                orow.copy_from_slice(&self.bias);
                for tap in 0..self.kernel {
                    let back = (self.kernel - 1 - tap) * self.dilation;
                    if back > t {
                        continue;
                    }
                    let src = b * len + t - back;
                    let irow = &x[src * cin..(src + 1) * cin];
                    let w = self.tap(tap);
                    for (o, acc) in orow.iter_mut().enumerate() {
                        *acc += dot(&w[o * cin..(o + 1) * cin], irow);
                    }
                }
            }
        }
        out
    }

    /// Accumulates weight/bias gradients (when `grads` is given) and the
    /// input gradient (when `dx` is given) for upstream gradient `dy`.
    pub fn backward(
        &self,
        x: &[f64],
        dy: &[f64],
        n: usize,
        len: usize,
        mut grads: Option<(&mut [f64], &mut [f64])>,
        mut dx: Option<&mut [f64]>,
    ) {
        let (cin, cout) = (self.cin, self.cout);
        for b in 0..n {
            for t in 0..len {
                let drow = &dy[(b * len + t) * cout..(b * len + t + 1) * cout];
                if let Some((_, db)) = grads.as_mut() {
                    for (g, d) in db.iter_mut().zip(drow) {
                        *g += *d;
                    }
                }
                for tap in 0..self.kernel {
                    let back = (self.kernel - 1 - tap) * self.dilation;
                    if back > t {
                        continue;
                    }
                    let src = b * len + t - back;
                    if let Some((dw, _)) = grads.as_mut() {
                        let irow = &x[src * cin..(src + 1) * cin];
                        let dwt = &mut dw[tap * cout * cin..(tap + 1) * cout * cin];
                        for (o, &g) in drow.iter().enumerate() {
                            if g != 0.0 {
                                axpy(&mut dwt[o * cin..(o + 1) * cin], g, irow);
                            }
                        }
                    }
                    if let Some(dx) = dx.as_mut() {
                        let dxrow = &mut dx[src * cin..(src + 1) * cin];
                        let w = self.tap(tap);
                        for (o, &g) in drow.iter().enumerate() {
                            if g != 0.0 {
                                axpy(dxrow, g, &w[o * cin..(o + 1) * cin]);
                            }
                        }
                    }
                }
            }
        }
    }
}

/// Per-channel batch normalization over the (batch × time) axis with a
/// learnable affine `(gamma, beta)` and running statistics.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BatchNorm {
    pub gamma: Vec<f64>,
    pub beta: Vec<f64>,
    pub running_mean: Vec<f64>,
    pub running_std: Vec<f64>,
}

impl BatchNorm {
    pub fn new(channels: usize) -> Self {
        Self {
            gamma: vec![1.0; channels],
            beta: vec![0.0; channels],
            running_mean: vec![0.0; channels],
            running_std: vec![1.0; channels],
        }
    }

    #[inline]
    pub fn channels(&self) -> usize {
        self.gamma.len()
    }
}

/// Per-channel population mean and floored standard deviation of a
/// channels-last activation buffer.
pub fn channel_moments(u: &[f64], channels: usize) -> (Vec<f64>, Vec<f64>) {
    let m = (u.len() / channels) as f64;
    let mut mean = vec![0.0; channels];
    for row in u.chunks_exact(channels) {
        for (s, v) in mean.iter_mut().zip(row) {
            *s += *v;
        }
    }
    for s in &mut mean {
        *s /= m;
    }
    let mut var = vec![0.0; channels];
    for row in u.chunks_exact(channels) {
        for ((s, v), mu) in var.iter_mut().zip(row).zip(&mean) {
            let d = *v - *mu;
            *s += d * d;
        }
    }
    let std = var.into_iter().map(|s| floored_std(s / m)).collect();
    (mean, std)
}

/// Normalizes and applies the affine map:
/// `h = (u - mean) / std`, `y = gamma * h + beta`, per channel.
///
/// `std` is floored at `sqrt(BN_EPS)`; a non-positive or non-finite entry
/// means the caller's statistics are corrupt and is reported as such.
pub fn bn_apply(u: &[f64], mean: &[f64], std: &[f64], gamma: &[f64], beta: &[f64]) -> Result<(Vec<f64>, Vec<f64>)> {
    let c = mean.len();
    if c == 0 {
        return Err(Error::Empty("batch-norm channels"));
    }
    for (what, v) in [("std", std), ("gamma", gamma), ("beta", beta)] {
        if v.len() != c {
            return Err(Error::dim(what, c, v.len()));
        }
    }
    if u.len() % c != 0 {
        return Err(Error::dim("batch-norm input", (u.len() / c + 1) * c, u.len()));
    }
    if std.iter().any(|s| !(*s > 0.0) || !s.is_finite()) {
        return Err(Error::Invariant("batch-norm std must be positive and finite"));
    }
    let floor = std_floor();
    let inv: Vec<f64> = std.iter().map(|s| 1.0 / s.max(floor)).collect();
    let mut h = vec![0.0; u.len()];
    let mut y = vec![0.0; u.len()];
    for ((urow, hrow), yrow) in u.chunks_exact(c).zip(h.chunks_exact_mut(c)).zip(y.chunks_exact_mut(c)) {
        for j in 0..c {
            let hv = (urow[j] - mean[j]) * inv[j];
            hrow[j] = hv;
            yrow[j] = gamma[j] * hv + beta[j];
        }
    }
    Ok((h, y))
}

/// Gradients of a scalar loss with respect to the batch-norm affine
/// parameters: `dgamma_c = sum_i g_ic h_ic`, `dbeta_c = sum_i g_ic`.
pub fn grad_bn_affine(upstream: &[f64], h: &[f64], channels: usize) -> Result<(Vec<f64>, Vec<f64>)> {
    if upstream.len() != h.len() {
        return Err(Error::dim("batch-norm upstream gradient", h.len(), upstream.len()));
    }
    if channels == 0 || h.len() % channels != 0 {
        return Err(Error::dim("batch-norm channels", channels, h.len()));
    }
    let mut dgamma = vec![0.0; channels];
    let mut dbeta = vec![0.0; channels];
    for (grow, hrow) in upstream.chunks_exact(channels).zip(h.chunks_exact(channels)) {
        for j in 0..channels {
            dgamma[j] += grow[j] * hrow[j];
            dbeta[j] += grow[j];
        }
    }
    Ok((dgamma, dbeta))
}

/// Input gradient of batch norm. `dh` is the gradient w.r.t. the
/// normalized activation (`gamma * dy`). With running statistics the map
/// is affine; with batch statistics the mean and variance depend on the
/// input and contribute the usual centering terms.
pub(crate) fn bn_input_grad(dh: &[f64], h: &[f64], std: &[f64], batch_stats: bool) -> Vec<f64> {
    let c = std.len();
    let mut dz = vec![0.0; dh.len()];
    if !batch_stats {
        for (drow, dhrow) in dz.chunks_exact_mut(c).zip(dh.chunks_exact(c)) {
            for j in 0..c {
                drow[j] = dhrow[j] / std[j];
            }
        }
        return dz;
    }
    let m = (dh.len() / c) as f64;
    let mut mean_dh = vec![0.0; c];
    let mut mean_dh_h = vec![0.0; c];
    for (dhrow, hrow) in dh.chunks_exact(c).zip(h.chunks_exact(c)) {
        for j in 0..c {
            mean_dh[j] += dhrow[j];
            mean_dh_h[j] += dhrow[j] * hrow[j];
        }
    }
    for j in 0..c {
        mean_dh[j] /= m;
        mean_dh_h[j] = if std[j] <= std_floor() { 0.0 } else { mean_dh_h[j] / m };
    }
    for ((drow, dhrow), hrow) in dz.chunks_exact_mut(c).zip(dh.chunks_exact(c)).zip(h.chunks_exact(c)) {
        for j in 0..c {
            drow[j] = (dhrow[j] - mean_dh[j] - hrow[j] * mean_dh_h[j]) / std[j];
        }
    }
    dz
}

/// Fully connected head applied to the time-pooled features.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Linear {
    pub input: usize,
    pub output: usize,
    /// `[output][input]`
    pub weight: Vec<f64>,
    pub bias: Vec<f64>,
}

impl Linear {
    pub fn new(input: usize, output: usize, rng: &mut Rng) -> Self {
        Self {
            input,
            output,
            weight: uniform_init(rng, input * output, input),
            bias: uniform_init(rng, output, input),
        }
    }

    pub fn forward(&self, x: &[f64], n: usize) -> Vec<f64> {
        let mut out = vec![0.0; n * self.output];
        for (xrow, orow) in x.chunks_exact(self.input).zip(out.chunks_exact_mut(self.output)) {
            for o in 0..self.output {
                orow[o] = self.bias[o] + dot(&self.weight[o * self.input..(o + 1) * self.input], xrow);
            }
        }
        out
    }
}
