//! Unsupervised test-time objectives and their gradients with respect to
//! the head outputs.

use alloc::vec;
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::{Error, Result};

const PROB_CLAMP: f64 = 1e-12;
const ROW_SUM_TOL: f64 = 1e-4;

fn check_distributions(probs: &[f64], k: usize) -> Result<usize> {
    if k == 0 || probs.len() % k != 0 {
        return Err(Error::dim("probability rows", k, probs.len()));
    }
    if probs.is_empty() {
        return Err(Error::Empty("probabilities"));
    }
    for (row, p) in probs.chunks_exact(k).enumerate() {
        let sum: f64 = p.iter().sum();
        if !(libm::fabs(sum - 1.0) <= ROW_SUM_TOL) || p.iter().any(|v| *v < 0.0) {
            return Err(Error::InvalidDistribution { row, sum });
        }
    }
    Ok(probs.len() / k)
}

fn row_entropy(p: &[f64]) -> f64 {
    -p.iter()
        .map(|&v| {
            let c = v.clamp(PROB_CLAMP, 1.0);
            v * libm::log(c)
        })
        .sum::<f64>()
}

/// Mean Shannon entropy (nats) of `k`-class rows.
pub fn entropy_loss(probs: &[f64], k: usize) -> Result<f64> {
    let n = check_distributions(probs, k)?;
    Ok(probs.chunks_exact(k).map(row_entropy).sum::<f64>() / n as f64)
}

/// Per-row entropies, used for the uncertainty proxy.
pub fn entropies(probs: &[f64], k: usize) -> Result<Vec<f64>> {
    check_distributions(probs, k)?;
    Ok(probs.chunks_exact(k).map(row_entropy).collect())
}

/// Mean squared Euclidean distance between matched rows of two batches of
/// distributions.
pub fn consistency_loss(p: &[f64], p_aug: &[f64], k: usize) -> Result<f64> {
    if p.len() != p_aug.len() {
        return Err(Error::dim("augmented probabilities", p.len(), p_aug.len()));
    }
    let n = check_distributions(p, k)?;
    check_distributions(p_aug, k)?;
    Ok(sq_dist_mean(p, p_aug, n))
}

fn sq_dist_mean(a: &[f64], b: &[f64], n: usize) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>() / n as f64
}

/// Mean over windows of the sample variance (denominator `K - 1`) of the
/// `K` transformed predictions. `preds[k][i]` is the scalar prediction of
/// transform `k` for window `i`; for multi-step heads pass the sum over
/// the horizon.
pub fn variance_loss(preds: &[Vec<f64>]) -> Result<f64> {
    let (k, n) = check_variance_input(preds)?;
    let mut total = 0.0;
    for i in 0..n {
        let mean = preds.iter().map(|p| p[i]).sum::<f64>() / k as f64;
        total += preds.iter().map(|p| (p[i] - mean) * (p[i] - mean)).sum::<f64>() / (k - 1) as f64;
    }
    Ok(total / n as f64)
}

fn check_variance_input(preds: &[Vec<f64>]) -> Result<(usize, usize)> {
    let k = preds.len();
    if k < 2 {
        return Err(Error::config(
            "transforms",
            "variance needs at least two transformed predictions",
        ));
    }
    let n = preds[0].len();
    if n == 0 {
        return Err(Error::Empty("variance predictions"));
    }
    if let Some(p) = preds.iter().find(|p| p.len() != n) {
        return Err(Error::dim("transformed predictions", n, p.len()));
    }
    Ok((k, n))
}

/// Gradient of [`variance_loss`]: `2 (y_k - ybar) / ((K - 1) n)`.
pub fn variance_grad(preds: &[Vec<f64>]) -> Result<Vec<Vec<f64>>> {
    let (k, n) = check_variance_input(preds)?;
    let scale = 2.0 / ((k - 1) as f64 * n as f64);
    let mut out = vec![vec![0.0; n]; k];
    for i in 0..n {
        let mean = preds.iter().map(|p| p[i]).sum::<f64>() / k as f64;
        for (o, p) in out.iter_mut().zip(preds) {
            o[i] = scale * (p[i] - mean);
        }
    }
    Ok(out)
}

/// Mean over windows of `||student - teacher||^2`, `dim` outputs per window.
pub fn distill_loss(student: &[f64], teacher: &[f64], dim: usize) -> Result<f64> {
    if student.len() != teacher.len() {
        return Err(Error::dim("teacher predictions", student.len(), teacher.len()));
    }
    if dim == 0 || student.len() % dim != 0 {
        return Err(Error::dim("prediction rows", dim, student.len()));
    }
    if student.is_empty() {
        return Err(Error::Empty("predictions"));
    }
    Ok(sq_dist_mean(student, teacher, student.len() / dim))
}

/// `gamma * ||phi - phi_prev||^2`.
pub fn drift_penalty(phi: &[f64], phi_prev: &[f64], gamma: f64) -> Result<f64> {
    if phi.len() != phi_prev.len() {
        return Err(Error::dim("phi_prev", phi.len(), phi_prev.len()));
    }
    Ok(gamma * phi.iter().zip(phi_prev).map(|(a, b)| (a - b) * (a - b)).sum::<f64>())
}

/// Adds `2 gamma (phi - phi_prev)` to `grad`.
pub fn add_drift_grad(grad: &mut [f64], phi: &[f64], phi_prev: &[f64], gamma: f64) {
    for ((g, a), b) in grad.iter_mut().zip(phi).zip(phi_prev) {
        *g += 2.0 * gamma * (a - b);
    }
}

/// Loss values of one objective evaluation.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "task")]
pub enum LossComponents {
    Classification { entropy: f64, consistency: f64 },
    Regression { variance: f64, distill: f64 },
}

impl LossComponents {
    /// `(primary, secondary)`: entropy/consistency or variance/distillation.
    pub fn pair(&self) -> (f64, f64) {
        match *self {
            LossComponents::Classification { entropy, consistency } => (entropy, consistency),
            LossComponents::Regression { variance, distill } => (variance, distill),
        }
    }
}

/// `alpha * primary + beta * secondary + drift`.
pub fn total_loss(components: &LossComponents, alpha: f64, beta: f64, drift: f64) -> Result<f64> {
    if !(alpha >= 0.0) || !(beta >= 0.0) || !(drift >= 0.0) {
        return Err(Error::config("loss weights", "must be non-negative"));
    }
    let (a, b) = components.pair();
    // skip disabled terms so a non-finite component cannot leak through a zero weight
    let mut total = drift;
    if alpha > 0.0 {
        total += alpha * a;
    }
    if beta > 0.0 {
        total += beta * b;
    }
    Ok(total)
}

/// Gradient of the mean entropy with respect to the logits of `k`-class
/// rows: `-p_j (log p_j + H) / n`.
pub(crate) fn entropy_logit_grad(probs: &[f64], k: usize) -> Vec<f64> {
    let n = probs.len() / k;
    let mut out = vec![0.0; probs.len()];
    for (p, g) in probs.chunks_exact(k).zip(out.chunks_exact_mut(k)) {
        let h = row_entropy(p);
        for (gj, &pj) in g.iter_mut().zip(p) {
            *gj = -pj * (libm::log(pj.clamp(PROB_CLAMP, 1.0)) + h) / n as f64;
        }
    }
    out
}

/// Chain rule through a row softmax: `dz_j = p_j (g_j - sum_i p_i g_i)`.
pub(crate) fn softmax_backward(probs: &[f64], grad_p: &[f64], k: usize) -> Vec<f64> {
    let mut out = vec![0.0; probs.len()];
    for ((p, g), o) in probs
        .chunks_exact(k)
        .zip(grad_p.chunks_exact(k))
        .zip(out.chunks_exact_mut(k))
    {
        let s: f64 = p.iter().zip(g).map(|(a, b)| a * b).sum();
        for j in 0..k {
            o[j] = p[j] * (g[j] - s);
        }
    }
    out
}

/// Logit gradients of the consistency loss for both branches.
pub(crate) fn consistency_logit_grads(p: &[f64], q: &[f64], k: usize) -> (Vec<f64>, Vec<f64>) {
    let n = (p.len() / k) as f64;
    let gp: Vec<f64> = p.iter().zip(q).map(|(a, b)| 2.0 * (a - b) / n).collect();
    let gq: Vec<f64> = gp.iter().map(|g| -g).collect();
    (softmax_backward(p, &gp, k), softmax_backward(q, &gq, k))
}

/// Closed-form affine that undoes a location-scale change of a batch-norm
/// input when the stored statistics `(mu, sigma)` are kept:
/// `gamma' = gamma sigma / sigma'`, `beta' = beta + gamma (mu - mu') / sigma'`.
pub fn moment_match_affine(
    gamma: f64,
    beta: f64,
    mu: f64,
    sigma: f64,
    mu_new: f64,
    sigma_new: f64,
) -> Result<(f64, f64)> {
    if !(sigma_new > 0.0) || !sigma_new.is_finite() {
        return Err(Error::config("sigma'", "must be positive"));
    }
    if !(sigma > 0.0) {
        return Err(Error::config("sigma", "must be positive"));
    }
    Ok((gamma * sigma / sigma_new, beta + gamma * (mu - mu_new) / sigma_new))
}
