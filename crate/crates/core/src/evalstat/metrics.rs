use alloc::vec;
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct RegressionMetrics {
    pub mae: f64,
    pub rmse: f64,
    /// `None` when the targets have zero variance.
    pub r2: Option<f64>,
}

/// MAE, RMSE and `R² = 1 - SSE / SST` (SST about the target mean).
pub fn regression_metrics(preds: &[f64], targets: &[f64]) -> Result<RegressionMetrics> {
    if preds.len() != targets.len() {
        return Err(Error::dim("predictions", targets.len(), preds.len()));
    }
    if preds.is_empty() {
        return Err(Error::Empty("predictions"));
    }
    let n = preds.len() as f64;
    let mean_t = targets.iter().sum::<f64>() / n;
    let (mut sae, mut sse, mut sst) = (0.0, 0.0, 0.0);
    for (p, t) in preds.iter().zip(targets) {
        let e = p - t;
        sae += libm::fabs(e);
        sse += e * e;
        sst += (t - mean_t) * (t - mean_t);
    }
    Ok(RegressionMetrics {
        mae: sae / n,
        rmse: libm::sqrt(sse / n),
        r2: (sst > 0.0).then(|| 1.0 - sse / sst),
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClassificationMetrics {
    pub accuracy: f64,
    pub f1: f64,
    /// `None` when only one class is present.
    pub auc: Option<f64>,
    /// Share of days whose predicted direction matched the realized one.
    /// For the binary direction task this coincides with `accuracy`.
    pub direction_accuracy: f64,
    pub ece: f64,
}

pub const ECE_BINS: usize = 10;

fn check_probs(p_up: &[f64], labels: &[u8]) -> Result<()> {
    if p_up.len() != labels.len() {
        return Err(Error::dim("probabilities", labels.len(), p_up.len()));
    }
    if p_up.is_empty() {
        return Err(Error::Empty("probabilities"));
    }
    if let Some(i) = p_up.iter().position(|p| !(0.0..=1.0).contains(p)) {
        return Err(Error::InvalidDistribution { row: i, sum: p_up[i] });
    }
    if let Some(i) = labels.iter().position(|&y| y > 1) {
        return Err(Error::Data {
            row: i,
            reason: alloc::format!("label {} is not binary", labels[i]),
        });
    }
    Ok(())
}

/// Hard decision at 0.5: up iff `p_up >= 0.5`.
#[inline]
pub fn predicted_class(p_up: f64) -> u8 {
    u8::from(p_up >= 0.5)
}

/// Area under the ROC curve via the Mann–Whitney rank statistic with
/// average ranks for ties.
pub fn auc(scores: &[f64], labels: &[u8]) -> Result<f64> {
    if scores.len() != labels.len() {
        return Err(Error::dim("scores", labels.len(), scores.len()));
    }
    let pos = labels.iter().filter(|&&y| y == 1).count();
    let neg = labels.len() - pos;
    if pos == 0 || neg == 0 {
        return Err(Error::Degenerate("AUC undefined for single-class labels"));
    }
    let ranks = average_ranks(scores);
    let rank_sum: f64 = ranks.iter().zip(labels).filter(|(_, &y)| y == 1).map(|(r, _)| *r).sum();
    let u = rank_sum - (pos * (pos + 1)) as f64 / 2.0;
    Ok(u / (pos as f64 * neg as f64))
}

/// 1-based ranks, ties receive the mean of the ranks they span.
pub fn average_ranks(values: &[f64]) -> Vec<f64> {
    let mut idx: Vec<usize> = (0..values.len()).collect();
    idx.sort_by(|&a, &b| values[a].total_cmp(&values[b]));
    let mut ranks = vec![0.0; values.len()];
    let mut i = 0;
    while i < idx.len() {
        let mut j = i;
        while j + 1 < idx.len() && values[idx[j + 1]] == values[idx[i]] {
            j += 1;
        }
        let r = (i + j) as f64 / 2.0 + 1.0;
        for &k in &idx[i..=j] {
            ranks[k] = r;
        }
        i = j + 1;
    }
    ranks
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ReliabilityBin {
    pub lower: f64,
    pub upper: f64,
    pub count: usize,
    /// Mean confidence of the predicted class (NaN for empty bins).
    pub confidence: f64,
    /// Share of correct predictions (NaN for empty bins).
    pub accuracy: f64,
}

/// Equal-width bins over the confidence `max(p, 1 - p)` of the predicted
/// class.
pub fn reliability_bins(p_up: &[f64], labels: &[u8], bins: usize) -> Result<Vec<ReliabilityBin>> {
    check_probs(p_up, labels)?;
    if bins == 0 {
        return Err(Error::config("bins", "must be positive"));
    }
    let mut count = vec![0usize; bins];
    let mut conf = vec![0.0; bins];
    let mut correct = vec![0.0; bins];
    for (&p, &y) in p_up.iter().zip(labels) {
        let c = p.max(1.0 - p);
        let b = ((c * bins as f64) as usize).min(bins - 1);
        count[b] += 1;
        conf[b] += c;
        if predicted_class(p) == y {
            correct[b] += 1.0;
        }
    }
    Ok((0..bins)
        .map(|b| {
            let n = count[b] as f64;
            ReliabilityBin {
                lower: b as f64 / bins as f64,
                upper: (b + 1) as f64 / bins as f64,
                count: count[b],
                confidence: if count[b] > 0 { conf[b] / n } else { f64::NAN },
                accuracy: if count[b] > 0 { correct[b] / n } else { f64::NAN },
            }
        })
        .collect())
}

/// Count-weighted mean `|accuracy - confidence|` over the bins.
pub fn expected_calibration_error(p_up: &[f64], labels: &[u8], bins: usize) -> Result<f64> {
    let n = p_up.len() as f64;
    Ok(reliability_bins(p_up, labels, bins)?
        .iter()
        .filter(|b| b.count > 0)
        .map(|b| b.count as f64 / n * libm::fabs(b.accuracy - b.confidence))
        .sum())
}

pub fn classification_metrics(p_up: &[f64], labels: &[u8]) -> Result<ClassificationMetrics> {
    check_probs(p_up, labels)?;
    let n = labels.len() as f64;
    let (mut tp, mut fp, mut fnn, mut hits) = (0.0, 0.0, 0.0, 0.0);
    for (&p, &y) in p_up.iter().zip(labels) {
        let yh = predicted_class(p);
        if yh == y {
            hits += 1.0;
        }
        match (yh, y) {
            (1, 1) => tp += 1.0,
            (1, 0) => fp += 1.0,
            (0, 1) => fnn += 1.0,
            _ => {}
        }
    }
    let f1 = if tp > 0.0 {
        2.0 * tp / (2.0 * tp + fp + fnn)
    } else {
        0.0
    };
    let accuracy = hits / n;
    Ok(ClassificationMetrics {
        accuracy,
        f1,
        auc: auc(p_up, labels).ok(),
        direction_accuracy: accuracy,
        ece: expected_calibration_error(p_up, labels, ECE_BINS)?,
    })
}

/// Per-sample binary cross-entropy, probabilities clamped to `[1e-12, 1]`.
pub fn cross_entropy_losses(p_up: &[f64], labels: &[u8]) -> Result<Vec<f64>> {
    check_probs(p_up, labels)?;
    Ok(p_up
        .iter()
        .zip(labels)
        .map(|(&p, &y)| -libm::log((if y == 1 { p } else { 1.0 - p }).max(1e-12)))
        .collect())
}
