use alloc::vec;
use alloc::vec::Vec;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use super::net::{forward, BnMode, ForwardPass};
use super::{Architecture, BackboneParams, TaskHead};
use crate::data::{Labels, WindowDataset};
use crate::rng;
use crate::{Error, Result};

/// Momentum of the batch-norm running statistics during training.
pub const BN_MOMENTUM: f64 = 0.1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub weight_decay: f64,
    pub batch_size: usize,
    pub max_epochs: usize,
    pub patience: usize,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            learning_rate: 1e-4,
            weight_decay: 1e-2,
            batch_size: 512,
            max_epochs: 100,
            patience: 10,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate > 0.0) || !self.learning_rate.is_finite() {
            return Err(Error::config("learning_rate", "must be positive"));
        }
        if !(self.weight_decay >= 0.0) {
            return Err(Error::config("weight_decay", "must be non-negative"));
        }
        if self.batch_size == 0 {
            return Err(Error::config("batch_size", "must be positive"));
        }
        if self.patience == 0 {
            return Err(Error::config("patience", "must be at least 1"));
        }
        if self.max_epochs == 0 {
            return Err(Error::config("max_epochs", "must be at least 1"));
        }
        Ok(())
    }
}

/// AdamW with decoupled weight decay, betas (0.9, 0.999), eps 1e-8.
#[derive(Clone, Debug)]
pub struct AdamW {
    lr: f64,
    weight_decay: f64,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
    t: i32,
}

impl AdamW {
    const BETA1: f64 = 0.9;
    const BETA2: f64 = 0.999;
    const EPS: f64 = 1e-8;

    pub fn new(lr: f64, weight_decay: f64) -> Self {
        Self {
            lr,
            weight_decay,
            m: Vec::new(),
            v: Vec::new(),
            t: 0,
        }
    }

    pub fn step(&mut self, params: Vec<&mut [f64]>, grads: Vec<&[f64]>) {
        if self.m.is_empty() {
            self.m = params.iter().map(|p| vec![0.0; p.len()]).collect();
            self.v = self.m.clone();
        }
        self.t += 1;
        let bc1 = 1.0 - libm::pow(Self::BETA1, f64::from(self.t));
        let bc2 = 1.0 - libm::pow(Self::BETA2, f64::from(self.t));
        for (((p, g), m), v) in params.into_iter().zip(grads).zip(&mut self.m).zip(&mut self.v) {
            for i in 0..p.len() {
                p[i] -= self.lr * self.weight_decay * p[i];
                m[i] = Self::BETA1 * m[i] + (1.0 - Self::BETA1) * g[i];
                v[i] = Self::BETA2 * v[i] + (1.0 - Self::BETA2) * g[i] * g[i];
                let mh = m[i] / bc1;
                let vh = v[i] / bc2;
                p[i] -= self.lr * mh / (libm::sqrt(vh) + Self::EPS);
            }
        }
    }
}

/// Per-epoch training record.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Epoch {
    pub epoch: usize,
    pub train_loss: f64,
    /// Validation AUC (classification) or MSE (regression).
    pub valid_metric: f64,
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    pub params: BackboneParams,
    pub best_epoch: usize,
    pub best_metric: f64,
    pub history: Vec<Epoch>,
}

/// Loss and its gradient with respect to the raw head outputs, averaged
/// over the batch: cross-entropy for classification, mean squared error
/// (over batch and horizon) for regression.
pub(crate) fn supervised_loss(pass: &ForwardPass, labels: &Labels) -> (f64, Vec<f64>) {
    let n = pass.len();
    match labels {
        Labels::Direction(y) => {
            let mut loss = 0.0;
            let mut grad = pass.predictions().to_vec();
            for i in 0..n {
                let c = usize::from(y[i]);
                loss -= libm::log(pass.prediction(i)[c].max(1e-300));
                grad[2 * i + c] -= 1.0;
            }
            for g in &mut grad {
                *g /= n as f64;
            }
            (loss / n as f64, grad)
        }
        Labels::Values { dim, data } => {
            let k = (n * dim) as f64;
            let mut loss = 0.0;
            let grad = pass
                .predictions()
                .iter()
                .zip(data)
                .map(|(p, y)| {
                    let e = p - y;
                    loss += e * e;
                    2.0 * e / k
                })
                .collect();
            (loss / k, grad)
        }
    }
}

fn update_running_stats(params: &mut BackboneParams, pass: &ForwardPass) {
    for (layer, bn) in params.bn_layers_mut().enumerate() {
        let (mean, std) = pass.bn_moments(layer);
        for c in 0..bn.channels() {
            bn.running_mean[c] = (1.0 - BN_MOMENTUM) * bn.running_mean[c] + BN_MOMENTUM * mean[c];
            let var = (1.0 - BN_MOMENTUM) * bn.running_std[c] * bn.running_std[c] + BN_MOMENTUM * std[c] * std[c];
            bn.running_std[c] = libm::sqrt(var);
        }
    }
}

/// Predictions in running-statistics mode, evaluated in chunks.
pub(crate) fn predict_dataset(params: &BackboneParams, ds: &WindowDataset) -> Result<Vec<f64>> {
    let mut out = Vec::with_capacity(ds.len() * params.arch().head().output_dim());
    let chunk = 256;
    let mut start = 0;
    while start < ds.len() {
        let end = (start + chunk).min(ds.len());
        let idx: Vec<usize> = (start..end).collect();
        let pass = forward(params, &ds.inputs.select(&idx), BnMode::Running)?;
        out.extend_from_slice(pass.predictions());
        start = end;
    }
    Ok(out)
}

/// Validation metric where larger is better: AUC for classification
/// (negative cross-entropy if the labels are single-class), negative MSE
/// for regression.
fn validation_score(params: &BackboneParams, valid: &WindowDataset) -> Result<(f64, f64)> {
    let preds = predict_dataset(params, valid)?;
    match &valid.labels {
        Labels::Direction(y) => {
            let p_up: Vec<f64> = preds.chunks_exact(2).map(|p| p[1]).collect();
            match crate::evalstat::auc(&p_up, y) {
                Ok(a) => Ok((a, a)),
                Err(_) => {
                    let ce = p_up
                        .iter()
                        .zip(y)
                        .map(|(p, &l)| -libm::log(if l == 1 { *p } else { 1.0 - *p }.max(1e-300)))
                        .sum::<f64>()
                        / y.len() as f64;
                    Ok((-ce, -ce))
                }
            }
        }
        Labels::Values { data, .. } => {
            let mse = preds.iter().zip(data).map(|(p, y)| (p - y) * (p - y)).sum::<f64>() / data.len() as f64;
            Ok((-mse, mse))
        }
    }
}

/// Trains every parameter with AdamW on mini-batches (batch statistics in
/// batch norm, running statistics updated with momentum 0.1) and returns
/// the checkpoint with the best validation metric. Stops after `patience`
/// consecutive epochs without strict improvement.
pub fn train_supervised(
    arch: Architecture,
    train: &WindowDataset,
    valid: &WindowDataset,
    cfg: &TrainConfig,
) -> Result<TrainOutcome> {
    cfg.validate()?;
    if train.is_empty() {
        return Err(Error::Empty("training set"));
    }
    if valid.is_empty() {
        return Err(Error::Empty("validation set"));
    }
    let head_ok = match (&train.labels, arch.head()) {
        (Labels::Direction(_), TaskHead::Classification) => true,
        (Labels::Values { dim, .. }, TaskHead::Regression { horizon }) => *dim == horizon,
        _ => false,
    };
    if !head_ok {
        return Err(Error::config("task", "labels do not match the head"));
    }

    let mut rng = rng::seeded(cfg.seed);
    let mut params = BackboneParams::init(arch, &mut rng);
    let mut opt = AdamW::new(cfg.learning_rate, cfg.weight_decay);
    let mut best = (params.clone(), f64::NEG_INFINITY, 0usize, f64::NAN);
    let mut history = Vec::new();
    let mut stale = 0;

    for epoch in 0..cfg.max_epochs {
        let mut order: Vec<usize> = (0..train.len()).collect();
        order.shuffle(&mut rng);
        let mut total = 0.0;
        let mut seen = 0usize;
        for (step, idx) in order.chunks(cfg.batch_size).enumerate() {
            let batch = train.inputs.select(idx);
            let labels = train.labels.select(idx);
            let pass = forward(&params, &batch, BnMode::Batch)?;
            let (loss, grad_out) = supervised_loss(&pass, &labels);
            if !loss.is_finite() {
                return Err(Error::NonFiniteLoss { epoch, step });
            }
            total += loss * idx.len() as f64;
            seen += idx.len();
            let grads = pass.backward(&params, &grad_out, true)?;
            update_running_stats(&mut params, &pass);
            let has_ds: Vec<bool> = params.blocks.iter().map(|b| b.downsample.is_some()).collect();
            let g = grads.tensors(|i| has_ds[i]);
            opt.step(params.trainable_mut(), g);
        }
        let (score, metric) = validation_score(&params, valid)?;
        history.push(Epoch {
            epoch,
            train_loss: total / seen.max(1) as f64,
            valid_metric: metric,
        });
        if score > best.1 {
            best = (params.clone(), score, epoch, metric);
            stale = 0;
        } else {
            stale += 1;
            if stale >= cfg.patience {
                break;
            }
        }
    }
    Ok(TrainOutcome {
        params: best.0,
        best_epoch: best.2,
        best_metric: best.3,
        history,
    })
}
