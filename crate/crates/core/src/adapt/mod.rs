//! Test-time adaptation of the batch-norm layers, one day at a time.
//!
//! Three modes share the loop in [`adapt_day`]:
//!
//! - `no_tta`: frozen parameters.
//! - `bn_stats`: replace the running statistics with the moments of the
//!   context batch, then predict.
//! - `norm_only`: if the uncertainty proxy exceeds the calibrated
//!   threshold, fall back to `bn_stats`; otherwise take `S` plain SGD
//!   steps on `phi` with running statistics held fixed, move the EMA
//!   teacher once, then predict.

mod losses;

use alloc::vec;
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

pub use losses::{
    add_drift_grad, consistency_loss, distill_loss, drift_penalty, entropies, entropy_loss, moment_match_affine,
    total_loss, variance_grad, variance_loss, LossComponents,
};

use crate::augment::{transform_batch, AugmentationSet};
use crate::backbone::{forward, BackboneParams, BnMode, ForwardPass};
use crate::data::{Context, WindowBatch};
use crate::rng::Rng;
use crate::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AdaptMode {
    NoTta,
    BnStats,
    NormOnly,
}

impl AdaptMode {
    pub const ALL: [AdaptMode; 3] = [AdaptMode::NoTta, AdaptMode::BnStats, AdaptMode::NormOnly];

    pub fn name(&self) -> &'static str {
        match self {
            AdaptMode::NoTta => "no_tta",
            AdaptMode::BnStats => "bn_stats",
            AdaptMode::NormOnly => "norm_only",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AdaptConfig {
    pub mode: AdaptMode,
    /// Context size `W` in windows.
    pub context_size: usize,
    /// Gradient steps `S` per day.
    pub steps: usize,
    pub learning_rate: f64,
    /// Weight of the entropy (classification) or variance (regression) term.
    pub alpha: f64,
    /// Weight of the consistency or distillation term.
    pub beta: f64,
    /// Coefficient of `||phi - phi_prev||^2`.
    pub drift: f64,
    /// EMA rate of the teacher.
    pub ema_rate: f64,
    /// Transforms per window for the variance objective and proxy.
    pub transforms: usize,
    pub threshold_quantile: f64,
    pub augmentation: AugmentationSet,
}

impl Default for AdaptConfig {
    fn default() -> Self {
        Self {
            mode: AdaptMode::NormOnly,
            context_size: 64,
            steps: 5,
            learning_rate: 1e-4,
            alpha: 1.0,
            beta: 1.0,
            drift: 1e-3,
            ema_rate: 0.9,
            transforms: 4,
            threshold_quantile: 0.8,
            augmentation: AugmentationSet::default(),
        }
    }
}

impl AdaptConfig {
    pub fn validate(&self) -> Result<()> {
        if self.context_size == 0 {
            return Err(Error::config("context_size", "must be at least 1"));
        }
        if !(self.learning_rate >= 0.0) || !self.learning_rate.is_finite() {
            return Err(Error::config("learning_rate", "must be non-negative"));
        }
        if !(self.alpha >= 0.0) || !(self.beta >= 0.0) || !(self.drift >= 0.0) {
            return Err(Error::config("loss weights", "must be non-negative"));
        }
        if !(0.0..=1.0).contains(&self.ema_rate) {
            return Err(Error::config("ema_rate", "must lie in [0, 1]"));
        }
        if !(self.threshold_quantile > 0.0 && self.threshold_quantile < 1.0) {
            return Err(Error::config("threshold_quantile", "must lie in (0, 1)"));
        }
        if self.transforms < 2 {
            return Err(Error::config("transforms", "must be at least 2"));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum UncertaintyKind {
    /// Mean predictive entropy in nats.
    MeanEntropy,
    /// Mean sample variance of the horizon-summed output across transforms.
    AugmentationVariance,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct UncertaintyProxy {
    pub kind: UncertaintyKind,
    pub value: f64,
}

/// Per-day adaptation record.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DayLog {
    pub day: usize,
    pub mode: AdaptMode,
    /// Not computed in `no_tta` and `bn_stats`.
    pub uncertainty: Option<f64>,
    pub tau: f64,
    pub fallback: bool,
    /// A step produced a non-finite loss and the day fell back.
    pub non_finite: bool,
    /// Losses of the last gradient step, if any step ran.
    pub loss_total: Option<f64>,
    pub loss_primary: Option<f64>,
    pub loss_secondary: Option<f64>,
    pub loss_drift: Option<f64>,
    pub delta_phi_norm: f64,
    pub prediction: Vec<f64>,
}

/// Mutable state carried from one day to the next.
#[derive(Clone, Debug)]
pub struct AdaptState {
    pub phi_prev: Vec<f64>,
    pub teacher: BackboneParams,
    pub tau: f64,
    pub day: usize,
    log: Vec<DayLog>,
}

impl AdaptState {
    /// Starts a deployment with the teacher equal to `params`.
    pub fn new(params: &BackboneParams, tau: f64) -> Result<Self> {
        if !tau.is_finite() {
            return Err(Error::config("tau", "must be finite"));
        }
        Ok(Self {
            phi_prev: params.phi(),
            teacher: params.clone(),
            tau,
            day: 0,
            log: Vec::new(),
        })
    }

    pub fn log(&self) -> &[DayLog] {
        &self.log
    }

    pub fn into_log(self) -> Vec<DayLog> {
        self.log
    }
}

/// `teacher <- rho teacher + (1 - rho) student`, elementwise.
pub fn ema_update_slice(teacher: &mut [f64], student: &[f64], rho: f64) -> Result<()> {
    if !(0.0..=1.0).contains(&rho) {
        return Err(Error::config("ema_rate", "must lie in [0, 1]"));
    }
    if teacher.len() != student.len() {
        return Err(Error::dim("teacher tensor", student.len(), teacher.len()));
    }
    for (t, s) in teacher.iter_mut().zip(student) {
        *t = rho * *t + (1.0 - rho) * *s;
    }
    Ok(())
}

/// EMA over every tensor of the backbone, running statistics included.
pub fn ema_update(teacher: &mut BackboneParams, student: &BackboneParams, rho: f64) -> Result<()> {
    if teacher.arch() != student.arch() {
        return Err(Error::Invariant("teacher and student architectures differ"));
    }
    for (t, s) in teacher.tensors_mut().into_iter().zip(student.tensors()) {
        ema_update_slice(t, s, rho)?;
    }
    Ok(())
}

/// Empirical quantile with linear interpolation between order statistics.
pub fn calibrate_threshold(values: &[f64], q: f64) -> Result<f64> {
    if values.is_empty() {
        return Err(Error::Empty("validation uncertainties"));
    }
    if !(0.0..=1.0).contains(&q) {
        return Err(Error::config("threshold_quantile", "must lie in [0, 1]"));
    }
    if let Some(i) = values.iter().position(|v| !v.is_finite()) {
        return Err(Error::NonFinite {
            what: "validation uncertainty",
            index: i,
        });
    }
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let pos = q * (v.len() - 1) as f64;
    let lo = libm::floor(pos) as usize;
    let hi = (lo + 1).min(v.len() - 1);
    Ok(v[lo] + (pos - lo as f64) * (v[hi] - v[lo]))
}

/// Replaces every layer's running statistics with the moments of `batch`
/// from one batch-statistics forward pass. The affine parameters and the
/// weights are not touched.
pub fn refresh_bn_stats(params: &mut BackboneParams, batch: &WindowBatch) -> Result<()> {
    if batch.len() * batch.window_len() < 2 {
        return Err(Error::dim("batch time steps", 2, batch.len() * batch.window_len()));
    }
    let pass = forward(params, batch, BnMode::Batch)?;
    let moments: Vec<(Vec<f64>, Vec<f64>)> = (0..pass.bn_layer_count())
        .map(|l| {
            let (m, s) = pass.bn_moments(l);
            (m.to_vec(), s.to_vec())
        })
        .collect();
    for (bn, (m, s)) in params.bn_layers_mut().zip(moments) {
        bn.running_mean = m;
        bn.running_std = s;
    }
    Ok(())
}

/// Sum over the horizon of each window's output.
fn summed_outputs(pass: &ForwardPass) -> Vec<f64> {
    (0..pass.len()).map(|i| pass.prediction(i).iter().sum()).collect()
}

fn split_rows(v: &[f64], parts: usize) -> Vec<Vec<f64>> {
    let n = v.len() / parts;
    v.chunks_exact(n).map(<[f64]>::to_vec).collect()
}

fn transformed_copies(
    batch: &WindowBatch,
    count: usize,
    set: AugmentationSet,
    feature_std: &[f64],
    rng: &mut Rng,
) -> Result<WindowBatch> {
    let mut out = WindowBatch::empty(batch.window_len(), batch.dim());
    for _ in 0..count {
        let t = set.sample(batch.window_len(), rng);
        out.extend(&transform_batch(batch, &t, feature_std, rng)?)?;
    }
    Ok(out)
}

/// Uncertainty proxy of `batch` under running statistics: mean entropy for
/// a classification head, mean augmentation variance (over `transforms`
/// draws) for a regression head.
pub fn uncertainty(
    params: &BackboneParams,
    batch: &WindowBatch,
    transforms: usize,
    set: AugmentationSet,
    feature_std: &[f64],
    rng: &mut Rng,
) -> Result<UncertaintyProxy> {
    if batch.is_empty() {
        return Err(Error::Empty("uncertainty batch"));
    }
    if params.arch().head().is_classification() {
        let pass = forward(params, batch, BnMode::Running)?;
        let h = entropies(pass.predictions(), 2)?;
        Ok(UncertaintyProxy {
            kind: UncertaintyKind::MeanEntropy,
            value: h.iter().sum::<f64>() / h.len() as f64,
        })
    } else {
        if transforms < 2 {
            return Err(Error::config("transforms", "must be at least 2"));
        }
        let aug = transformed_copies(batch, transforms, set, feature_std, rng)?;
        let pass = forward(params, &aug, BnMode::Running)?;
        let value = variance_loss(&split_rows(&summed_outputs(&pass), transforms))?;
        Ok(UncertaintyProxy {
            kind: UncertaintyKind::AugmentationVariance,
            value: value.max(0.0),
        })
    }
}

struct StepResult {
    components: LossComponents,
    grad: Vec<f64>,
}

fn classification_step(
    params: &BackboneParams,
    batch: &WindowBatch,
    cfg: &AdaptConfig,
    feature_std: &[f64],
    rng: &mut Rng,
) -> Result<StepResult> {
    let n = batch.len();
    let t = cfg.augmentation.sample(batch.window_len(), rng);
    let mut joint = batch.clone();
    joint.extend(&transform_batch(batch, &t, feature_std, rng)?)?;
    let pass = forward(params, &joint, BnMode::Running)?;
    let probs = pass.predictions();
    let (p, q) = probs.split_at(2 * n);
    let entropy = entropy_loss(p, 2)?;
    let consistency = consistency_loss(p, q, 2)?;
    let mut grad_out = vec![0.0; 4 * n];
    if cfg.alpha > 0.0 {
        for (g, e) in grad_out.iter_mut().zip(losses::entropy_logit_grad(p, 2)) {
            *g += cfg.alpha * e;
        }
    }
    if cfg.beta > 0.0 {
        let (gp, gq) = losses::consistency_logit_grads(p, q, 2);
        for (g, c) in grad_out.iter_mut().zip(gp.into_iter().chain(gq)) {
            *g += cfg.beta * c;
        }
    }
    Ok(StepResult {
        components: LossComponents::Classification { entropy, consistency },
        grad: pass.backward(params, &grad_out, false)?.phi(),
    })
}

fn regression_step(
    params: &BackboneParams,
    batch: &WindowBatch,
    teacher_preds: Option<&[f64]>,
    cfg: &AdaptConfig,
    feature_std: &[f64],
    rng: &mut Rng,
) -> Result<StepResult> {
    let n = batch.len();
    let k = cfg.transforms;
    let mut joint = transformed_copies(batch, k, cfg.augmentation, feature_std, rng)?;
    joint.extend(batch)?;
    let pass = forward(params, &joint, BnMode::Running)?;
    let h = pass.output_dim();
    let sums = summed_outputs(&pass);
    let per_t = split_rows(&sums[..k * n], k);
    let variance = variance_loss(&per_t)?;
    let mut grad_out = vec![0.0; (k + 1) * n * h];
    if cfg.alpha > 0.0 {
        for (kk, gk) in variance_grad(&per_t)?.into_iter().enumerate() {
            for (i, g) in gk.into_iter().enumerate() {
                // the sum over the horizon passes the gradient to every step
                for o in &mut grad_out[(kk * n + i) * h..(kk * n + i + 1) * h] {
                    *o += cfg.alpha * g;
                }
            }
        }
    }
    let student = &pass.predictions()[k * n * h..];
    let distill = match teacher_preds {
        Some(tp) => {
            let d = distill_loss(student, tp, h)?;
            for ((o, s), t) in grad_out[k * n * h..].iter_mut().zip(student).zip(tp) {
                *o += cfg.beta * 2.0 * (s - t) / n as f64;
            }
            d
        }
        None => 0.0,
    };
    Ok(StepResult {
        components: LossComponents::Regression { variance, distill },
        grad: pass.backward(params, &grad_out, false)?.phi(),
    })
}

fn predict_today(params: &BackboneParams, ctx: &Context) -> Result<Vec<f64>> {
    let pos = ctx.today_position()?;
    let today = WindowBatch::new(ctx.batch.window_len(), ctx.batch.dim(), ctx.batch.window(pos).to_vec())?;
    Ok(forward(params, &today, BnMode::Running)?.predictions().to_vec())
}

fn norm(a: &[f64], b: &[f64]) -> f64 {
    libm::sqrt(a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum())
}

/// One day of deployment. `ctx` must hold only windows ending at or before
/// `ctx.day`. `feature_std` scales the Gaussian jitter.
///
/// Returns the prediction for the current day's window: class
/// probabilities `(down, up)` or the `H` regression outputs.
pub fn adapt_day(
    params: &mut BackboneParams,
    state: &mut AdaptState,
    ctx: &Context,
    cfg: &AdaptConfig,
    feature_std: &[f64],
    rng: &mut Rng,
) -> Result<Vec<f64>> {
    ctx.check_causal()?;
    if state.phi_prev.len() != params.phi_len() {
        return Err(Error::dim("phi_prev", params.phi_len(), state.phi_prev.len()));
    }
    let phi_start = params.phi();
    let mut entry = DayLog {
        day: ctx.day,
        mode: cfg.mode,
        uncertainty: None,
        tau: state.tau,
        fallback: false,
        non_finite: false,
        loss_total: None,
        loss_primary: None,
        loss_secondary: None,
        loss_drift: None,
        delta_phi_norm: 0.0,
        prediction: Vec::new(),
    };

    match cfg.mode {
        AdaptMode::NoTta => {}
        AdaptMode::BnStats => refresh_bn_stats(params, &ctx.batch)?,
        AdaptMode::NormOnly => {
            let u = uncertainty(params, &ctx.batch, cfg.transforms, cfg.augmentation, feature_std, rng)?;
            entry.uncertainty = Some(u.value);
            if u.value > state.tau {
                entry.fallback = true;
                refresh_bn_stats(params, &ctx.batch)?;
            } else {
                let teacher_preds = if !params.arch().head().is_classification() && cfg.beta > 0.0 {
                    Some(
                        forward(&state.teacher, &ctx.batch, BnMode::Running)?
                            .predictions()
                            .to_vec(),
                    )
                } else {
                    None
                };
                let mut phi = phi_start.clone();
                for _ in 0..cfg.steps {
                    let step = if params.arch().head().is_classification() {
                        classification_step(params, &ctx.batch, cfg, feature_std, rng)?
                    } else {
                        regression_step(params, &ctx.batch, teacher_preds.as_deref(), cfg, feature_std, rng)?
                    };
                    let drift = drift_penalty(&phi, &state.phi_prev, cfg.drift)?;
                    let total = total_loss(&step.components, cfg.alpha, cfg.beta, drift)?;
                    let mut grad = step.grad;
                    add_drift_grad(&mut grad, &phi, &state.phi_prev, cfg.drift);
                    if !total.is_finite() || grad.iter().any(|g| !g.is_finite()) {
                        entry.non_finite = true;
                        break;
                    }
                    let (a, b) = step.components.pair();
                    entry.loss_total = Some(total);
                    entry.loss_primary = Some(a);
                    entry.loss_secondary = Some(b);
                    entry.loss_drift = Some(drift);
                    for (p, g) in phi.iter_mut().zip(&grad) {
                        *p -= cfg.learning_rate * g;
                    }
                    params.set_phi(&phi)?;
                }
                if entry.non_finite {
                    params.set_phi(&phi_start)?;
                    refresh_bn_stats(params, &ctx.batch)?;
                    entry.fallback = true;
                } else {
                    state.phi_prev = params.phi();
                    ema_update(&mut state.teacher, params, cfg.ema_rate)?;
                }
            }
        }
    }

    let prediction = predict_today(params, ctx)?;
    entry.delta_phi_norm = norm(&params.phi(), &phi_start);
    entry.prediction = prediction.clone();
    state.day += 1;
    state.log.push(entry);
    Ok(prediction)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::backbone::{Architecture, TaskHead};
    use crate::data::build_context;
    use crate::rng;
    use approx::assert_relative_eq;

    fn toy(head: TaskHead, seed: u64) -> (BackboneParams, WindowBatch) {
        let arch = Architecture::new(2, 8, 4, 3, alloc::vec![1, 2], head).unwrap();
        let mut r = rng::seeded(seed);
        let params = BackboneParams::init(arch, &mut r);
        let data: Vec<f64> = (0..12 * 8 * 2).map(|_| rng::normal(&mut r)).collect();
        (params, WindowBatch::new(8, 2, data).unwrap())
    }

    #[test]
    fn ema_examples() {
        let mut t = [0.3, -2.0];
        ema_update_slice(&mut t, &[5.0, 5.0], 1.0).unwrap();
        assert_eq!(t, [0.3, -2.0]);
        ema_update_slice(&mut t, &[5.0, 1.0], 0.0).unwrap();
        assert_eq!(t, [5.0, 1.0]);
        let mut z = [0.0];
        ema_update_slice(&mut z, &[1.0], 0.9).unwrap();
        assert_relative_eq!(z[0], 0.1, max_relative = 1e-15);
        assert!(ema_update_slice(&mut z, &[1.0], 1.5).is_err());
    }

    #[test]
    fn quantile_examples() {
        assert_relative_eq!(
            calibrate_threshold(&[1.0, 2.0, 3.0, 4.0, 5.0], 0.8).unwrap(),
            4.2,
            max_relative = 1e-15
        );
        assert_eq!(calibrate_threshold(&[0.7; 9], 0.3).unwrap(), 0.7);
        assert_eq!(calibrate_threshold(&[3.0, 9.0, 1.0], 1.0).unwrap(), 9.0);
        assert!(calibrate_threshold(&[], 0.5).is_err());
    }

    #[test]
    fn refresh_is_idempotent_and_keeps_phi() {
        let (mut p, b) = toy(TaskHead::Regression { horizon: 2 }, 3);
        let phi = p.phi();
        refresh_bn_stats(&mut p, &b).unwrap();
        let once = p.clone();
        refresh_bn_stats(&mut p, &b).unwrap();
        assert_eq!(p.phi(), phi);
        for (a, c) in once.bn_layers().zip(p.bn_layers()) {
            for (x, y) in a
                .running_mean
                .iter()
                .zip(&c.running_mean)
                .chain(a.running_std.iter().zip(&c.running_std))
            {
                assert!((x - y).abs() < 1e-10);
            }
        }
    }

    #[test]
    fn fallback_leaves_phi_bitwise() {
        let (mut p, b) = toy(TaskHead::Classification, 5);
        let mut state = AdaptState::new(&p, -1.0).unwrap();
        let ctx = build_context(&b, 9, 6).unwrap();
        let phi = p.phi();
        let cfg = AdaptConfig {
            learning_rate: 0.5,
            ..AdaptConfig::default()
        };
        adapt_day(&mut p, &mut state, &ctx, &cfg, &[1.0, 1.0], &mut rng::seeded(0)).unwrap();
        assert_eq!(p.phi(), phi);
        assert!(state.log()[0].fallback);
        assert_eq!(state.log()[0].loss_total, None);
    }

    #[test]
    fn zero_learning_rate_keeps_phi() {
        let (mut p, b) = toy(TaskHead::Regression { horizon: 3 }, 8);
        let mut state = AdaptState::new(&p, f64::MAX).unwrap();
        let ctx = build_context(&b, 11, 8).unwrap();
        let phi = p.phi();
        let cfg = AdaptConfig {
            learning_rate: 0.0,
            ..AdaptConfig::default()
        };
        let pred = adapt_day(&mut p, &mut state, &ctx, &cfg, &[1.0, 1.0], &mut rng::seeded(0)).unwrap();
        assert_eq!(p.phi(), phi);
        assert!(!state.log()[0].fallback);
        assert!(state.log()[0].loss_total.is_some());
        let frozen = predict_today(&p, &ctx).unwrap();
        assert_eq!(pred, frozen);
    }

    #[test]
    fn modes_report_no_uncertainty_when_not_needed() {
        for mode in [AdaptMode::NoTta, AdaptMode::BnStats] {
            let (mut p, b) = toy(TaskHead::Classification, 1);
            let mut state = AdaptState::new(&p, 0.0).unwrap();
            let ctx = build_context(&b, 4, 4).unwrap();
            let cfg = AdaptConfig {
                mode,
                ..AdaptConfig::default()
            };
            adapt_day(&mut p, &mut state, &ctx, &cfg, &[1.0, 1.0], &mut rng::seeded(0)).unwrap();
            assert_eq!(state.log()[0].uncertainty, None);
        }
    }
}
