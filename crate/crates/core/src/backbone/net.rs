use alloc::vec;
use alloc::vec::Vec;

use super::layers::{bn_input_grad, channel_moments, grad_bn_affine};
use super::{BackboneParams, TaskHead};
use crate::data::WindowBatch;
use crate::{Error, Result};

/// Which statistics the batch-norm layers normalize with.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum BnMode {
    /// Stored running mean / std.
    Running,
    /// Moments of the current batch over (batch × time).
    Batch,
}

#[derive(Clone, Debug)]
struct BnCache {
    h: Vec<f64>,
    mean: Vec<f64>,
    std: Vec<f64>,
}

#[derive(Clone, Debug)]
struct BlockCache {
    bn1: BnCache,
    a1: Vec<f64>,
    bn2: BnCache,
}

/// Result of a forward pass with the intermediates needed by the backward
/// pass.
#[derive(Clone, Debug)]
pub struct ForwardPass {
    n: usize,
    head: TaskHead,
    mode: BnMode,
    /// Head outputs: logits for classification, predictions for regression.
    raw: Vec<f64>,
    predictions: Vec<f64>,
    /// `activations[0]` is the input, `activations[i + 1]` block `i`'s output.
    activations: Vec<Vec<f64>>,
    blocks: Vec<BlockCache>,
    pooled: Vec<f64>,
}

impl ForwardPass {
    pub fn len(&self) -> usize {
        self.n
    }

    pub fn is_empty(&self) -> bool {
        self.n == 0
    }

    pub fn output_dim(&self) -> usize {
        self.head.output_dim()
    }

    pub fn mode(&self) -> BnMode {
        self.mode
    }

    /// Probabilities `(down, up)` per window for classification, the
    /// regression outputs otherwise. Row-major `[n][output_dim]`.
    pub fn predictions(&self) -> &[f64] {
        &self.predictions
    }

    pub fn prediction(&self, i: usize) -> &[f64] {
        let k = self.output_dim();
        &self.predictions[i * k..(i + 1) * k]
    }

    /// Logits (classification) or predictions (regression).
    pub fn raw_outputs(&self) -> &[f64] {
        &self.raw
    }

    /// Normalized activations `h` of batch-norm layer `layer`
    /// (two per residual block), channels-last.
    pub fn normalized(&self, layer: usize) -> &[f64] {
        let b = &self.blocks[layer / 2];
        if layer % 2 == 0 {
            &b.bn1.h
        } else {
            &b.bn2.h
        }
    }

    /// Mean and std used by batch-norm layer `layer` in this pass.
    pub fn bn_moments(&self, layer: usize) -> (&[f64], &[f64]) {
        let b = &self.blocks[layer / 2];
        let c = if layer % 2 == 0 { &b.bn1 } else { &b.bn2 };
        (&c.mean, &c.std)
    }

    /// Pre-normalization activation of layer `layer` reconstructed from
    /// the cache.
    pub fn bn_input(&self, layer: usize) -> Vec<f64> {
        let (mean, std) = self.bn_moments(layer);
        let c = mean.len();
        let mut u = self.normalized(layer).to_vec();
        for row in u.chunks_exact_mut(c) {
            for j in 0..c {
                row[j] = row[j] * std[j] + mean[j];
            }
        }
        u
    }

    pub fn bn_layer_count(&self) -> usize {
        2 * self.blocks.len()
    }
}

fn softmax_rows(logits: &[f64], k: usize) -> Vec<f64> {
    let mut out = vec![0.0; logits.len()];
    for (z, p) in logits.chunks_exact(k).zip(out.chunks_exact_mut(k)) {
        let m = z.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let mut s = 0.0;
        for (pi, zi) in p.iter_mut().zip(z) {
            *pi = libm::exp(*zi - m);
            s += *pi;
        }
        for pi in p.iter_mut() {
            *pi /= s;
        }
    }
    out
}

fn normalize(u: &[f64], bn: &super::BatchNorm, mode: BnMode) -> (BnCache, Vec<f64>) {
    let c = bn.channels();
    let (mean, std) = match mode {
        BnMode::Running => (bn.running_mean.clone(), bn.running_std.clone()),
        BnMode::Batch => channel_moments(u, c),
    };
    let inv: Vec<f64> = std.iter().map(|s| 1.0 / s).collect();
    let mut h = vec![0.0; u.len()];
    let mut y = vec![0.0; u.len()];
    for ((urow, hrow), yrow) in u.chunks_exact(c).zip(h.chunks_exact_mut(c)).zip(y.chunks_exact_mut(c)) {
        for j in 0..c {
            let hv = (urow[j] - mean[j]) * inv[j];
            hrow[j] = hv;
            yrow[j] = bn.gamma[j] * hv + bn.beta[j];
        }
    }
    (BnCache { h, mean, std }, y)
}

/// Runs the backbone on a batch of windows.
pub fn forward(params: &BackboneParams, batch: &WindowBatch, mode: BnMode) -> Result<ForwardPass> {
    let arch = params.arch();
    if batch.window_len() != arch.window_len() {
        return Err(Error::dim("window length", arch.window_len(), batch.window_len()));
    }
    if batch.dim() != arch.input_dim() {
        return Err(Error::dim("input dimension", arch.input_dim(), batch.dim()));
    }
    if let Some(i) = batch.first_non_finite() {
        return Err(Error::NonFinite {
            what: "input window",
            index: i,
        });
    }
    let n = batch.len();
    let len = arch.window_len();
    let hidden = arch.hidden();
    if n == 0 {
        return Err(Error::Empty("window batch"));
    }

    let mut activations = Vec::with_capacity(params.blocks.len() + 1);
    activations.push(batch.as_slice().to_vec());
    let mut caches = Vec::with_capacity(params.blocks.len());
    for block in &params.blocks {
        let x = activations.last().expect("input pushed");
        let z1 = block.conv1.forward(x, n, len);
        let (bn1, y1) = normalize(&z1, &block.bn1, mode);
        let a1: Vec<f64> = y1.into_iter().map(|v| v.max(0.0)).collect();
        let z2 = block.conv2.forward(&a1, n, len);
        let (bn2, mut out) = normalize(&z2, &block.bn2, mode);
        match &block.downsample {
            Some(ds) => {
                let r = ds.forward(x, n, len);
                for (o, r) in out.iter_mut().zip(&r) {
                    *o = (*o + *r).max(0.0);
                }
            }
            None => {
                for (o, r) in out.iter_mut().zip(x) {
                    *o = (*o + *r).max(0.0);
                }
            }
        }
        caches.push(BlockCache { bn1, a1, bn2 });
        activations.push(out);
    }

    let last = activations.last().expect("blocks ran");
    let mut pooled = vec![0.0; n * hidden];
    for b in 0..n {
        let prow = &mut pooled[b * hidden..(b + 1) * hidden];
        for t in 0..len {
            let row = &last[(b * len + t) * hidden..(b * len + t + 1) * hidden];
            for (p, v) in prow.iter_mut().zip(row) {
                *p += *v;
            }
        }
        for p in prow.iter_mut() {
            *p /= len as f64;
        }
    }
    let raw = params.head.forward(&pooled, n);
    let head = arch.head();
    let predictions = match head {
        TaskHead::Classification => softmax_rows(&raw, 2),
        TaskHead::Regression { .. } => raw.clone(),
    };
    Ok(ForwardPass {
        n,
        head,
        mode,
        raw,
        predictions,
        activations,
        blocks: caches,
        pooled,
    })
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct BlockGradients {
    pub conv1_w: Vec<f64>,
    pub conv1_b: Vec<f64>,
    pub bn1_gamma: Vec<f64>,
    pub bn1_beta: Vec<f64>,
    pub conv2_w: Vec<f64>,
    pub conv2_b: Vec<f64>,
    pub bn2_gamma: Vec<f64>,
    pub bn2_beta: Vec<f64>,
    pub down_w: Vec<f64>,
    pub down_b: Vec<f64>,
}

/// Parameter gradients from [`ForwardPass::backward`]. Weight gradients
/// are empty when only the affine gradients were requested.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct Gradients {
    pub blocks: Vec<BlockGradients>,
    pub head_w: Vec<f64>,
    pub head_b: Vec<f64>,
}

impl Gradients {
    /// Flat gradient over `phi`, same order as [`BackboneParams::phi`].
    pub fn phi(&self) -> Vec<f64> {
        let mut out = Vec::new();
        for b in &self.blocks {
            out.extend_from_slice(&b.bn1_gamma);
            out.extend_from_slice(&b.bn1_beta);
            out.extend_from_slice(&b.bn2_gamma);
            out.extend_from_slice(&b.bn2_beta);
        }
        out
    }

    /// Gradient tensors in the canonical trainable order.
    pub(crate) fn tensors(&self, has_downsample: impl Fn(usize) -> bool) -> Vec<&[f64]> {
        let mut out: Vec<&[f64]> = Vec::new();
        for (i, b) in self.blocks.iter().enumerate() {
            out.extend([
                &b.conv1_w[..],
                &b.conv1_b,
                &b.bn1_gamma,
                &b.bn1_beta,
                &b.conv2_w,
                &b.conv2_b,
                &b.bn2_gamma,
                &b.bn2_beta,
            ]);
            if has_downsample(i) {
                out.extend([&b.down_w[..], &b.down_b]);
            }
        }
        out.extend([&self.head_w[..], &self.head_b]);
        out
    }
}

impl ForwardPass {
    /// Backpropagates `grad_out`, the loss gradient with respect to the
    /// raw head outputs (logits or regression outputs), `[n][output_dim]`.
    ///
    /// With `weights == false` only the batch-norm affine gradients are
    /// produced, which skips every weight-gradient accumulation.
    pub fn backward(&self, params: &BackboneParams, grad_out: &[f64], weights: bool) -> Result<Gradients> {
        let k = self.output_dim();
        if grad_out.len() != self.n * k {
            return Err(Error::dim("output gradient", self.n * k, grad_out.len()));
        }
        if self.activations.len() != params.blocks.len() + 1 || self.pooled.len() != self.n * params.arch().hidden() {
            return Err(Error::MissingCache);
        }
        let n = self.n;
        let len = params.arch().window_len();
        let hidden = params.arch().hidden();
        let batch_stats = self.mode == BnMode::Batch;

        let mut grads = Gradients {
            blocks: vec![BlockGradients::default(); params.blocks.len()],
            ..Default::default()
        };

        // head
        let head = &params.head;
        let mut d_pooled = vec![0.0; n * hidden];
        if weights {
            grads.head_w = vec![0.0; head.weight.len()];
            grads.head_b = vec![0.0; head.bias.len()];
        }
        for b in 0..n {
            let g = &grad_out[b * k..(b + 1) * k];
            let x = &self.pooled[b * hidden..(b + 1) * hidden];
            let dp = &mut d_pooled[b * hidden..(b + 1) * hidden];
            for (o, &go) in g.iter().enumerate() {
                let w = &head.weight[o * hidden..(o + 1) * hidden];
                super::layers::axpy(dp, go, w);
                if weights {
                    grads.head_b[o] += go;
                    super::layers::axpy(&mut grads.head_w[o * hidden..(o + 1) * hidden], go, x);
                }
            }
        }

        // average pooling over time
        let mut d_act = vec![0.0; n * len * hidden];
        let inv_len = 1.0 / len as f64;
        for b in 0..n {
            let dp = &d_pooled[b * hidden..(b + 1) * hidden];
            for t in 0..len {
                let row = &mut d_act[(b * len + t) * hidden..(b * len + t + 1) * hidden];
                for (r, d) in row.iter_mut().zip(dp) {
                    *r = *d * inv_len;
                }
            }
        }

        for (i, block) in params.blocks.iter().enumerate().rev() {
            let cache = &self.blocks[i];
            let x = &self.activations[i];
            let out = &self.activations[i + 1];
            let need_dx = i > 0;
            let bg = &mut grads.blocks[i];

            // relu after the residual sum
            for (d, o) in d_act.iter_mut().zip(out) {
                if *o <= 0.0 {
                    *d = 0.0;
                }
            }
            let d_sum = d_act;

            // second conv branch
            let (g2, b2) = grad_bn_affine(&d_sum, &cache.bn2.h, hidden)?;
            bg.bn2_gamma = g2;
            bg.bn2_beta = b2;
            let dh2: Vec<f64> = scale_by_gamma(&d_sum, &block.bn2.gamma);
            let dz2 = bn_input_grad(&dh2, &cache.bn2.h, &cache.bn2.std, batch_stats);
            let mut da1 = vec![0.0; n * len * hidden];
            if weights {
                bg.conv2_w = vec![0.0; block.conv2.weight.len()];
                bg.conv2_b = vec![0.0; hidden];
            }
            block.conv2.backward(
                &cache.a1,
                &dz2,
                n,
                len,
                weights.then(|| (&mut bg.conv2_w[..], &mut bg.conv2_b[..])),
                Some(&mut da1),
            );
            for (d, a) in da1.iter_mut().zip(&cache.a1) {
                if *a <= 0.0 {
                    *d = 0.0;
                }
            }
            let (g1, b1) = grad_bn_affine(&da1, &cache.bn1.h, hidden)?;
            bg.bn1_gamma = g1;
            bg.bn1_beta = b1;
            let dh1 = scale_by_gamma(&da1, &block.bn1.gamma);
            let dz1 = bn_input_grad(&dh1, &cache.bn1.h, &cache.bn1.std, batch_stats);

            let cin = block.conv1.cin;
            let mut dx = if need_dx { vec![0.0; n * len * cin] } else { Vec::new() };
            if weights {
                bg.conv1_w = vec![0.0; block.conv1.weight.len()];
                bg.conv1_b = vec![0.0; hidden];
            }
            block.conv1.backward(
                x,
                &dz1,
                n,
                len,
                weights.then(|| (&mut bg.conv1_w[..], &mut bg.conv1_b[..])),
                need_dx.then_some(&mut dx[..]),
            );

            // skip path
            match &block.downsample {
                Some(ds) => {
                    if weights {
                        bg.down_w = vec![0.0; ds.weight.len()];
                        bg.down_b = vec![0.0; hidden];
                    }
                    ds.backward(
                        x,
                        &d_sum,
                        n,
                        len,
                        weights.then(|| (&mut bg.down_w[..], &mut bg.down_b[..])),
                        need_dx.then_some(&mut dx[..]),
                    );
                }
                None => {
                    if need_dx {
                        for (d, s) in dx.iter_mut().zip(&d_sum) {
                            *d += *s;
                        }
                    }
                }
            }
            d_act = dx;
        }
        Ok(grads)
    }
}

fn scale_by_gamma(d: &[f64], gamma: &[f64]) -> Vec<f64> {
    let c = gamma.len();
    let mut out = d.to_vec();
    for row in out.chunks_exact_mut(c) {
        for (r, g) in row.iter_mut().zip(gamma) {
            *r *= *g;
        }
    }
    out
}

/// Flat gradient over `phi` for an existing forward pass. Gradients of the
/// frozen weights are never formed.
pub fn backward_to_bn(params: &BackboneParams, pass: &ForwardPass, grad_out: &[f64]) -> Result<Vec<f64>> {
    Ok(pass.backward(params, grad_out, false)?.phi())
}
