//! Multi-scale residual TCN with temporal batch normalization.
//!
//! Each residual block is two causal dilated convolutions, each followed
//! by batch norm, with a ReLU between them and after the residual sum.
//! The first block projects the input dimension to the hidden width with
//! a 1×1 convolution on the skip path. The last block's output is averaged
//! over time and fed to a linear head.
//!
//! At test time only the batch-norm affine parameters (the flat vector
//! `phi`) and the running statistics move.

mod layers;
mod net;
mod train;

use alloc::vec;
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

pub use layers::{bn_apply, channel_moments, grad_bn_affine, std_floor, BatchNorm, Conv1d, Linear, BN_EPS};
pub use net::{backward_to_bn, forward, BnMode, ForwardPass, Gradients};
pub use train::{train_supervised, AdamW, Epoch, TrainConfig, TrainOutcome};

pub use crate::data::WindowBatch;
use crate::rng::Rng;
use crate::{Error, Result};

/// Prediction target of the linear head.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind")]
pub enum TaskHead {
    /// Two logits, softmax probabilities `(down, up)`.
    Classification,
    /// `horizon` real outputs.
    Regression { horizon: usize },
}

impl TaskHead {
    pub fn output_dim(&self) -> usize {
        match self {
            TaskHead::Classification => 2,
            TaskHead::Regression { horizon } => *horizon,
        }
    }

    pub fn is_classification(&self) -> bool {
        matches!(self, TaskHead::Classification)
    }
}

/// Immutable shape of a backbone.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Architecture {
    input_dim: usize,
    window_len: usize,
    hidden: usize,
    kernel: usize,
    dilations: Vec<usize>,
    head: TaskHead,
}

impl Architecture {
    /// Three blocks, hidden width 64, kernel 3, dilations 1/2/4.
    pub fn standard(input_dim: usize, window_len: usize, head: TaskHead) -> Result<Self> {
        Self::new(input_dim, window_len, 64, 3, vec![1, 2, 4], head)
    }

    pub fn new(
        input_dim: usize,
        window_len: usize,
        hidden: usize,
        kernel: usize,
        dilations: Vec<usize>,
        head: TaskHead,
    ) -> Result<Self> {
        if input_dim == 0 || window_len == 0 || hidden == 0 || kernel == 0 {
            return Err(Error::config("architecture", "all sizes must be positive"));
        }
        if dilations.is_empty() || dilations.contains(&0) {
            return Err(Error::config(
                "dilations",
                "need at least one block and positive dilations",
            ));
        }
        if head.output_dim() == 0 {
            return Err(Error::config("horizon", "must be positive"));
        }
        Ok(Self {
            input_dim,
            window_len,
            hidden,
            kernel,
            dilations,
            head,
        })
    }

    pub fn input_dim(&self) -> usize {
        self.input_dim
    }
    pub fn window_len(&self) -> usize {
        self.window_len
    }
    pub fn hidden(&self) -> usize {
        self.hidden
    }
    pub fn kernel(&self) -> usize {
        self.kernel
    }
    pub fn dilations(&self) -> &[usize] {
        &self.dilations
    }
    pub fn head(&self) -> TaskHead {
        self.head
    }
    pub fn blocks(&self) -> usize {
        self.dilations.len()
    }

    /// Receptive field of the stacked causal convolutions in time steps.
    pub fn receptive_field(&self) -> usize {
        1 + 2 * (self.kernel - 1) * self.dilations.iter().sum::<usize>()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ResidualBlock {
    pub conv1: Conv1d,
    pub bn1: BatchNorm,
    pub conv2: Conv1d,
    pub bn2: BatchNorm,
    /// 1×1 projection on the skip path when the width changes.
    pub downsample: Option<Conv1d>,
}

/// Full parameter set of a backbone.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BackboneParams {
    arch: Architecture,
    pub blocks: Vec<ResidualBlock>,
    pub head: Linear,
}

impl BackboneParams {
    /// Uniform fan-in initialization from an explicit generator.
    pub fn init(arch: Architecture, rng: &mut Rng) -> Self {
        let mut blocks = Vec::with_capacity(arch.blocks());
        let mut cin = arch.input_dim;
        for &d in &arch.dilations {
            let h = arch.hidden;
            blocks.push(ResidualBlock {
                conv1: Conv1d::new(cin, h, arch.kernel, d, rng),
                bn1: BatchNorm::new(h),
                conv2: Conv1d::new(h, h, arch.kernel, d, rng),
                bn2: BatchNorm::new(h),
                downsample: (cin != h).then(|| Conv1d::new(cin, h, 1, 1, rng)),
            });
            cin = h;
        }
        let head = Linear::new(arch.hidden, arch.head.output_dim(), rng);
        Self { arch, blocks, head }
    }

    pub fn arch(&self) -> &Architecture {
        &self.arch
    }

    pub fn bn_layers(&self) -> impl Iterator<Item = &BatchNorm> {
        self.blocks.iter().flat_map(|b| [&b.bn1, &b.bn2])
    }

    pub fn bn_layers_mut(&mut self) -> impl Iterator<Item = &mut BatchNorm> {
        self.blocks.iter_mut().flat_map(|b| [&mut b.bn1, &mut b.bn2])
    }

    /// Dimension of `phi`: two affine parameters per batch-norm channel.
    pub fn phi_len(&self) -> usize {
        2 * self.bn_layers().map(BatchNorm::channels).sum::<usize>()
    }

    /// Flat copy of the adaptable affine parameters, ordered per layer as
    /// `gamma` then `beta`.
    pub fn phi(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.phi_len());
        for bn in self.bn_layers() {
            out.extend_from_slice(&bn.gamma);
            out.extend_from_slice(&bn.beta);
        }
        out
    }

    pub fn set_phi(&mut self, phi: &[f64]) -> Result<()> {
        if phi.len() != self.phi_len() {
            return Err(Error::dim("phi", self.phi_len(), phi.len()));
        }
        let mut off = 0;
        for bn in self.bn_layers_mut() {
            let c = bn.channels();
            bn.gamma.copy_from_slice(&phi[off..off + c]);
            bn.beta.copy_from_slice(&phi[off + c..off + 2 * c]);
            off += 2 * c;
        }
        Ok(())
    }

    /// Trainable tensors in canonical order (matches [`Gradients::flatten`]).
    pub(crate) fn trainable_mut(&mut self) -> Vec<&mut [f64]> {
        let mut out: Vec<&mut [f64]> = Vec::new();
        for b in &mut self.blocks {
            out.push(&mut b.conv1.weight);
            out.push(&mut b.conv1.bias);
            out.push(&mut b.bn1.gamma);
            out.push(&mut b.bn1.beta);
            out.push(&mut b.conv2.weight);
            out.push(&mut b.conv2.bias);
            out.push(&mut b.bn2.gamma);
            out.push(&mut b.bn2.beta);
            if let Some(d) = &mut b.downsample {
                out.push(&mut d.weight);
                out.push(&mut d.bias);
            }
        }
        out.push(&mut self.head.weight);
        out.push(&mut self.head.bias);
        out
    }

    /// Every floating-point tensor including running statistics.
    pub fn tensors(&self) -> Vec<&[f64]> {
        let mut out: Vec<&[f64]> = Vec::new();
        for b in &self.blocks {
            out.extend([&b.conv1.weight[..], &b.conv1.bias]);
            for bn in [&b.bn1, &b.bn2] {
                out.extend([&bn.gamma[..], &bn.beta, &bn.running_mean, &bn.running_std]);
            }
            out.extend([&b.conv2.weight[..], &b.conv2.bias]);
            if let Some(d) = &b.downsample {
                out.extend([&d.weight[..], &d.bias]);
            }
        }
        out.extend([&self.head.weight[..], &self.head.bias]);
        out
    }

    pub fn tensors_mut(&mut self) -> Vec<&mut [f64]> {
        let mut out: Vec<&mut [f64]> = Vec::new();
        for b in &mut self.blocks {
            out.push(&mut b.conv1.weight);
            out.push(&mut b.conv1.bias);
            for bn in [&mut b.bn1, &mut b.bn2] {
                out.push(&mut bn.gamma);
                out.push(&mut bn.beta);
                out.push(&mut bn.running_mean);
                out.push(&mut bn.running_std);
            }
            out.push(&mut b.conv2.weight);
            out.push(&mut b.conv2.bias);
            if let Some(d) = &mut b.downsample {
                out.push(&mut d.weight);
                out.push(&mut d.bias);
            }
        }
        out.push(&mut self.head.weight);
        out.push(&mut self.head.bias);
        out
    }

    /// Checks shapes against the architecture and that every running std
    /// is positive and finite. Used after deserialization.
    pub fn validate(&self) -> Result<()> {
        let a = &self.arch;
        if self.blocks.len() != a.blocks() {
            return Err(Error::dim("residual blocks", a.blocks(), self.blocks.len()));
        }
        let mut cin = a.input_dim;
        for (b, &d) in self.blocks.iter().zip(&a.dilations) {
            for (conv, ci, k, dil) in [(&b.conv1, cin, a.kernel, d), (&b.conv2, a.hidden, a.kernel, d)] {
                if conv.cin != ci || conv.cout != a.hidden || conv.kernel != k || conv.dilation != dil {
                    return Err(Error::Invariant("convolution shape does not match architecture"));
                }
                if conv.weight.len() != k * ci * a.hidden || conv.bias.len() != a.hidden {
                    return Err(Error::dim("convolution weights", k * ci * a.hidden, conv.weight.len()));
                }
            }
            for bn in [&b.bn1, &b.bn2] {
                for v in [&bn.gamma, &bn.beta, &bn.running_mean, &bn.running_std] {
                    if v.len() != a.hidden {
                        return Err(Error::dim("batch-norm channels", a.hidden, v.len()));
                    }
                }
                if bn.running_std.iter().any(|s| !(*s > 0.0) || !s.is_finite()) {
                    return Err(Error::Invariant("running std must be positive"));
                }
            }
            match (&b.downsample, cin != a.hidden) {
                (Some(ds), true) if ds.cin == cin && ds.cout == a.hidden && ds.weight.len() == cin * a.hidden => {}
                (None, false) => {}
                _ => return Err(Error::Invariant("skip projection does not match architecture")),
            }
            cin = a.hidden;
        }
        if self.head.input != a.hidden || self.head.output != a.head.output_dim() {
            return Err(Error::Invariant("head shape does not match architecture"));
        }
        if self.head.weight.len() != a.hidden * a.head.output_dim() {
            return Err(Error::dim(
                "head weights",
                a.hidden * a.head.output_dim(),
                self.head.weight.len(),
            ));
        }
        Ok(())
    }
}
