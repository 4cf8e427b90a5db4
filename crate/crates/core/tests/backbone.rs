use tta_core::backbone::{
    backward_to_bn, forward, train_supervised, Architecture, BackboneParams, BnMode, TaskHead, TrainConfig,
};
use tta_core::data::{Labels, TaskSpec, WindowBatch, WindowDataset};
use tta_core::rng::{normal, seeded, uniform, Rng};
use tta_core::Error;

fn random_params(arch: Architecture, rng: &mut Rng) -> BackboneParams {
    let mut p = BackboneParams::init(arch, rng);
    for bn in p.bn_layers_mut() {
        for c in 0..bn.channels() {
            bn.gamma[c] = uniform(rng, 0.5, 1.5);
            bn.beta[c] = uniform(rng, -0.3, 0.3);
            bn.running_mean[c] = uniform(rng, -0.2, 0.2);
            bn.running_std[c] = uniform(rng, 0.5, 1.5);
        }
    }
    p
}

fn random_batch(n: usize, len: usize, dim: usize, rng: &mut Rng) -> WindowBatch {
    WindowBatch::new(len, dim, (0..n * len * dim).map(|_| normal(rng)).collect()).unwrap()
}

/// Straight-line forward pass written from the layer definitions:
/// `x[b][t][c]`, conv taps reaching back `(k-1-tap)*d` steps, per-channel
/// normalization over batch and time, residual add, ReLU, mean over time.
#[allow(clippy::needless_range_loop)]
fn reference_forward(p: &BackboneParams, x: &WindowBatch, batch_stats: bool) -> Vec<Vec<f64>> {
    let n = x.len();
    let len = x.window_len();
    let mut act: Vec<Vec<Vec<f64>>> = (0..n)
        .map(|b| {
            (0..len)
                .map(|t| x.window(b)[t * x.dim()..(t + 1) * x.dim()].to_vec())
                .collect()
        })
        .collect();

    let conv = |c: &tta_core::backbone::Conv1d, a: &Vec<Vec<Vec<f64>>>| -> Vec<Vec<Vec<f64>>> {
        let mut out = vec![vec![vec![0.0; c.cout]; len]; n];
        for b in 0..n {
            for t in 0..len {
                for o in 0..c.cout {
                    let mut s = c.bias[o];
                    for tap in 0..c.kernel {
                        let back = (c.kernel - 1 - tap) * c.dilation;
                        if back > t {
                            continue;
                        }
                        for i in 0..c.cin {
                            s += c.weight[(tap * c.cout + o) * c.cin + i] * a[b][t - back][i];
                        }
                    }
                    out[b][t][o] = s;
                }
            }
        }
        out
    };
    let bn = |l: &tta_core::backbone::BatchNorm, z: &mut Vec<Vec<Vec<f64>>>| {
        for c in 0..l.channels() {
            let (mu, sd) = if batch_stats {
                let m = (n * len) as f64;
                let mu = z.iter().flatten().map(|r| r[c]).sum::<f64>() / m;
                let var = z.iter().flatten().map(|r| (r[c] - mu).powi(2)).sum::<f64>() / m;
                (mu, var.max(1e-5).sqrt())
            } else {
                (l.running_mean[c], l.running_std[c])
            };
            for r in z.iter_mut().flatten() {
                r[c] = l.gamma[c] * (r[c] - mu) / sd + l.beta[c];
            }
        }
    };

    for blk in &p.blocks {
        let mut z1 = conv(&blk.conv1, &act);
        bn(&blk.bn1, &mut z1);
        z1.iter_mut().flatten().flatten().for_each(|v| *v = v.max(0.0));
        let mut z2 = conv(&blk.conv2, &z1);
        bn(&blk.bn2, &mut z2);
        let skip = match &blk.downsample {
            Some(ds) => conv(ds, &act),
            None => act.clone(),
        };
        for b in 0..n {
            for t in 0..len {
                for c in 0..z2[b][t].len() {
                    z2[b][t][c] = (z2[b][t][c] + skip[b][t][c]).max(0.0);
                }
            }
        }
        act = z2;
    }

    let h = &p.head;
    act.iter()
        .map(|seq| {
            let pooled: Vec<f64> = (0..h.input)
                .map(|c| seq.iter().map(|r| r[c]).sum::<f64>() / len as f64)
                .collect();
            let out: Vec<f64> = (0..h.output)
                .map(|o| h.bias[o] + (0..h.input).map(|i| h.weight[o * h.input + i] * pooled[i]).sum::<f64>())
                .collect();
            match p.arch().head() {
                TaskHead::Classification => {
                    let m = out[0].max(out[1]);
                    let e: Vec<f64> = out.iter().map(|z| (z - m).exp()).collect();
                    let s: f64 = e.iter().sum();
                    e.iter().map(|v| v / s).collect()
                }
                TaskHead::Regression { .. } => out,
            }
        })
        .collect()
}

fn assert_close(a: f64, b: f64, tol: f64) {
    assert!((a - b).abs() <= tol * (1.0 + b.abs()), "{a} vs {b}");
}

#[test]
fn forward_matches_reference_implementation() {
    for (seed, head) in [
        (0, TaskHead::Classification),
        (1, TaskHead::Regression { horizon: 3 }),
        (2, TaskHead::Regression { horizon: 1 }),
    ] {
        let mut rng = seeded(seed);
        let arch = Architecture::new(3, 12, 5, 3, vec![1, 2, 4], head).unwrap();
        let p = random_params(arch, &mut rng);
        let x = random_batch(4, 12, 3, &mut rng);
        for (mode, batch_stats) in [(BnMode::Running, false), (BnMode::Batch, true)] {
            let got = forward(&p, &x, mode).unwrap();
            let want = reference_forward(&p, &x, batch_stats);
            for (i, w) in want.iter().enumerate() {
                for (g, w) in got.prediction(i).iter().zip(w) {
                    assert_close(*g, *w, 1e-12);
                }
            }
        }
    }
}

#[test]
fn forward_golden_seed_zero() {
    let mut rng = seeded(0);
    let arch = Architecture::new(2, 8, 4, 3, vec![1, 2, 4], TaskHead::Regression { horizon: 1 }).unwrap();
    let p = BackboneParams::init(arch, &mut rng);
    let x = random_batch(4, 8, 2, &mut rng);
    let got = forward(&p, &x, BnMode::Running).unwrap();
    let want = reference_forward(&p, &x, false);
    for i in 0..4 {
        assert_close(want[i][0], GOLDEN[i], 1e-12);
        assert_close(got.prediction(i)[0], GOLDEN[i], 1e-12);
    }
}

const GOLDEN: [f64; 4] = [
    -0.1141612301700588,
    -0.148563491844902,
    -0.17270585172775071,
    -0.3002623421413507,
];

#[test]
fn zero_head_gives_uniform_probabilities() {
    let mut rng = seeded(5);
    let arch = Architecture::new(2, 6, 4, 3, vec![1, 2], TaskHead::Classification).unwrap();
    let mut p = random_params(arch, &mut rng);
    p.head.weight.iter_mut().for_each(|w| *w = 0.0);
    p.head.bias.iter_mut().for_each(|w| *w = 0.0);
    let x = random_batch(5, 6, 2, &mut rng);
    for mode in [BnMode::Running, BnMode::Batch] {
        assert!(forward(&p, &x, mode).unwrap().predictions().iter().all(|v| *v == 0.5));
    }
}

#[test]
fn duplicated_window_gives_identical_outputs() {
    let mut rng = seeded(6);
    let arch = Architecture::new(3, 10, 4, 3, vec![1, 2, 4], TaskHead::Regression { horizon: 2 }).unwrap();
    let p = random_params(arch, &mut rng);
    let x = random_batch(1, 10, 3, &mut rng);
    let mut two = x.clone();
    two.extend(&x).unwrap();
    let out = forward(&p, &two, BnMode::Running).unwrap();
    assert_eq!(out.prediction(0), out.prediction(1));
}

#[test]
fn shape_and_finiteness_errors() {
    let mut rng = seeded(7);
    let arch = Architecture::new(3, 10, 4, 3, vec![1], TaskHead::Classification).unwrap();
    let p = random_params(arch, &mut rng);
    assert!(forward(&p, &random_batch(2, 9, 3, &mut rng), BnMode::Running).is_err());
    assert!(forward(&p, &random_batch(2, 10, 2, &mut rng), BnMode::Running).is_err());
    let mut x = random_batch(3, 10, 3, &mut rng);
    let mut data = x.as_slice().to_vec();
    data[2 * 30 + 4] = f64::NAN;
    x = WindowBatch::new(10, 3, data).unwrap();
    let err = forward(&p, &x, BnMode::Running).unwrap_err();
    assert!(matches!(err, Error::NonFinite { index: 2, .. }), "{err}");
}

/// Scalar loss `sum_i w_i * out_i` so the output gradient is `w`.
fn weighted_output(p: &BackboneParams, x: &WindowBatch, mode: BnMode, w: &[f64]) -> f64 {
    let pass = forward(p, x, mode).unwrap();
    pass.raw_outputs().iter().zip(w).map(|(a, b)| a * b).sum()
}

fn fd_check(arch: Architecture, mode: BnMode, seed: u64, n: usize) {
    let mut rng = seeded(seed);
    let p = random_params(arch.clone(), &mut rng);
    let x = random_batch(n, arch.window_len(), arch.input_dim(), &mut rng);
    let pass = forward(&p, &x, mode).unwrap();
    let w: Vec<f64> = (0..pass.raw_outputs().len()).map(|_| normal(&mut rng)).collect();
    let g = backward_to_bn(&p, &pass, &w).unwrap();
    assert_eq!(g.len(), p.phi_len());
    let phi = p.phi();
    let eps = 1e-5;
    for k in 0..phi.len() {
        let mut q = p.clone();
        let mut v = phi.clone();
        v[k] += eps;
        q.set_phi(&v).unwrap();
        let up = weighted_output(&q, &x, mode, &w);
        v[k] -= 2.0 * eps;
        q.set_phi(&v).unwrap();
        let down = weighted_output(&q, &x, mode, &w);
        let fd = (up - down) / (2.0 * eps);
        assert!(
            (g[k] - fd).abs() <= 1e-4 * fd.abs().max(1e-3),
            "seed {seed} coordinate {k}: analytic {} vs fd {fd}",
            g[k]
        );
    }
}

#[test]
fn phi_gradient_matches_finite_differences_deep() {
    for seed in 0..5 {
        let cls = Architecture::new(2, 9, 3, 3, vec![1, 2, 4], TaskHead::Classification).unwrap();
        fd_check(cls, BnMode::Running, seed, 3);
        let reg = Architecture::new(3, 7, 4, 2, vec![1, 3], TaskHead::Regression { horizon: 2 }).unwrap();
        fd_check(reg, BnMode::Running, 100 + seed, 2);
    }
}

#[test]
fn phi_gradient_matches_finite_differences_batch_stats() {
    for seed in 0..5 {
        let reg = Architecture::new(2, 8, 3, 3, vec![1, 2], TaskHead::Regression { horizon: 2 }).unwrap();
        fd_check(reg, BnMode::Batch, 200 + seed, 3);
    }
}

#[test]
fn phi_gradient_is_linear_in_output_gradient() {
    let mut rng = seeded(11);
    let arch = Architecture::new(2, 8, 4, 3, vec![1, 2], TaskHead::Regression { horizon: 3 }).unwrap();
    let p = random_params(arch, &mut rng);
    let x = random_batch(3, 8, 2, &mut rng);
    let pass = forward(&p, &x, BnMode::Running).unwrap();
    let w: Vec<f64> = (0..9).map(|_| normal(&mut rng)).collect();
    let g1 = backward_to_bn(&p, &pass, &w).unwrap();
    let w2: Vec<f64> = w.iter().map(|v| 2.0 * v).collect();
    let g2 = backward_to_bn(&p, &pass, &w2).unwrap();
    for (a, b) in g1.iter().zip(&g2) {
        assert_close(*b, 2.0 * a, 1e-12);
    }
    let zero = backward_to_bn(&p, &pass, &[0.0; 9]).unwrap();
    assert!(zero.iter().all(|v| *v == 0.0));
}

fn toy_regression(n: usize, len: usize, seed: u64) -> WindowDataset {
    let mut rng = seeded(seed);
    let inputs = random_batch(n, len, 2, &mut rng);
    let data: Vec<f64> = inputs.iter().map(|w| w[w.len() - 2] - 0.5 * w[0]).collect();
    WindowDataset {
        task: TaskSpec::FutureValues { horizon: 1 },
        inputs,
        labels: Labels::Values { dim: 1, data },
        origins: (0..n).collect(),
        timestamps: (0..n as i64).collect(),
        regimes: vec![None; n],
    }
}

#[test]
fn memorizes_small_regression_set() {
    let train = toy_regression(64, 8, 1);
    let cfg = TrainConfig {
        learning_rate: 1e-2,
        weight_decay: 0.0,
        batch_size: 64,
        max_epochs: 1500,
        patience: 1500,
        seed: 0,
    };
    let arch = Architecture::new(2, 8, 16, 3, vec![1, 2], TaskHead::Regression { horizon: 1 }).unwrap();
    let out = train_supervised(arch, &train, &train, &cfg).unwrap();
    let pass = forward(&out.params, &train.inputs, BnMode::Running).unwrap();
    let Labels::Values { data, .. } = &train.labels else {
        unreachable!()
    };
    let mse = pass
        .predictions()
        .iter()
        .zip(data)
        .map(|(a, b)| (a - b).powi(2))
        .sum::<f64>()
        / 64.0;
    assert!(mse < 1e-3, "training mse {mse}");
}

#[test]
fn training_is_deterministic() {
    let train = toy_regression(40, 6, 2);
    let valid = toy_regression(16, 6, 3);
    let cfg = TrainConfig {
        learning_rate: 1e-2,
        batch_size: 8,
        max_epochs: 6,
        patience: 3,
        seed: 9,
        ..Default::default()
    };
    let arch = Architecture::new(2, 6, 4, 3, vec![1, 2], TaskHead::Regression { horizon: 1 }).unwrap();
    let a = train_supervised(arch.clone(), &train, &valid, &cfg).unwrap();
    let b = train_supervised(arch, &train, &valid, &cfg).unwrap();
    assert_eq!(a.best_metric.to_bits(), b.best_metric.to_bits());
    assert_eq!(a.params, b.params);
}

#[test]
fn early_stop_after_patience() {
    let train = toy_regression(32, 6, 4);
    // labels unrelated to the inputs, so validation stalls quickly
    let mut valid = toy_regression(32, 6, 5);
    valid.labels = Labels::Values {
        dim: 1,
        data: (0..32).map(|i| if i % 2 == 0 { 10.0 } else { -10.0 }).collect(),
    };
    let cfg = TrainConfig {
        learning_rate: 5e-2,
        batch_size: 8,
        max_epochs: 200,
        patience: 2,
        seed: 1,
        ..Default::default()
    };
    let arch = Architecture::new(2, 6, 4, 3, vec![1], TaskHead::Regression { horizon: 1 }).unwrap();
    let out = train_supervised(arch, &train, &valid, &cfg).unwrap();
    let last = out.history.last().unwrap().epoch;
    assert!(last < 200);
    assert_eq!(last, out.best_epoch + cfg.patience);
    for e in &out.history[out.best_epoch + 1..] {
        assert!(e.valid_metric >= out.best_metric);
    }
}
