//! Test-only oracles, kept independent of the engine's im2col/GEMM path.
#![allow(dead_code)]

use masktune::nn::{self, ConvBlock, HeadPool, NetworkSpec, ParamSet};
use masktune::Tensor;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Straight nested-loop forward pass; returns logits `[N, k]`.
pub fn naive_logits(spec: &NetworkSpec, p: &ParamSet, batch: &Tensor) -> Vec<f64> {
    naive_forward(spec, p, batch).0
}

/// Logits plus the piecewise-linear region: every ReLU sign and every
/// max-pool winner, in evaluation order.
pub fn naive_forward(spec: &NetworkSpec, p: &ParamSet, batch: &Tensor) -> (Vec<f64>, Vec<usize>) {
    let n = batch.shape()[0];
    let mut out = Vec::new();
    let mut region = Vec::new();
    for s in 0..n {
        let [mut c, mut h, mut w] = spec.input;
        let mut x: Vec<f64> = batch.outer(s).to_vec();
        for (b, lp) in spec.conv_blocks.iter().zip(&p.convs) {
            let k = b.kernel_size;
            let oh = (h + 2 * b.padding - k) / b.stride + 1;
            let ow = (w + 2 * b.padding - k) / b.stride + 1;
            let wt = lp.weight.data();
            let mut y = vec![0.0; b.out_channels * oh * ow];
            for co in 0..b.out_channels {
                for i in 0..oh {
                    for j in 0..ow {
                        let mut acc = lp.bias.data()[co];
                        for ci in 0..c {
                            for a in 0..k {
                                for bb in 0..k {
                                    let ii = (i * b.stride + a) as isize - b.padding as isize;
                                    let jj = (j * b.stride + bb) as isize - b.padding as isize;
                                    if ii < 0 || jj < 0 || ii as usize >= h || jj as usize >= w {
                                        continue;
                                    }
                                    acc += wt[((co * c + ci) * k + a) * k + bb]
                                        * x[(ci * h + ii as usize) * w + jj as usize];
                                }
                            }
                        }
                        if b.relu {
                            region.push(usize::from(acc > 0.0));
                        }
                        y[(co * oh + i) * ow + j] = if b.relu { acc.max(0.0) } else { acc };
                    }
                }
            }
            c = b.out_channels;
            h = oh;
            w = ow;
            x = y;
            if b.maxpool2 {
                let (ph, pw) = (h / 2, w / 2);
                let mut y = vec![0.0; c * ph * pw];
                for ch in 0..c {
                    for i in 0..ph {
                        for j in 0..pw {
                            let mut m = f64::NEG_INFINITY;
                            let mut arg = 0;
                            for a in 0..2 {
                                for bb in 0..2 {
                                    let v = x[(ch * h + 2 * i + a) * w + 2 * j + bb];
                                    if v > m {
                                        m = v;
                                        arg = 2 * a + bb;
                                    }
                                }
                            }
                            region.push(arg);
                            y[(ch * ph + i) * pw + j] = m;
                        }
                    }
                }
                h = ph;
                w = pw;
                x = y;
            }
        }
        let feat: Vec<f64> = match spec.head_pool {
            HeadPool::GlobalAverage => (0..c)
                .map(|ch| x[ch * h * w..(ch + 1) * h * w].iter().sum::<f64>() / (h * w) as f64)
                .collect(),
            HeadPool::Flatten => x,
        };
        let hw = p.head.weight.data();
        for cls in 0..spec.num_classes {
            let mut acc = p.head.bias.data()[cls];
            for (q, f) in feat.iter().enumerate() {
                acc += hw[cls * feat.len() + q] * f;
            }
            out.push(acc);
        }
    }
    (out, region)
}

/// A random small network (at most ~1e3 parameters) and a matching batch.
pub fn random_config(seed: u64) -> (NetworkSpec, ParamSet, Tensor, Vec<usize>) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let c = rng.random_range(1..=3);
    let h = rng.random_range(5..=8);
    let w = rng.random_range(5..=8);
    let nblocks = rng.random_range(1..=3);
    let mut blocks = Vec::new();
    let (mut ch, mut hh, mut ww) = (c, h, w);
    for _ in 0..nblocks {
        let padding = rng.random_range(0..=1);
        let k = rng.random_range(1..=3usize.min(hh.min(ww) + 2 * padding));
        let stride = if rng.random_bool(0.25) { 2 } else { 1 };
        let out_channels = rng.random_range(1..=4);
        let oh = (hh + 2 * padding - k) / stride + 1;
        let ow = (ww + 2 * padding - k) / stride + 1;
        let maxpool2 = oh >= 4 && ow >= 4 && rng.random_bool(0.5);
        blocks.push(ConvBlock {
            out_channels,
            kernel_size: k,
            stride,
            padding,
            relu: rng.random_bool(0.8),
            maxpool2,
        });
        ch = out_channels;
        hh = if maxpool2 { oh / 2 } else { oh };
        ww = if maxpool2 { ow / 2 } else { ow };
    }
    let _ = (ch, hh, ww);
    let spec = NetworkSpec {
        input: [c, h, w],
        cam_layer: rng.random_range(0..nblocks),
        conv_blocks: blocks,
        head_pool: if rng.random_bool(0.5) { HeadPool::GlobalAverage } else { HeadPool::Flatten },
        num_classes: rng.random_range(2..=4),
    };
    let mut params = ParamSet::zeros(&spec).unwrap();
    for t in params.tensors_mut() {
        for v in t.data_mut() {
            *v = rng.random_range(-1.0..1.0);
        }
    }
    let n = rng.random_range(1..=3);
    let data = (0..n * c * h * w).map(|_| rng.random_range(-1.0..1.0)).collect();
    let batch = Tensor::new(vec![n, c, h, w], data).unwrap();
    let labels = (0..n).map(|_| rng.random_range(0..spec.num_classes)).collect();
    (spec, params, batch, labels)
}

pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-6)
}

pub struct GradCheck {
    /// Largest relative error over coordinates above the resolution.
    pub worst: f64,
    pub checked: usize,
    /// Coordinates where both gradients sit below the resolution of the
    /// central difference and disagree by more than it.
    pub noise_failures: usize,
    /// Coordinates whose ±h step leaves the piecewise-linear region, where a
    /// central difference does not estimate the derivative.
    pub straddling: usize,
}

/// Relative error between analytic parameter gradients and central
/// differences of the loss with step `h`, over every coordinate whose step
/// stays inside one ReLU/max-pool region. Gradients smaller than the
/// difference's roundoff resolution `64·ε·max(1, |loss|)/h` are compared
/// absolutely at that resolution instead.
pub fn grad_check(spec: &NetworkSpec, params: &ParamSet, batch: &Tensor, labels: &[usize], h: f64) -> GradCheck {
    let analytic = nn::gradients(spec, params, batch, labels).unwrap().params;
    let base = naive_forward(spec, params, batch).1;
    let loss0 = nn::cross_entropy(&nn::logits(spec, params, batch).unwrap(), labels).unwrap();
    let resolution = 64.0 * f64::EPSILON * loss0.abs().max(1.0) / h;
    let eval = |p: &ParamSet| {
        let (logits, region) = naive_forward(spec, p, batch);
        let k = spec.num_classes;
        let loss = nn::cross_entropy(&Tensor::new(vec![logits.len() / k, k], logits).unwrap(), labels).unwrap();
        (loss, region)
    };
    let mut out = GradCheck {
        worst: 0.0,
        checked: 0,
        noise_failures: 0,
        straddling: 0,
    };
    let mut probe = params.clone();
    for ti in 0..params.tensors().len() {
        for vi in 0..params.tensors()[ti].len() {
            let orig = params.tensors()[ti].data()[vi];
            probe.tensors_mut()[ti].data_mut()[vi] = orig + h;
            let (up, r_up) = eval(&probe);
            probe.tensors_mut()[ti].data_mut()[vi] = orig - h;
            let (down, r_down) = eval(&probe);
            probe.tensors_mut()[ti].data_mut()[vi] = orig;
            if r_up != base || r_down != base {
                out.straddling += 1;
                continue;
            }
            let numeric = (up - down) / (2.0 * h);
            let a = analytic.tensors()[ti].data()[vi];
            if a.abs().max(numeric.abs()) < resolution {
                out.noise_failures += usize::from((a - numeric).abs() > resolution);
            } else {
                out.worst = out.worst.max(relative_error(a, numeric));
            }
            out.checked += 1;
        }
    }
    out
}
