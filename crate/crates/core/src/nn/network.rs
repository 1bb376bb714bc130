use super::kernels::{self, ConvGeom};
use super::loss::{argmax, cross_entropy_grad};
use super::params::ParamSet;
use super::spec::{BlockShapes, HeadPool, NetworkSpec};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Raw logits plus the saliency tap.
#[derive(Clone, Debug)]
pub struct Forward {
    /// `[N, k]`, pre-softmax.
    pub logits: Tensor,
    /// `[N, K, H', W']`: post-activation output of the `cam_layer` block, before pooling.
    pub feature_maps: Tensor,
}

#[derive(Clone, Debug)]
pub struct Gradients {
    pub loss: f64,
    pub logits: Tensor,
    pub params: ParamSet,
}

/// Gradient of one logit per sample w.r.t. the saliency feature maps.
#[derive(Clone, Debug)]
pub struct FeatureGradients {
    pub logits: Tensor,
    pub targets: Vec<usize>,
    pub feature_maps: Tensor,
    /// Same shape as `feature_maps`.
    pub grad: Tensor,
}

/// Which logit to differentiate for each sample.
#[derive(Clone, Copy, Debug)]
pub enum LogitTarget<'a> {
    /// Highest logit, lowest index on ties.
    Predicted,
    Classes(&'a [usize]),
}

struct BlockTrace {
    cols: Vec<f64>,
    /// Post-activation, pre-pool.
    act: Vec<f64>,
    pool_arg: Option<Vec<u32>>,
}

struct Trace {
    n: usize,
    shapes: Vec<BlockShapes>,
    blocks: Vec<BlockTrace>,
    head_in: Vec<f64>,
    logits: Vec<f64>,
}

fn check_batch(spec: &NetworkSpec, batch: &Tensor) -> Result<usize> {
    let s = batch.shape();
    if s.len() != 4 || s[1..] != spec.input {
        return Err(Error::shape(
            0,
            format!("batch shape {s:?}, expected [N, {}, {}, {}]", spec.input[0], spec.input[1], spec.input[2]),
        ));
    }
    Ok(s[0])
}

fn run(spec: &NetworkSpec, params: &ParamSet, batch: &Tensor, keep_cols: bool) -> Result<Trace> {
    let shapes = spec.block_shapes()?;
    params.check(spec)?;
    let n = check_batch(spec, batch)?;
    let mut x = batch.data().to_vec();
    let mut blocks = Vec::with_capacity(shapes.len());
    for (i, (block, sh)) in spec.conv_blocks.iter().zip(&shapes).enumerate() {
        let lp = &params.convs[i];
        let g = ConvGeom::new(n, sh.input, block, sh.conv_out);
        let (mut act, cols) = kernels::conv_forward(&g, &x, lp.weight.data(), lp.bias.data());
        if block.relu {
            for v in &mut act {
                if *v < 0.0 {
                    *v = 0.0;
                }
            }
        }
        let [c, h, w] = sh.conv_out;
        let (out, pool_arg) = if block.maxpool2 {
            let (o, a) = kernels::maxpool2_forward(&act, n * c, h, w);
            (o, Some(a))
        } else {
            (act.clone(), None)
        };
        x = out;
        blocks.push(BlockTrace {
            cols: if keep_cols { cols } else { Vec::new() },
            act,
            pool_arg,
        });
    }
    let [_, h, w] = shapes.last().expect("nonempty").output;
    let head_in = match spec.head_pool {
        HeadPool::GlobalAverage => {
            let p = h * w;
            x.chunks_exact(p).map(|plane| plane.iter().sum::<f64>() / p as f64).collect()
        }
        HeadPool::Flatten => x,
    };
    let f = head_in.len() / n;
    debug_assert_eq!(f, params.head.weight.shape()[1]);
    let k = spec.num_classes;
    let wt = params.head.weight.data();
    let bias = params.head.bias.data();
    let mut logits = vec![0.0; n * k];
    for (feat, out) in head_in.chunks_exact(f).zip(logits.chunks_exact_mut(k)) {
        for (j, o) in out.iter_mut().enumerate() {
            let row = &wt[j * f..(j + 1) * f];
            *o = bias[j] + row.iter().zip(feat).map(|(a, b)| a * b).sum::<f64>();
        }
    }
    Ok(Trace {
        n,
        shapes,
        blocks,
        head_in,
        logits,
    })
}

fn feature_tensor(spec: &NetworkSpec, trace: &Trace, data: Vec<f64>) -> Tensor {
    let [c, h, w] = trace.shapes[spec.cam_layer].conv_out;
    Tensor::new(vec![trace.n, c, h, w], data).expect("feature map size")
}

/// Runs the network on a `[N, C, H, W]` batch.
pub fn forward(spec: &NetworkSpec, params: &ParamSet, batch: &Tensor) -> Result<Forward> {
    let mut trace = run(spec, params, batch, false)?;
    let fmap = std::mem::take(&mut trace.blocks[spec.cam_layer].act);
    Ok(Forward {
        logits: Tensor::new(vec![trace.n, spec.num_classes], trace.logits.clone())?,
        feature_maps: feature_tensor(spec, &trace, fmap),
    })
}

/// Logits only; cheaper than [`forward`] for evaluation.
pub fn logits(spec: &NetworkSpec, params: &ParamSet, batch: &Tensor) -> Result<Tensor> {
    let trace = run(spec, params, batch, false)?;
    Tensor::new(vec![trace.n, spec.num_classes], trace.logits)
}

/// Backpropagates `dlogits`. With `tap_only`, stops at the saliency layer and
/// skips parameter gradients below the head.
fn backward(
    spec: &NetworkSpec,
    params: &ParamSet,
    trace: &Trace,
    dlogits: &[f64],
    tap_only: bool,
) -> (ParamSet, Vec<f64>) {
    let n = trace.n;
    let k = spec.num_classes;
    let f = trace.head_in.len() / n;
    let mut grads = params.zeros_like();

    let wt = params.head.weight.data();
    let mut dfeat = vec![0.0; n * f];
    {
        let dw = grads.head.weight.data_mut();
        for s in 0..n {
            let dl = &dlogits[s * k..(s + 1) * k];
            let feat = &trace.head_in[s * f..(s + 1) * f];
            let df = &mut dfeat[s * f..(s + 1) * f];
            for (j, &g) in dl.iter().enumerate() {
                if g == 0.0 {
                    continue;
                }
                let wrow = &wt[j * f..(j + 1) * f];
                let dwrow = &mut dw[j * f..(j + 1) * f];
                for q in 0..f {
                    dwrow[q] += g * feat[q];
                    df[q] += g * wrow[q];
                }
            }
        }
        let db = grads.head.bias.data_mut();
        for row in dlogits.chunks_exact(k) {
            for (b, g) in db.iter_mut().zip(row) {
                *b += g;
            }
        }
    }

    let last = trace.shapes.last().expect("nonempty").output;
    let mut dy = match spec.head_pool {
        HeadPool::GlobalAverage => {
            let p = last[1] * last[2];
            let mut d = Vec::with_capacity(n * last[0] * p);
            for &g in &dfeat {
                d.extend(std::iter::repeat_n(g / p as f64, p));
            }
            d
        }
        HeadPool::Flatten => dfeat,
    };

    let mut tap = Vec::new();
    for i in (0..spec.conv_blocks.len()).rev() {
        let block = &spec.conv_blocks[i];
        let bt = &trace.blocks[i];
        let mut dact = match &bt.pool_arg {
            Some(arg) => kernels::maxpool2_backward(&dy, arg, bt.act.len()),
            None => dy,
        };
        if i == spec.cam_layer {
            tap = dact.clone();
            if tap_only {
                break;
            }
        }
        if block.relu {
            for (d, &a) in dact.iter_mut().zip(&bt.act) {
                if a <= 0.0 {
                    *d = 0.0;
                }
            }
        }
        let sh = &trace.shapes[i];
        let g = ConvGeom::new(n, sh.input, block, sh.conv_out);
        let cols = (!tap_only).then_some(bt.cols.as_slice());
        let cg = kernels::conv_backward(&g, cols, params.convs[i].weight.data(), &dact, i > 0);
        if !tap_only {
            grads.convs[i].weight.data_mut().copy_from_slice(&cg.dweight);
            grads.convs[i].bias.data_mut().copy_from_slice(&cg.dbias);
        }
        match cg.dinput {
            Some(d) => dy = d,
            None => break,
        }
    }
    (grads, tap)
}

/// Exact gradients of mean cross-entropy w.r.t. every parameter.
pub fn gradients(spec: &NetworkSpec, params: &ParamSet, batch: &Tensor, labels: &[usize]) -> Result<Gradients> {
    let trace = run(spec, params, batch, true)?;
    let logits = Tensor::new(vec![trace.n, spec.num_classes], trace.logits.clone())?;
    let (loss, dlogits) = cross_entropy_grad(&logits, labels)?;
    let (grads, _) = backward(spec, params, &trace, &dlogits, false);
    Ok(Gradients {
        loss,
        logits,
        params: grads,
    })
}

/// For each sample, `∂ logit[target] / ∂ feature_maps`.
pub fn feature_gradients(
    spec: &NetworkSpec,
    params: &ParamSet,
    batch: &Tensor,
    target: LogitTarget<'_>,
) -> Result<FeatureGradients> {
    let mut trace = run(spec, params, batch, false)?;
    let n = trace.n;
    let k = spec.num_classes;
    let targets: Vec<usize> = match target {
        LogitTarget::Predicted => trace
            .logits
            .chunks_exact(k)
            .map(|row| argmax(row).expect("k >= 1"))
            .collect(),
        LogitTarget::Classes(c) => {
            if c.len() != n {
                return Err(Error::Input(format!("{} targets for a batch of {n}", c.len())));
            }
            if let Some(&bad) = c.iter().find(|&&t| t >= k) {
                return Err(Error::Input(format!("target class {bad} outside [0, {k})")));
            }
            c.to_vec()
        }
    };
    let mut dlogits = vec![0.0; n * k];
    for (s, &t) in targets.iter().enumerate() {
        dlogits[s * k + t] = 1.0;
    }
    let (_, tap) = backward(spec, params, &trace, &dlogits, true);
    let fmap = std::mem::take(&mut trace.blocks[spec.cam_layer].act);
    Ok(FeatureGradients {
        logits: Tensor::new(vec![n, k], trace.logits.clone())?,
        targets,
        feature_maps: feature_tensor(spec, &trace, fmap),
        grad: feature_tensor(spec, &trace, tap),
    })
}
