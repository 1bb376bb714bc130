use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::spec::NetworkSpec;
use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq)]
pub struct LayerParams {
    pub weight: Tensor,
    pub bias: Tensor,
}

impl LayerParams {
    fn zeros_like(&self) -> Self {
        LayerParams {
            weight: Tensor::zeros(self.weight.shape()),
            bias: Tensor::zeros(self.bias.shape()),
        }
    }
}

/// One tensor per weight and bias, in network order. Used for parameters,
/// gradients and momentum buffers alike.
#[derive(Clone, Debug, PartialEq)]
pub struct ParamSet {
    /// Conv weights are `[out, in, k, k]`, biases `[out]`.
    pub convs: Vec<LayerParams>,
    /// Head weight is `[classes, features]`, bias `[classes]`.
    pub head: LayerParams,
}

impl ParamSet {
    pub fn zeros(spec: &NetworkSpec) -> Result<Self> {
        let shapes = spec.block_shapes()?;
        let convs = spec
            .conv_blocks
            .iter()
            .zip(&shapes)
            .map(|(b, s)| LayerParams {
                weight: Tensor::zeros(&[b.out_channels, s.input[0], b.kernel_size, b.kernel_size]),
                bias: Tensor::zeros(&[b.out_channels]),
            })
            .collect();
        let f = spec.head_features()?;
        Ok(ParamSet {
            convs,
            head: LayerParams {
                weight: Tensor::zeros(&[spec.num_classes, f]),
                bias: Tensor::zeros(&[spec.num_classes]),
            },
        })
    }

    pub fn zeros_like(&self) -> Self {
        ParamSet {
            convs: self.convs.iter().map(LayerParams::zeros_like).collect(),
            head: self.head.zeros_like(),
        }
    }

    /// Stable names, e.g. `conv0.weight`, `head.bias`.
    pub fn names(&self) -> Vec<String> {
        let mut names = Vec::with_capacity(2 * self.convs.len() + 2);
        for i in 0..self.convs.len() {
            names.push(format!("conv{i}.weight"));
            names.push(format!("conv{i}.bias"));
        }
        names.push("head.weight".into());
        names.push("head.bias".into());
        names
    }

    pub fn tensors(&self) -> Vec<&Tensor> {
        let mut out: Vec<&Tensor> = Vec::with_capacity(2 * self.convs.len() + 2);
        for l in &self.convs {
            out.push(&l.weight);
            out.push(&l.bias);
        }
        out.push(&self.head.weight);
        out.push(&self.head.bias);
        out
    }

    pub fn tensors_mut(&mut self) -> Vec<&mut Tensor> {
        let mut out: Vec<&mut Tensor> = Vec::with_capacity(2 * self.convs.len() + 2);
        for l in &mut self.convs {
            out.push(&mut l.weight);
            out.push(&mut l.bias);
        }
        out.push(&mut self.head.weight);
        out.push(&mut self.head.bias);
        out
    }

    pub fn num_values(&self) -> usize {
        self.tensors().iter().map(|t| t.len()).sum()
    }

    /// Rebuilds a set from named tensors; every tensor must match `spec`.
    pub fn from_named(spec: &NetworkSpec, named: Vec<(String, Tensor)>) -> Result<Self> {
        let mut set = ParamSet::zeros(spec)?;
        let names = set.names();
        if named.len() != names.len() {
            return Err(Error::Input(format!(
                "expected {} parameter tensors, found {}",
                names.len(),
                named.len()
            )));
        }
        for (layer, ((name, t), slot)) in named.into_iter().zip(set.tensors_mut()).enumerate() {
            if name != names[layer] {
                return Err(Error::Input(format!(
                    "parameter {layer}: expected `{}`, found `{name}`",
                    names[layer]
                )));
            }
            if t.shape() != slot.shape() {
                return Err(Error::shape(
                    layer / 2,
                    format!("`{name}` has shape {:?}, expected {:?}", t.shape(), slot.shape()),
                ));
            }
            *slot = t;
        }
        Ok(set)
    }

    /// Errors unless every tensor has the shape `spec` implies.
    pub fn check(&self, spec: &NetworkSpec) -> Result<()> {
        let want = ParamSet::zeros(spec)?;
        if want.convs.len() != self.convs.len() {
            return Err(Error::shape(
                self.convs.len().min(want.convs.len()),
                format!("{} conv layers, spec has {}", self.convs.len(), want.convs.len()),
            ));
        }
        for (i, (a, b)) in self.tensors().iter().zip(want.tensors()).enumerate() {
            if a.shape() != b.shape() {
                return Err(Error::shape(
                    i / 2,
                    format!("parameter shape {:?}, expected {:?}", a.shape(), b.shape()),
                ));
            }
        }
        Ok(())
    }
}

/// Parameters plus their momentum buffers.
#[derive(Clone, Debug, PartialEq)]
pub struct NetworkParams {
    pub weights: ParamSet,
    pub momentum: ParamSet,
}

impl NetworkParams {
    /// Glorot-uniform weights in ±√(6/(fan_in+fan_out)), zero biases, zero momentum.
    pub fn init(spec: &NetworkSpec, seed: u64) -> Result<Self> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut weights = ParamSet::zeros(spec)?;
        for l in &mut weights.convs {
            let s = l.weight.shape().to_vec();
            let (cout, cin, k) = (s[0], s[1], s[2]);
            let bound = (6.0 / ((cin * k * k + cout * k * k) as f64)).sqrt();
            fill_uniform(&mut l.weight, bound, &mut rng);
        }
        let s = weights.head.weight.shape().to_vec();
        let bound = (6.0 / ((s[0] + s[1]) as f64)).sqrt();
        fill_uniform(&mut weights.head.weight, bound, &mut rng);
        Ok(Self::from_weights(weights))
    }

    /// Wraps weights with fresh zero momentum.
    pub fn from_weights(weights: ParamSet) -> Self {
        let momentum = weights.zeros_like();
        NetworkParams { weights, momentum }
    }

    pub fn reset_momentum(&mut self) {
        self.momentum = self.weights.zeros_like();
    }
}

fn fill_uniform(t: &mut Tensor, bound: f64, rng: &mut ChaCha8Rng) {
    for v in t.data_mut() {
        *v = rng.random_range(-bound..bound);
    }
}
