use serde::{Deserialize, Serialize};

use super::params::{NetworkParams, ParamSet};
use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Hyperparams {
    pub learning_rate: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub lr_decay_factor: f64,
    /// Epochs per decay step.
    pub lr_decay_every: usize,
    pub seed: u64,
}

impl Default for Hyperparams {
    /// Biased-MNIST training recipe: SGD(0.01, momentum 0.9, wd 1e-4),
    /// batch 128, 100 epochs, lr halved every 25 epochs.
    fn default() -> Self {
        Hyperparams {
            learning_rate: 0.01,
            momentum: 0.9,
            weight_decay: 1e-4,
            batch_size: 128,
            epochs: 100,
            lr_decay_factor: 0.5,
            lr_decay_every: 25,
            seed: 0,
        }
    }
}

impl Hyperparams {
    /// Reduced CI profile: 20 epochs with the lr halved every 5, so the final
    /// learning rate matches the full schedule.
    pub fn desk_scale() -> Self {
        Hyperparams {
            epochs: 20,
            lr_decay_every: 5,
            ..Self::default()
        }
    }

    /// Every violated field, reported together.
    pub fn violations(&self) -> Vec<String> {
        let mut v = Vec::new();
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            v.push(format!("learning_rate must be positive, got {}", self.learning_rate));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            v.push(format!("momentum must be in [0, 1), got {}", self.momentum));
        }
        if !(self.weight_decay >= 0.0 && self.weight_decay.is_finite()) {
            v.push(format!("weight_decay must be nonnegative, got {}", self.weight_decay));
        }
        if self.batch_size == 0 {
            v.push("batch_size must be positive".into());
        }
        if self.epochs == 0 {
            v.push("epochs must be positive".into());
        }
        if !(self.lr_decay_factor > 0.0 && self.lr_decay_factor <= 1.0) {
            v.push(format!("lr_decay_factor must be in (0, 1], got {}", self.lr_decay_factor));
        }
        if self.lr_decay_every == 0 {
            v.push("lr_decay_every must be positive".into());
        }
        v
    }

    pub fn validate(&self) -> Result<()> {
        let v = self.violations();
        if v.is_empty() {
            Ok(())
        } else {
            Err(Error::Config(v.join("; ")))
        }
    }
}

/// Step decay: `lr · factor^⌊epoch / every⌋`.
pub fn lr_at_epoch(hyper: &Hyperparams, epoch: usize) -> f64 {
    let steps = (epoch / hyper.lr_decay_every) as i32;
    hyper.learning_rate * hyper.lr_decay_factor.powi(steps)
}

/// `v ← μ·v + g + λ·θ;  θ ← θ − lr·v`, applied to every tensor.
pub fn sgd_step(params: &mut NetworkParams, grads: &ParamSet, lr: f64, momentum: f64, weight_decay: f64) -> Result<()> {
    let NetworkParams { weights, momentum: buffers } = params;
    let ws = weights.tensors_mut();
    let vs = buffers.tensors_mut();
    let gs = grads.tensors();
    if ws.len() != gs.len() || vs.len() != gs.len() {
        return Err(Error::shape(0, "gradient set does not match parameters"));
    }
    for (i, ((w, v), g)) in ws.into_iter().zip(vs).zip(gs).enumerate() {
        if w.shape() != g.shape() || v.shape() != g.shape() {
            return Err(Error::shape(
                i / 2,
                format!("gradient shape {:?} vs parameter {:?}", g.shape(), w.shape()),
            ));
        }
        for ((p, b), &d) in w.data_mut().iter_mut().zip(v.data_mut()).zip(g.data()) {
            *b = momentum * *b + d + weight_decay * *p;
            *p -= lr * *b;
        }
    }
    Ok(())
}
