//! Small deterministic CNN engine: conv/ReLU/max-pool blocks, a linear head,
//! softmax cross-entropy, reverse-mode gradients and momentum SGD.

mod kernels;
mod loss;
mod network;
mod optim;
mod params;
mod spec;

pub use loss::{argmax, cross_entropy, softmax, softmax_rows};
pub use network::{feature_gradients, forward, gradients, logits, FeatureGradients, Forward, Gradients, LogitTarget};
pub use optim::{lr_at_epoch, sgd_step, Hyperparams};
pub use params::{LayerParams, NetworkParams, ParamSet};
pub use spec::{BlockShapes, ConvBlock, HeadPool, NetworkSpec};
