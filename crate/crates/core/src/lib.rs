//! Saliency-guided input masking with single-epoch finetuning for
//! mitigating spurious features, plus selective classification and
//! min-norm regression checks.

pub mod config;
pub mod container;
pub mod data;
pub mod error;
pub mod io;
pub mod linreg;
pub mod masking;
pub mod nn;
pub mod pipeline;
pub mod saliency;
pub mod selective;
pub mod tensor;
pub mod trainer;

pub use error::{Error, Result};
pub use tensor::Tensor;
