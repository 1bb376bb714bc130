use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    /// A tensor or parameter shape disagrees with the network layout.
    #[error("shape mismatch at layer {layer}: {msg}")]
    Shape { layer: usize, msg: String },

    #[error("invalid input: {0}")]
    Input(String),

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("{}: bad magic at byte offset 0: expected {expected:#010x}, found {found:#010x}", file.display())]
    BadMagic { file: PathBuf, expected: u32, found: u32 },

    #[error("{}: truncated at byte offset {offset}: needed {needed} more bytes", file.display())]
    Truncated { file: PathBuf, offset: u64, needed: u64 },

    #[error("{}: malformed header at byte offset {offset}: {msg}", file.display())]
    Header { file: PathBuf, offset: u64, msg: String },

    #[error("sample count mismatch: {images} images in {}, {labels} labels in {}", images_file.display(), labels_file.display())]
    CountMismatch {
        images_file: PathBuf,
        labels_file: PathBuf,
        images: usize,
        labels: usize,
    },

    #[error("container: {msg} at byte offset {offset}")]
    Container { offset: u64, msg: String },

    #[error("loss diverged at epoch {epoch}, batch {batch} (loss = {loss})")]
    Diverged { epoch: usize, batch: usize, loss: f64 },

    #[error("numerical: {msg} (condition estimate {condition:.3e})")]
    Numerical { msg: String, condition: f64 },

    #[error("sample {index}: {source}")]
    Sample {
        index: usize,
        #[source]
        source: Box<Error>,
    },

    #[error("masking iteration {iteration}: {source}")]
    Iteration {
        iteration: usize,
        #[source]
        source: Box<Error>,
    },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn shape(layer: usize, msg: impl Into<String>) -> Self {
        Error::Shape {
            layer,
            msg: msg.into(),
        }
    }

    pub(crate) fn at_sample(self, index: usize) -> Self {
        Error::Sample {
            index,
            source: Box::new(self),
        }
    }

    pub(crate) fn at_iteration(self, iteration: usize) -> Self {
        Error::Iteration {
            iteration,
            source: Box::new(self),
        }
    }
}
