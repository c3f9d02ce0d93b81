use std::path::PathBuf;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch: expected {expected}, got {actual}")]
    ShapeMismatch { expected: String, actual: String },

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("value out of range: {0}")]
    OutOfRange(String),

    #[error("image {width}x{height} is smaller than the {window}x{window} window")]
    TooSmall {
        width: usize,
        height: usize,
        window: usize,
    },

    #[error("no such file: {}", .0.display())]
    MissingFile(PathBuf),

    #[error("unsupported image format: {0}")]
    UnsupportedFormat(String),

    #[error("dataset: {0}")]
    Dataset(String),

    #[error("checkpoint: {0}")]
    Checkpoint(String),

    #[error("network: {0}")]
    Network(String),

    #[error("training diverged at iteration {iteration}: loss = {loss}")]
    Diverged { iteration: u64, loss: f64 },

    #[error("config: {0}")]
    Config(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Image(#[from] image::ImageError),

    #[error(transparent)]
    Csv(#[from] csv::Error),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

pub(crate) fn shape_mismatch(expected: impl ToString, actual: impl ToString) -> Error {
    Error::ShapeMismatch {
        expected: expected.to_string(),
        actual: actual.to_string(),
    }
}
