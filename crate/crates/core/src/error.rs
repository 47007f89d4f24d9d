use std::path::PathBuf;

use sllen_tensor::TensorError;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("file not found: {0}")]
    FileNotFound(PathBuf),
    #[error("unsupported image format: {0}")]
    UnsupportedFormat(PathBuf),
    #[error("corrupt image {path}: {msg}")]
    CorruptImage { path: PathBuf, msg: String },
    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("degenerate shape {0:?}: need at least 2x2 pixels")]
    DegenerateShape(Vec<usize>),
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("length mismatch: {0} encoder embeddings vs {1} decoder embeddings")]
    LengthMismatch(usize, usize),
    #[error("shape error: {0}")]
    Shape(String),
    #[error("empty dataset: {0}")]
    EmptyDataset(String),
    #[error("invalid parameter: {0}")]
    InvalidParam(String),
    #[error("patch {patch} larger than image {id} ({height}x{width})")]
    PatchLargerThanImage {
        patch: usize,
        id: String,
        height: usize,
        width: usize,
    },
    #[error("attention over {tokens} tokens exceeds the cap of {cap}")]
    TokenBudgetExceeded { tokens: usize, cap: usize },
    #[error("weight file error: {0}")]
    WeightLoad(String),
    #[error("configuration error: {0}")]
    Config(String),
    #[error("image too small for SSIM: {height}x{width} (need at least 11x11)")]
    ImageTooSmall { height: usize, width: usize },
    #[error("label {label} out of range for {num_classes} classes")]
    LabelOutOfRange { label: u32, num_classes: usize },
    #[error("batch has no reference images; supervised training needs them")]
    NoReference,
    #[error("non-finite loss term {term} = {value} at step {step}")]
    NonFiniteLoss {
        term: &'static str,
        value: f64,
        step: usize,
    },
    #[error(transparent)]
    Tensor(#[from] TensorError),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
