use std::io;

use thiserror::Error;
use voxelfill_tensor::TensorError;

#[derive(Debug, Error)]
pub enum Error {
    #[error("volume contains non-finite voxels")]
    InvalidVolume,
    #[error("expected a {expected} volume, got {actual}")]
    RangeMismatch {
        expected: &'static str,
        actual: &'static str,
    },
    #[error("normalizer must be positive, got {0}")]
    DegenerateNormalizer(f64),
    #[error("mask selects no voxels")]
    EmptyMask,
    #[error("dimension mismatch: {0}")]
    DimMismatch(String),
    #[error("format error: {0}")]
    Format(String),
    #[error("truncated file: expected {expected} payload bytes, found {found}")]
    TruncatedFile { expected: usize, found: usize },
    #[error("window of {window} voxels does not fit dims {dims:?}")]
    WindowTooLarge { window: usize, dims: Vec<usize> },
    #[error("cannot aggregate an empty metric list")]
    EmptyReport,
    #[error("no admissible healthy mask after {0} attempts")]
    MaskGenFailure(usize),
    #[error("brain bounding box {bbox:?} exceeds patch dims {patch:?}")]
    BrainTooLarge { bbox: [usize; 3], patch: [usize; 3] },
    #[error("cannot split {items} scans into {folds} folds")]
    Split { items: usize, folds: usize },
    #[error("training diverged at epoch {epoch}: loss {loss}")]
    Divergence {
        epoch: usize,
        loss: f64,
        history: Vec<f64>,
    },
    #[error("checkpoint does not match configuration: {0}")]
    CorruptCheckpoint(String),
    #[error("configuration error: {0}")]
    Config(String),
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    Io(#[from] io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
