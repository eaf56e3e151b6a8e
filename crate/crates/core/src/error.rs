use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

/// Broad failure class, used by front-ends to pick an exit status.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ErrorKind {
    Config,
    Data,
    BackboneUnavailable,
    Internal,
}

#[derive(Debug, Error)]
pub enum Error {
    #[error("mask has no foreground pixel")]
    EmptyMask,
    #[error("box {rmin},{cmin},{rmax},{cmax} does not fit a {height}x{width} grid")]
    BoxOutOfBounds {
        rmin: usize,
        cmin: usize,
        rmax: usize,
        cmax: usize,
        height: usize,
        width: usize,
    },
    #[error("segment width must be >= 1, got {0}")]
    InvalidWidth(usize),
    #[error("shape mismatch: expected {expected:?}, got {actual:?}")]
    ShapeMismatch { expected: Vec<usize>, actual: Vec<usize> },
    #[error("prompt module does not match backbone shape spec: {0}")]
    ShapeSpecMismatch(String),
    #[error("wrong input size: expected {expected:?}, got {actual:?}")]
    WrongInputSize {
        expected: (usize, usize),
        actual: (usize, usize),
    },
    #[error("backbone unavailable: {0}")]
    BackboneUnavailable(String),
    #[error("cache conflict for key {key}: stored fingerprint {stored:?}, offered {offered:?}")]
    CacheConflict {
        key: String,
        stored: String,
        offered: String,
    },
    #[error("no cached embedding for {0} and no backbone to compute it")]
    CacheMiss(String),
    #[error("empty input")]
    EmptyInput,
    #[error("k = {k} exceeds the train split size {available}")]
    KTooLarge { k: usize, available: usize },
    #[error("training set is empty")]
    EmptyTrainSet,
    #[error("epoch {epoch} out of range for {epochs} epochs")]
    EpochOutOfRange { epoch: usize, epochs: usize },
    #[error("sample {0} has no ground-truth mask")]
    MissingMask(String),
    #[error("nothing to aggregate")]
    EmptyList,
    #[error("invalid config: {0}")]
    InvalidConfig(String),
    #[error("invalid manifest: {0}")]
    InvalidManifest(String),
    #[error("bad file format in {path}: {reason}")]
    Format { path: PathBuf, reason: String },
    #[error("i/o failure on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("image codec failure on {path}: {reason}")]
    Image { path: PathBuf, reason: String },
    #[error("json: {0}")]
    Json(#[from] serde_json::Error),
    #[error("invariant violated: {0}")]
    Invariant(String),
}

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn shape(expected: &[usize], actual: &[usize]) -> Self {
        Error::ShapeMismatch {
            expected: expected.to_vec(),
            actual: actual.to_vec(),
        }
    }

    pub fn kind(&self) -> ErrorKind {
        match self {
            Error::InvalidWidth(_)
            | Error::ShapeSpecMismatch(_)
            | Error::KTooLarge { .. }
            | Error::EpochOutOfRange { .. }
            | Error::InvalidConfig(_) => ErrorKind::Config,
            Error::BackboneUnavailable(_) => ErrorKind::BackboneUnavailable,
            Error::Invariant(_) => ErrorKind::Internal,
            _ => ErrorKind::Data,
        }
    }
}
