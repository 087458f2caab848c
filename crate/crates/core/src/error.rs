use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("{op}: shape mismatch between {lhs:?} and {rhs:?}")]
    ShapeMismatch {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },

    #[error("{op}: invalid shape {shape:?} ({reason})")]
    InvalidShape {
        op: &'static str,
        shape: Vec<usize>,
        reason: String,
    },

    #[error("{op}: operand contains NaN or infinite values")]
    NonFinite { op: &'static str },

    #[error("backward root must be a scalar, got shape {0:?}")]
    NonScalarRoot(Vec<usize>),

    #[error("backward root does not belong to this tape")]
    DetachedRoot,

    #[error("gradients already computed on this tape; call clear_grads() first")]
    BackwardTwice,

    #[error("label {label} appears {found} times, expected {expected}")]
    LabelCount {
        label: usize,
        found: usize,
        expected: usize,
    },

    #[error("dataset has {available} eligible classes, episode needs {needed}")]
    InsufficientClasses { available: usize, needed: usize },

    #[error("class {class} has {available} images, episode needs {needed}")]
    InsufficientImages {
        class: String,
        available: usize,
        needed: usize,
    },

    #[error("class in multiple splits: {0}")]
    ClassInMultipleSplits(String),

    #[error("image size mismatch in {path}: expected {expected:?}, found {found:?}")]
    ImageSizeMismatch {
        path: PathBuf,
        expected: (usize, usize, usize),
        found: (usize, usize, usize),
    },

    #[error("cannot read image {path}: {source}")]
    Image {
        path: PathBuf,
        #[source]
        source: image::ImageError,
    },

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("configuration error: {0}")]
    Config(String),

    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    #[error("missing gradient for parameter {0}")]
    MissingGradient(String),

    #[error("numerical abort: {0}")]
    NumericalAbort(String),

    #[error("loss identity violated: -log p = {nll}, distance form = {distance_form}")]
    LossIdentity { nll: f64, distance_form: f64 },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    /// True for failures caused by NaN or infinite values during a run.
    pub fn is_numerical(&self) -> bool {
        matches!(self, Error::NonFinite { .. } | Error::NumericalAbort(_) | Error::LossIdentity { .. })
    }

    pub(crate) fn shape(op: &'static str, lhs: &[usize], rhs: &[usize]) -> Self {
        Error::ShapeMismatch {
            op,
            lhs: lhs.to_vec(),
            rhs: rhs.to_vec(),
        }
    }

    pub(crate) fn invalid_shape(op: &'static str, shape: &[usize], reason: impl Into<String>) -> Self {
        Error::InvalidShape {
            op,
            shape: shape.to_vec(),
            reason: reason.into(),
        }
    }
}
