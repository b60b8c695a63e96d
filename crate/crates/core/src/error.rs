use std::path::PathBuf;

use thiserror::Error;

use crate::tensor::DType;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum TensorError {
    #[error("invalid shape {0:?}: extents must be non-empty and >= 1")]
    InvalidShape(Vec<usize>),
    #[error("buffer of length {len} does not fit shape {shape:?}")]
    LengthMismatch { shape: Vec<usize>, len: usize },
    #[error("cannot reshape {from:?} into {to:?}")]
    ReshapeMismatch { from: Vec<usize>, to: Vec<usize> },
    #[error("{op}: incompatible shapes {lhs:?} and {rhs:?}")]
    ShapeMismatch {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },
    #[error("axis {axis} out of range for rank {rank}")]
    AxisOutOfRange { axis: usize, rank: usize },
    #[error("slice {start}..{end} out of range for extent {extent}")]
    SliceOutOfRange {
        start: usize,
        end: usize,
        extent: usize,
    },
    #[error("concat of an empty list")]
    EmptyConcat,
    #[error("{op}: non-finite value produced")]
    NonFinite { op: &'static str },
    #[error("backward requires a scalar loss, got shape {0:?}")]
    NotScalar(Vec<usize>),
    #[error("tape is closed: backward already ran on this graph")]
    TapeClosed,
    #[error("variables belong to different tapes")]
    MixedTapes,
    #[error("loss is not recorded on a tape")]
    NotOnTape,
    #[error("{op}: {msg}")]
    InvalidArgument { op: &'static str, msg: String },
}

impl TensorError {
    pub(crate) fn invalid(op: &'static str, msg: impl Into<String>) -> Self {
        TensorError::InvalidArgument {
            op,
            msg: msg.into(),
        }
    }
}

#[derive(Debug, Error)]
pub enum ModelError {
    #[error("invalid model configuration: {0}")]
    InvalidConfig(String),
    #[error("input burst shape {got:?} does not match expected {expected}")]
    InputShape { got: Vec<usize>, expected: String },
    #[error(transparent)]
    Tensor(#[from] TensorError),
}

#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error("i/o error on {}: {source}", path.display())]
    Io {
        path: PathBuf,
        source: std::io::Error,
    },
    #[error("not a checkpoint file (bad magic)")]
    BadMagic,
    #[error("unsupported checkpoint version {found} (this build reads version {supported})")]
    Version { found: u32, supported: u32 },
    #[error("checkpoint is corrupt: {0}")]
    Corrupt(String),
    #[error("checksum mismatch: header says {expected}, payload hashes to {actual}")]
    Checksum { expected: String, actual: String },
    #[error("checkpoint dtype {found} does not match requested {requested}")]
    DType { found: DType, requested: DType },
    #[error("checkpoint parameter table does not match the model: {0}")]
    ParamMismatch(String),
    #[error(transparent)]
    Model(#[from] ModelError),
}

#[derive(Debug, Error)]
pub enum SimError {
    #[error("source image {got_h}x{got_w} is smaller than the required {need_h}x{need_w}")]
    SourceTooSmall {
        got_h: usize,
        got_w: usize,
        need_h: usize,
        need_w: usize,
    },
    #[error("invalid simulator argument: {0}")]
    InvalidArgument(String),
    #[error("values outside [0, 1] passed to {0}")]
    OutOfRange(&'static str),
    #[error("unknown gain label {0} (expected 1, 2, 4 or 8)")]
    InvalidGain(u32),
    #[error("{}: {source}", path.display())]
    Io {
        path: PathBuf,
        source: std::io::Error,
    },
    #[error("{}: {msg}", path.display())]
    Format { path: PathBuf, msg: String },
    #[error("{} is missing {}", dir.display(), missing.join(", "))]
    MissingFrames { dir: PathBuf, missing: Vec<String> },
    #[error(transparent)]
    Tensor(#[from] TensorError),
}

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("invalid training configuration: {0}")]
    InvalidConfig(String),
    #[error("non-finite loss at step {step}: {loss}")]
    NonFiniteLoss { step: u64, loss: f64 },
    #[error("non-finite gradient for parameter {0}")]
    NonFiniteGrad(String),
    #[error("step {t} is past the schedule horizon {horizon}")]
    ScheduleOverrun { t: u64, horizon: u64 },
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    Checkpoint(#[from] CheckpointError),
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
}

impl TrainError {
    /// True for failures caused by non-finite values rather than bad input.
    pub fn is_numerical(&self) -> bool {
        matches!(
            self,
            TrainError::NonFiniteLoss { .. }
                | TrainError::NonFiniteGrad(_)
                | TrainError::Tensor(TensorError::NonFinite { .. })
                | TrainError::Model(ModelError::Tensor(TensorError::NonFinite { .. }))
        )
    }
}

#[derive(Debug, Error, Clone, PartialEq)]
pub enum MetricError {
    #[error("images differ in shape: {0:?} vs {1:?}")]
    ShapeMismatch(Vec<usize>, Vec<usize>),
    #[error("image {h}x{w} is smaller than the {window}x{window} window")]
    TooSmall { h: usize, w: usize, window: usize },
    #[error("expected [H,W] or [C,H,W], got {0:?}")]
    Rank(Vec<usize>),
    #[error("no images to aggregate")]
    Empty,
}
