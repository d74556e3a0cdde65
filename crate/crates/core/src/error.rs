use std::path::PathBuf;

use vadet_tensor::TensorError;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error(transparent)]
    Tensor(#[from] TensorError),

    // scan
    #[error("scan shape mismatch: {0}")]
    ScanShape(String),
    #[error("discretization step must be positive (found {value} at step {step}, channel {channel})")]
    NonpositiveDelta { step: usize, channel: usize, value: f64 },

    // vector quantization
    #[error("code dimension mismatch: features have {features}, codebook has {codes}")]
    DimMismatch { features: usize, codes: usize },
    #[error("codebook is empty")]
    EmptyCodebook,

    // network
    #[error("extent {extent} is not divisible by {divisor}")]
    Indivisible { extent: usize, divisor: usize },
    #[error("patch merging needs even spatial extents, got {0}×{1}")]
    OddExtent(usize, usize),
    #[error("patch expanding needs an even channel count, got {0}")]
    OddChannels(usize),
    #[error("input does not match model config: {0}")]
    ConfigMismatch(String),

    // losses / scoring
    #[error("input of {height}×{width} is smaller than the required {min}×{min}")]
    TooSmall { height: usize, width: usize, min: usize },
    #[error("score series is empty")]
    EmptySeries,
    #[error("smoothing sigma must be positive, got {0}")]
    InvalidSigma(f64),
    #[error("length mismatch: {0} vs {1}")]
    LengthMismatch(usize, usize),
    #[error("clip {clip} is misaligned: {detail}")]
    Misalignment { clip: String, detail: String },
    #[error("malformed scores csv: {0}")]
    MalformedCsv(String),

    // synthetic video
    #[error("resolution {0}×{1} must be divisible by 32")]
    BadResolution(usize, usize),
    #[error("clip length {length} is too short for input length {input}")]
    TooShort { length: usize, input: usize },
    #[error("corrupt file {path}: {detail}")]
    CorruptFile { path: PathBuf, detail: String },
    #[error("missing {0}")]
    MissingComponent(PathBuf),

    // training
    #[error("dataset has no usable training windows")]
    EmptyDataset,
    #[error("checkpoint does not match model: {0}")]
    CheckpointMismatch(String),
    #[error("non-finite loss at step {0}")]
    NonFiniteLoss(usize),

    #[error("config: {0}")]
    Config(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
