use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("unknown corruption `{0}`")]
    UnknownCorruption(String),
    #[error("severity {0} outside 1..=5")]
    InvalidSeverity(u8),
    #[error("corruption pool is empty")]
    EmptyPool,
    #[error("invalid image: {0}")]
    InvalidImage(String),
    #[error("annotation schema error: {0}")]
    Schema(String),
    #[error("label space mismatch: expected {expected:?}, found {found:?}")]
    LabelSpaceMismatch { expected: Vec<String>, found: Vec<String> },
    #[error("missing image {0}")]
    MissingImage(PathBuf),
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("row {row} is not a probability distribution (sum {sum})")]
    NotADistribution { row: usize, sum: f64 },
    #[error("empty batch")]
    EmptyBatch,
    #[error("negative loss weight {0}")]
    NegativeWeight(f64),
    #[error("non-finite loss at iteration {iteration} (images {image_ids:?})")]
    NaNLoss { iteration: usize, image_ids: Vec<String> },
    #[error("degenerate box {0:?}")]
    DegenerateBox([f64; 4]),
    #[error("no detections to evaluate")]
    EmptyDetections,
    #[error("no detections to fit a temperature on")]
    NoDetections,
    #[error("checkpoint error: {0}")]
    Checkpoint(String),
    #[error("config error: {0}")]
    Config(String),
    #[error("io error at {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("image codec error: {0}")]
    Codec(#[from] image::ImageError),
    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

impl Error {
    /// Stable machine-readable tag, used by the CLI's one-line error output.
    pub fn kind(&self) -> &'static str {
        match self {
            Error::UnknownCorruption(_) => "UnknownCorruption",
            Error::InvalidSeverity(_) => "InvalidSeverity",
            Error::EmptyPool => "EmptyPool",
            Error::InvalidImage(_) => "InvalidImage",
            Error::Schema(_) => "SchemaError",
            Error::LabelSpaceMismatch { .. } => "LabelSpaceMismatch",
            Error::MissingImage(_) => "MissingImage",
            Error::ShapeMismatch(_) => "ShapeMismatch",
            Error::NotADistribution { .. } => "NotADistribution",
            Error::EmptyBatch => "EmptyBatch",
            Error::NegativeWeight(_) => "NegativeWeight",
            Error::NaNLoss { .. } => "NaNLoss",
            Error::DegenerateBox(_) => "DegenerateBox",
            Error::EmptyDetections => "EmptyDetections",
            Error::NoDetections => "NoDetections",
            Error::Checkpoint(_) => "CheckpointError",
            Error::Config(_) => "ConfigError",
            Error::Io { .. } => "IOError",
            Error::Codec(_) => "IOError",
            Error::Json(_) => "SchemaError",
        }
    }

    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io { path: path.into(), source }
    }
}
