use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("row {0} has zero norm")]
    ZeroRow(usize),
    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimMismatch { expected: usize, got: usize },
    #[error("temperature must be positive, got {0}")]
    NonPositiveTemperature(f64),
    #[error("label index {index} out of range for {classes} classes")]
    LabelOutOfRange { index: usize, classes: usize },
    #[error("sample ids differ between matrices at row {row}")]
    IdMismatch { row: usize },
    #[error("duplicate id {0:?}")]
    DuplicateId(String),
    #[error("k = {k} outside valid range [{min}, {max}]")]
    KOutOfRange { k: usize, min: usize, max: usize },
    #[error("need at least {min} rows, got {got}")]
    TooFewRows { min: usize, got: usize },
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("no weight given for loss {0:?}")]
    MissingWeight(String),
    #[error("invalid config: {0}")]
    ConfigInvalid(String),

    #[error("no {style} description cached for {label:?}")]
    MissingDescription { label: String, style: String },
    #[error("client unavailable: {0}")]
    ClientUnavailable(String),
    #[error("client returned an empty generation for {0:?}")]
    EmptyGeneration(String),
    #[error("text encoder does not expose token-level input")]
    EncoderLacksTokenAccess,
    #[error("cache key already present: {0}")]
    CacheConflict(String),

    #[error("bad synthetic spec: {0}")]
    BadSpec(String),
    #[error("corrupt feature cache: {0}")]
    CacheCorrupt(String),
    #[error("unsupported cache format version {0}")]
    VersionUnsupported(u32),
    #[error("sample {0:?} not in cache")]
    MissingSample(String),
    #[error("text {0:?} not in cache")]
    MissingText(String),

    #[error("caption loss enabled but sample {0:?} has no caption")]
    MissingCaptions(String),
    #[error("non-finite {loss} loss at epoch {epoch}, step {step}")]
    DivergedLoss { loss: String, epoch: usize, step: usize },
    #[error("few-shot pool is empty")]
    EmptyFewshotPool,
    #[error("retrieval cache is empty")]
    EmptyCache,
    #[error("unknown split {0:?}")]
    UnknownSplit(String),
    #[error("label sets overlap: {0:?}")]
    OverlappingSplits(String),
    #[error("need at least 2 labels, got {0}")]
    TooFewLabels(usize),
    #[error("class {0:?} has no samples")]
    EmptyClass(String),
    #[error("unknown label {0:?}")]
    UnknownLabel(String),
    #[error("input missing: {}", .0.display())]
    InputMissing(PathBuf),

    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}
