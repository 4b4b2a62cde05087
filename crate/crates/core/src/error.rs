//! Crate-wide error type.

use crate::embedding::Modality;
use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("cannot normalize a vector with norm <= {eps:e}")]
    ZeroVector { eps: f64 },

    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },

    #[error("empty input: {0}")]
    EmptyInput(&'static str),

    #[error("k={k} exceeds available length {len}")]
    KTooLarge { k: usize, len: usize },

    #[error("index {index} out of range for length {len}")]
    IndexOutOfRange { index: usize, len: usize },

    #[error("expert {expert_id} has no {modality} embedding for sample {sample_id}")]
    MissingEmbedding {
        expert_id: u32,
        modality: Modality,
        sample_id: u64,
    },

    #[error("length mismatch: {left} vs {right}")]
    LengthMismatch { left: usize, right: usize },

    #[error("label {label} out of range for {classes} classes")]
    LabelOutOfRange { label: usize, classes: usize },

    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),

    #[error("insufficient samples: {0}")]
    InsufficientSamples(&'static str),

    #[error("degenerate rank: {0}")]
    DegenerateRank(&'static str),

    #[error("kappa={kappa} exceeds reference query count {refs}")]
    KappaTooLarge { kappa: usize, refs: usize },

    #[error("empty gallery")]
    EmptyGallery,

    #[error("query {query} has no relevant gallery items")]
    NoRelevantItems { query: usize },

    #[error("dataset contains a single identity; training needs at least two")]
    SingleIdentityDataset,

    #[error("non-finite loss at epoch {epoch}, batch {batch}: {dump}")]
    NonFiniteLoss {
        epoch: usize,
        batch: usize,
        dump: String,
    },

    #[error("invalid generator spec: {0}")]
    SpecInvalid(String),

    #[error("invalid config: {0}")]
    InvalidConfig(String),

    #[error("pair {pair}: {detail}")]
    InvalidPair { pair: usize, detail: String },

    #[error("malformed file {path}: {detail}")]
    MalformedFile { path: String, detail: String },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}
