//! Cross-modal retrieval toolkit.
//!
//! The crate covers the full desk-scale pipeline for unified multi-source
//! retrieval training: a seeded synthetic paired-dataset generator with
//! planted ground truth, ensemble top-K consensus curation of noisy pairs,
//! an angular-margin identity loss with analytic gradients and a pluggable
//! cross-modal alignment loss, a small deterministic trainer, test-time
//! nearest-neighbor score normalization, and a Rank-k / mAP evaluation
//! protocol.
//!
//! All numeric kernels are generic over [`scalar::Real`] (f32 or f64); the
//! type aliases at the crate root pin the default scalar used by the CLI and
//! the acceptance paths.

pub mod curation;
pub mod datagen;
pub mod embedding;
pub mod error;
pub mod eval;
pub mod io;
pub mod loss;
pub mod nnn;
pub mod pca;
pub mod scalar;
pub mod train;

pub use embedding::{EmbeddingRecord, Modality, Pair, PairedDataset, SimilarityMatrix};
pub use error::{Error, Result};
pub use scalar::Real;

/// Default scalar: similarity and gradient math runs in f64 throughout.
pub type Scalar = f64;

/// Crate-default aliases pinned to [`Scalar`].
pub type Record = EmbeddingRecord<Scalar>;
pub type Dataset = PairedDataset<Scalar>;
pub type Scores = SimilarityMatrix<Scalar>;

/// Version of the embedding manifest/blob layout.
pub const MANIFEST_FORMAT_VERSION: u32 = 1;
/// Version of the checkpoint layout.
pub const CHECKPOINT_FORMAT_VERSION: u32 = 1;
