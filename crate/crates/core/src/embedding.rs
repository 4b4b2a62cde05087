//! Embedding records, paired datasets, cosine similarity, and top-K ranking.
//!
//! Everything downstream (curation, training, evaluation) is built on the
//! operations here. All of them are pure functions over immutable inputs;
//! [`similarity_matrix`] parallelizes over query rows but each entry is an
//! independent dot product, so the result is identical at any thread count.

use crate::error::{Error, Result};
use crate::scalar::{real, Real};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use std::collections::HashSet;

/// Norm threshold below which a vector is treated as zero.
pub const EPS_NORM: f64 = 1e-12;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Modality {
    Image,
    Text,
}

impl std::fmt::Display for Modality {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Modality::Image => write!(f, "image"),
            Modality::Text => write!(f, "text"),
        }
    }
}

/// One sample: identity label, source-dataset tag, modality, and its feature vector.
#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingRecord<F> {
    pub sample_id: u64,
    pub person_id: u32,
    pub source_id: u32,
    pub modality: Modality,
    pub vector: Vec<F>,
}

impl<F: Real> EmbeddingRecord<F> {
    /// True when every component is finite.
    pub fn is_finite(&self) -> bool {
        self.vector.iter().all(|x| x.is_finite())
    }

    /// Replace the feature vector with its unit-norm version.
    pub fn normalize(&mut self) -> Result<()> {
        self.vector = l2_normalize(&self.vector)?;
        Ok(())
    }
}

/// An aligned image/text pair sharing one identity label.
#[derive(Debug, Clone)]
pub struct Pair<F> {
    pub image: EmbeddingRecord<F>,
    pub text: EmbeddingRecord<F>,
    pub person_id: u32,
}

/// The unified dataset: a list of image/text pairs from one or more sources.
///
/// Each pair owns its image record; an image reused across several captions
/// appears once per pair under a distinct sample id, so the per-pair image
/// list is exactly the gallery a text query is ranked against.
#[derive(Debug, Clone)]
pub struct PairedDataset<F> {
    pairs: Vec<Pair<F>>,
    n_sources: usize,
    num_identities: usize,
}

impl<F: Real> PairedDataset<F> {
    /// Validates the pair invariants: matching identity labels, correct
    /// modality tags, finite vectors, and per-modality sample-id uniqueness.
    pub fn new(pairs: Vec<Pair<F>>) -> Result<Self> {
        let mut image_ids = HashSet::new();
        let mut text_ids = HashSet::new();
        for (i, pair) in pairs.iter().enumerate() {
            if pair.image.modality != Modality::Image {
                return Err(Error::InvalidPair {
                    pair: i,
                    detail: "image slot carries a non-image record".into(),
                });
            }
            if pair.text.modality != Modality::Text {
                return Err(Error::InvalidPair {
                    pair: i,
                    detail: "text slot carries a non-text record".into(),
                });
            }
            if pair.image.person_id != pair.person_id || pair.text.person_id != pair.person_id {
                return Err(Error::InvalidPair {
                    pair: i,
                    detail: "image/text person_id disagrees with pair label".into(),
                });
            }
            if !pair.image.is_finite() || !pair.text.is_finite() {
                return Err(Error::InvalidPair {
                    pair: i,
                    detail: "non-finite feature component".into(),
                });
            }
            if !image_ids.insert(pair.image.sample_id) {
                return Err(Error::InvalidPair {
                    pair: i,
                    detail: format!("duplicate image sample_id {}", pair.image.sample_id),
                });
            }
            if !text_ids.insert(pair.text.sample_id) {
                return Err(Error::InvalidPair {
                    pair: i,
                    detail: format!("duplicate text sample_id {}", pair.text.sample_id),
                });
            }
        }
        let sources: HashSet<u32> = pairs.iter().map(|p| p.image.source_id).collect();
        let identities: HashSet<u32> = pairs.iter().map(|p| p.person_id).collect();
        Ok(Self {
            n_sources: sources.len(),
            num_identities: identities.len(),
            pairs,
        })
    }

    pub fn pairs(&self) -> &[Pair<F>] {
        &self.pairs
    }

    pub fn len(&self) -> usize {
        self.pairs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pairs.is_empty()
    }

    pub fn n_sources(&self) -> usize {
        self.n_sources
    }

    pub fn num_identities(&self) -> usize {
        self.num_identities
    }

    /// Distinct source ids in ascending order.
    pub fn source_ids(&self) -> Vec<u32> {
        let mut ids: Vec<u32> = self
            .pairs
            .iter()
            .map(|p| p.image.source_id)
            .collect::<HashSet<_>>()
            .into_iter()
            .collect();
        ids.sort_unstable();
        ids
    }

    /// Keep exactly the pairs whose flag is set, preserving order.
    pub fn filter_by(&self, keep: &[bool]) -> Result<Self> {
        if keep.len() != self.pairs.len() {
            return Err(Error::LengthMismatch {
                left: keep.len(),
                right: self.pairs.len(),
            });
        }
        let pairs = self
            .pairs
            .iter()
            .zip(keep)
            .filter(|(_, &k)| k)
            .map(|(p, _)| p.clone())
            .collect();
        Self::new(pairs)
    }
}

/// Query-by-gallery score matrix, row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct SimilarityMatrix<F> {
    values: Vec<F>,
    rows: usize,
    cols: usize,
}

impl<F: Real> SimilarityMatrix<F> {
    pub fn from_values(rows: usize, cols: usize, values: Vec<F>) -> Result<Self> {
        if values.len() != rows * cols {
            return Err(Error::ShapeMismatch(format!(
                "expected {rows}x{cols}={} values, got {}",
                rows * cols,
                values.len()
            )));
        }
        if values.iter().any(|v| !v.is_finite()) {
            return Err(Error::ShapeMismatch("non-finite similarity entry".into()));
        }
        Ok(Self { values, rows, cols })
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn get(&self, row: usize, col: usize) -> F {
        self.values[row * self.cols + col]
    }

    pub fn row(&self, row: usize) -> &[F] {
        &self.values[row * self.cols..(row + 1) * self.cols]
    }

    pub fn values(&self) -> &[F] {
        &self.values
    }
}

/// Scale a vector to unit L2 norm.
///
/// Direction is preserved; the result has unit norm within 1e-9. Vectors with
/// norm at or below [`EPS_NORM`] are rejected rather than silently producing
/// NaN.
pub fn l2_normalize<F: Real>(v: &[F]) -> Result<Vec<F>> {
    let norm = l2_norm(v);
    if norm <= real(EPS_NORM) {
        return Err(Error::ZeroVector { eps: EPS_NORM });
    }
    Ok(v.iter().map(|&x| x / norm).collect())
}

/// L2 norm of a vector.
pub fn l2_norm<F: Real>(v: &[F]) -> F {
    v.iter().map(|&x| x * x).sum::<F>().sqrt()
}

/// Plain dot product; accumulation order is the element order, so two calls
/// on identical slices are bit-identical.
pub fn dot<F: Real>(a: &[F], b: &[F]) -> F {
    debug_assert_eq!(a.len(), b.len());
    a.iter().zip(b).map(|(&x, &y)| x * y).sum()
}

/// Cosine similarity of two unit vectors: the dot product, clamped to [-1, 1]
/// so downstream acos never sees an out-of-domain value.
pub fn cosine_similarity<F: Real>(a: &[F], b: &[F]) -> Result<F> {
    if a.len() != b.len() {
        return Err(Error::DimensionMismatch {
            expected: a.len(),
            got: b.len(),
        });
    }
    Ok(clamp_unit(dot(a, b)))
}

/// Clamp to [-1, 1].
#[inline]
pub fn clamp_unit<F: Real>(x: F) -> F {
    x.min(F::one()).max(-F::one())
}

/// Full query-by-gallery cosine similarity matrix.
///
/// Rows are computed in parallel; each entry is an independent dot product,
/// so the output equals the sequential computation bit for bit.
pub fn similarity_matrix<F: Real>(
    queries: &[Vec<F>],
    gallery: &[Vec<F>],
) -> Result<SimilarityMatrix<F>> {
    if queries.is_empty() {
        return Err(Error::EmptyInput("queries"));
    }
    if gallery.is_empty() {
        return Err(Error::EmptyInput("gallery"));
    }
    let dim = queries[0].len();
    for q in queries.iter().chain(gallery.iter()) {
        if q.len() != dim {
            return Err(Error::DimensionMismatch {
                expected: dim,
                got: q.len(),
            });
        }
    }
    let values: Vec<F> = queries
        .par_iter()
        .flat_map_iter(|q| gallery.iter().map(move |g| clamp_unit(dot(q, g))))
        .collect();
    SimilarityMatrix::from_values(queries.len(), gallery.len(), values)
}

/// Indices of the k largest scores, in descending score order.
///
/// Ties are broken toward the smaller index so rankings are deterministic
/// across runs and platforms.
pub fn top_k_indices<F: Real>(scores: &[F], k: usize) -> Result<Vec<usize>> {
    if k > scores.len() {
        return Err(Error::KTooLarge {
            k,
            len: scores.len(),
        });
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_unstable_by(|&i, &j| {
        scores[j]
            .partial_cmp(&scores[i])
            .expect("scores must be finite")
            .then(i.cmp(&j))
    });
    order.truncate(k);
    Ok(order)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn record(sample_id: u64, person_id: u32, modality: Modality) -> EmbeddingRecord<f64> {
        EmbeddingRecord {
            sample_id,
            person_id,
            source_id: 0,
            modality,
            vector: vec![1.0, 0.0],
        }
    }

    #[test]
    fn normalize_three_four_five() {
        let v = l2_normalize(&[3.0f64, 4.0]).unwrap();
        assert_eq!(v, vec![0.6, 0.8]);
    }

    #[test]
    fn normalize_unit_vector_unchanged() {
        let u = vec![0.6f64, 0.8];
        let n = l2_normalize(&u).unwrap();
        for (a, b) in n.iter().zip(&u) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn normalize_zero_vector_fails() {
        assert!(matches!(
            l2_normalize(&[0.0f64, 0.0]),
            Err(Error::ZeroVector { .. })
        ));
    }

    #[test]
    fn normalize_idempotent() {
        let v = vec![0.3f32, -2.0, 1.5];
        let once = l2_normalize(&v).unwrap();
        let twice = l2_normalize(&once).unwrap();
        for (a, b) in once.iter().zip(&twice) {
            assert!((a - b).abs() < 1e-6);
        }
    }

    #[test]
    fn cosine_basic_identities() {
        let a = vec![1.0f64, 0.0];
        let b = vec![0.0f64, 1.0];
        let neg = vec![-1.0f64, 0.0];
        assert_eq!(cosine_similarity(&a, &a).unwrap(), 1.0);
        assert_eq!(cosine_similarity(&a, &b).unwrap(), 0.0);
        assert_eq!(cosine_similarity(&a, &neg).unwrap(), -1.0);
    }

    #[test]
    fn cosine_dimension_mismatch() {
        assert!(matches!(
            cosine_similarity(&[1.0f64], &[1.0, 0.0]),
            Err(Error::DimensionMismatch { .. })
        ));
    }

    #[test]
    fn similarity_matrix_orthonormal_basis_is_identity() {
        let basis = vec![
            vec![1.0f64, 0.0, 0.0],
            vec![0.0, 1.0, 0.0],
            vec![0.0, 0.0, 1.0],
        ];
        let m = similarity_matrix(&basis, &basis).unwrap();
        for i in 0..3 {
            for j in 0..3 {
                let expected = if i == j { 1.0 } else { 0.0 };
                assert_eq!(m.get(i, j), expected);
            }
        }
    }

    #[test]
    fn similarity_matrix_single_identical_vector() {
        let v = vec![vec![0.6f64, 0.8]];
        let m = similarity_matrix(&v, &v).unwrap();
        assert_eq!(m.rows(), 1);
        assert_eq!(m.cols(), 1);
        assert!((m.get(0, 0) - 1.0).abs() < 1e-15);
    }

    #[test]
    fn similarity_matrix_rejects_empty() {
        let v = vec![vec![1.0f64]];
        assert!(matches!(
            similarity_matrix::<f64>(&[], &v),
            Err(Error::EmptyInput(_))
        ));
        assert!(matches!(
            similarity_matrix::<f64>(&v, &[]),
            Err(Error::EmptyInput(_))
        ));
    }

    #[test]
    fn top_k_basic() {
        assert_eq!(top_k_indices(&[0.1f64, 0.9, 0.5], 2).unwrap(), vec![1, 2]);
    }

    #[test]
    fn top_k_tie_breaks_to_smaller_index() {
        assert_eq!(top_k_indices(&[0.7f64, 0.7, 0.2], 1).unwrap(), vec![0]);
    }

    #[test]
    fn top_k_too_large() {
        assert!(matches!(
            top_k_indices(&[1.0f64], 2),
            Err(Error::KTooLarge { .. })
        ));
    }

    #[test]
    fn dataset_rejects_mismatched_person_id() {
        let img = record(0, 1, Modality::Image);
        let txt = record(0, 2, Modality::Text);
        let err = PairedDataset::new(vec![Pair {
            image: img,
            text: txt,
            person_id: 1,
        }]);
        assert!(matches!(err, Err(Error::InvalidPair { .. })));
    }

    #[test]
    fn dataset_rejects_duplicate_image_ids() {
        let mk = |sid| Pair {
            image: record(sid, 1, Modality::Image),
            text: record(sid, 1, Modality::Text),
            person_id: 1,
        };
        let mut p2 = mk(1);
        p2.image.sample_id = 0; // collides with pair 0's image
        let err = PairedDataset::new(vec![mk(0), p2]);
        assert!(matches!(err, Err(Error::InvalidPair { .. })));
    }

    #[test]
    fn dataset_counts_sources_and_identities() {
        let mut pairs = Vec::new();
        for i in 0..4u64 {
            let mut img = record(i, (i % 2) as u32, Modality::Image);
            let mut txt = record(i, (i % 2) as u32, Modality::Text);
            img.source_id = (i / 2) as u32;
            txt.source_id = (i / 2) as u32;
            pairs.push(Pair {
                image: img,
                text: txt,
                person_id: (i % 2) as u32,
            });
        }
        let ds = PairedDataset::new(pairs).unwrap();
        assert_eq!(ds.n_sources(), 2);
        assert_eq!(ds.num_identities(), 2);
        assert_eq!(ds.source_ids(), vec![0, 1]);
    }
}
