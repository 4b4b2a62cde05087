//! Test-time nearest-neighbor score normalization.
//!
//! Each gallery image gets a bias: alpha times the mean of its kappa highest
//! similarities over a reference query set. Subtracting the bias from every
//! raw score shifts whole columns, leaving within-column order untouched
//! while demoting images that sit close to many queries at once.

use crate::embedding::{dot, SimilarityMatrix};
use crate::error::{Error, Result};
use crate::scalar::{real, Real};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

/// Bias scale and neighbor count for normalization.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct NnnConfig {
    pub alpha: f64,
    pub kappa: usize,
}

impl NnnConfig {
    pub fn new(alpha: f64, kappa: usize) -> Result<Self> {
        if !(alpha >= 0.0) {
            return Err(Error::InvalidConfig(format!(
                "alpha must be nonnegative, got {alpha}"
            )));
        }
        if kappa == 0 {
            return Err(Error::InvalidConfig("kappa must be at least 1".into()));
        }
        Ok(Self { alpha, kappa })
    }
}

impl Default for NnnConfig {
    /// alpha = 0.75, kappa = 16; used as-is, not tuned per experiment.
    fn default() -> Self {
        Self {
            alpha: 0.75,
            kappa: 16,
        }
    }
}

/// Per-gallery-image bias b(I).
#[derive(Debug, Clone)]
pub struct BiasVector<F> {
    values: Vec<F>,
}

impl<F: Real> BiasVector<F> {
    pub fn values(&self) -> &[F] {
        &self.values
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }
}

/// Bias per gallery image: alpha * mean of the kappa largest similarities to
/// the reference queries. The current query is never excluded, keeping the
/// bias query-independent. Top-kappa selection breaks ties by index, though
/// the sum is order-free.
pub fn compute_bias<F: Real>(
    gallery: &[Vec<F>],
    reference_queries: &[Vec<F>],
    cfg: &NnnConfig,
) -> Result<BiasVector<F>> {
    if gallery.is_empty() {
        return Err(Error::EmptyGallery);
    }
    if cfg.kappa > reference_queries.len() {
        return Err(Error::KappaTooLarge {
            kappa: cfg.kappa,
            refs: reference_queries.len(),
        });
    }
    let alpha = real::<F>(cfg.alpha);
    let inv_kappa = F::one() / real::<F>(cfg.kappa as f64);
    let values: Vec<F> = gallery
        .par_iter()
        .map(|g| {
            let sims: Vec<F> = reference_queries.iter().map(|q| dot(q, g)).collect();
            let top = crate::embedding::top_k_indices(&sims, cfg.kappa)
                .expect("kappa bounded by reference count");
            let sum: F = top.iter().map(|&i| sims[i]).sum();
            alpha * inv_kappa * sum
        })
        .collect();
    Ok(BiasVector { values })
}

/// Subtract the per-column bias from every entry of the raw score matrix.
pub fn normalize_scores<F: Real>(
    raw: &SimilarityMatrix<F>,
    bias: &BiasVector<F>,
) -> Result<SimilarityMatrix<F>> {
    if bias.len() != raw.cols() {
        return Err(Error::LengthMismatch {
            left: bias.len(),
            right: raw.cols(),
        });
    }
    let cols = raw.cols();
    let values = raw
        .values()
        .iter()
        .enumerate()
        .map(|(idx, &v)| v - bias.values[idx % cols])
        .collect();
    SimilarityMatrix::from_values(raw.rows(), cols, values)
}
