//! Identity and alignment losses.
//!
//! [`margin`] holds the multimodal angular-margin identity loss with analytic
//! gradients; [`alignment`] holds the default cross-modal alignment objective
//! behind the [`AlignmentLoss`] trait so other ranking losses can substitute.

pub mod alignment;
pub mod margin;

pub use alignment::{alignment_loss, AlignmentLoss, AlignmentOutput, SymmetricInfoNce};
pub use margin::{
    ma_id_backward, ma_id_forward, multimodal_ma_id, target_margin_cosine, MaIdGradients,
    MultimodalLoss,
};

use crate::error::{Error, Result};
use crate::scalar::{real, Real};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

/// Angular margin (radians) and logit scale of the identity classifier.
#[derive(Debug, Clone, Copy)]
pub struct MarginConfig<F> {
    pub margin: F,
    pub scale: F,
}

impl<F: Real> MarginConfig<F> {
    pub fn new(margin: F, scale: F) -> Result<Self> {
        if !(margin >= F::zero() && margin < F::FRAC_PI_2()) {
            return Err(Error::InvalidConfig(format!(
                "margin must lie in [0, pi/2), got {margin}"
            )));
        }
        if !(scale > F::zero()) {
            return Err(Error::InvalidConfig(format!(
                "scale must be positive, got {scale}"
            )));
        }
        Ok(Self { margin, scale })
    }
}

/// Shared classification weight matrix: one row per identity class.
///
/// Rows are kept unit-norm by the trainer after every update; the loss
/// normalizes internally as well so gradients are taken with respect to the
/// raw rows.
#[derive(Debug, Clone)]
pub struct ClassWeights<F> {
    rows: Vec<Vec<F>>,
    dim: usize,
}

impl<F: Real> ClassWeights<F> {
    pub fn from_rows(rows: Vec<Vec<F>>) -> Result<Self> {
        if rows.is_empty() {
            return Err(Error::EmptyInput("class weights"));
        }
        let dim = rows[0].len();
        for r in &rows {
            if r.len() != dim {
                return Err(Error::DimensionMismatch {
                    expected: dim,
                    got: r.len(),
                });
            }
        }
        Ok(Self { rows, dim })
    }

    /// Rows drawn uniformly on the unit sphere (normalized Gaussian), seeded.
    pub fn random_unit(classes: usize, dim: usize, seed: u64) -> Result<Self> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let rows = (0..classes)
            .map(|_| {
                let raw: Vec<F> = (0..dim)
                    .map(|_| real(<StandardNormal as Distribution<f64>>::sample(&StandardNormal, &mut rng)))
                    .collect();
                crate::embedding::l2_normalize(&raw)
            })
            .collect::<Result<Vec<_>>>()?;
        Self::from_rows(rows)
    }

    pub fn rows(&self) -> &[Vec<F>] {
        &self.rows
    }

    pub fn rows_mut(&mut self) -> &mut Vec<Vec<F>> {
        &mut self.rows
    }

    pub fn num_classes(&self) -> usize {
        self.rows.len()
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    /// Project every row back onto the unit sphere.
    pub fn renormalize(&mut self) -> Result<()> {
        for row in &mut self.rows {
            *row = crate::embedding::l2_normalize(row)?;
        }
        Ok(())
    }

    /// Max deviation of any row norm from 1.
    pub fn max_norm_error(&self) -> F {
        self.rows
            .iter()
            .map(|r| (crate::embedding::l2_norm(r) - F::one()).abs())
            .fold(F::zero(), F::max)
    }
}

/// Forward-pass output: batch-mean loss and the scaled logits.
#[derive(Debug, Clone)]
pub struct LossOutput<F> {
    pub loss: F,
    pub logits: Vec<Vec<F>>,
}

/// One-line JSON dump used in non-finite-loss diagnostics.
pub fn loss_debug_json<F: Real>(loss: F, grad_feature_norm: F, grad_weight_norm: F) -> String {
    serde_json::json!({
        "loss": loss.to_f64(),
        "grad_feature_norm": grad_feature_norm.to_f64(),
        "grad_weight_norm": grad_weight_norm.to_f64(),
    })
    .to_string()
}

/// Numerically stable `-log softmax(z)[target]` via max subtraction; logits
/// at scale 30 are routine here and naive exponentiation is unsafe in f32.
pub(crate) fn cross_entropy_row<F: Real>(logits: &[F], target: usize) -> F {
    let max = logits.iter().cloned().fold(F::neg_infinity(), F::max);
    let sum: F = logits.iter().map(|&z| (z - max).exp()).sum();
    max + sum.ln() - logits[target]
}

/// Softmax probabilities of one logits row, max-subtracted.
pub(crate) fn softmax_row<F: Real>(logits: &[F]) -> Vec<F> {
    let max = logits.iter().cloned().fold(F::neg_infinity(), F::max);
    let exps: Vec<F> = logits.iter().map(|&z| (z - max).exp()).collect();
    let sum: F = exps.iter().cloned().sum();
    exps.into_iter().map(|e| e / sum).collect()
}
