//! Cross-modal alignment objective.
//!
//! The default is a symmetric in-batch cross-entropy over cosine similarities
//! at a fixed temperature, with every same-identity pair counted as a
//! positive. It sits behind [`AlignmentLoss`] so a different ranking loss can
//! be swapped in without touching the trainer.

use crate::embedding::{dot, l2_norm, l2_normalize};
use crate::error::{Error, Result};
use crate::scalar::{real, Real};

/// Loss value and gradients with respect to the raw feature rows.
#[derive(Debug, Clone)]
pub struct AlignmentOutput<F> {
    pub loss: F,
    pub grad_image_features: Vec<Vec<F>>,
    pub grad_text_features: Vec<Vec<F>>,
    /// Set when the batch carries fewer than two distinct identities; the
    /// loss is still defined but carries no contrastive signal.
    pub single_identity: bool,
}

/// A batch-level cross-modal ranking objective with analytic gradients.
pub trait AlignmentLoss<F: Real> {
    fn compute(
        &self,
        image_features: &[Vec<F>],
        text_features: &[Vec<F>],
        labels: &[usize],
    ) -> Result<AlignmentOutput<F>>;
}

/// Symmetric in-batch cross-modal cross-entropy at a fixed temperature.
#[derive(Debug, Clone, Copy)]
pub struct SymmetricInfoNce<F> {
    pub temperature: F,
}

impl<F: Real> SymmetricInfoNce<F> {
    pub fn new(temperature: F) -> Result<Self> {
        if !(temperature > F::zero()) {
            return Err(Error::InvalidConfig(format!(
                "temperature must be positive, got {temperature}"
            )));
        }
        Ok(Self { temperature })
    }
}

impl<F: Real> AlignmentLoss<F> for SymmetricInfoNce<F> {
    fn compute(
        &self,
        image_features: &[Vec<F>],
        text_features: &[Vec<F>],
        labels: &[usize],
    ) -> Result<AlignmentOutput<F>> {
        alignment_loss(image_features, text_features, labels, self.temperature)
    }
}

/// Symmetric cross-modal cross-entropy with identity-aware positives.
///
/// For each image row the positives are all texts with the same label and
/// vice versa; both directions are averaged. Gradients chain through the
/// internal L2 normalization, so they are with respect to the raw rows.
pub fn alignment_loss<F: Real>(
    image_features: &[Vec<F>],
    text_features: &[Vec<F>],
    labels: &[usize],
    temperature: F,
) -> Result<AlignmentOutput<F>> {
    let batch = image_features.len();
    if batch == 0 {
        return Err(Error::ShapeMismatch("empty feature batch".into()));
    }
    if text_features.len() != batch || labels.len() != batch {
        return Err(Error::LengthMismatch {
            left: batch,
            right: text_features.len().min(labels.len()),
        });
    }
    if !(temperature > F::zero()) {
        return Err(Error::InvalidConfig(format!(
            "temperature must be positive, got {temperature}"
        )));
    }
    let dim = image_features[0].len();
    for f in image_features.iter().chain(text_features.iter()) {
        if f.len() != dim {
            return Err(Error::DimensionMismatch {
                expected: dim,
                got: f.len(),
            });
        }
    }

    let mut distinct = labels.to_vec();
    distinct.sort_unstable();
    distinct.dedup();
    let single_identity = distinct.len() < 2;

    let image_norms: Vec<F> = image_features.iter().map(|f| l2_norm(f)).collect();
    let text_norms: Vec<F> = text_features.iter().map(|f| l2_norm(f)).collect();
    let unit_images = image_features
        .iter()
        .map(|f| l2_normalize(f))
        .collect::<Result<Vec<_>>>()?;
    let unit_texts = text_features
        .iter()
        .map(|f| l2_normalize(f))
        .collect::<Result<Vec<_>>>()?;

    // Scaled similarity logits M[i][j] = (v_i . t_j) / temperature.
    let logits: Vec<Vec<F>> = unit_images
        .iter()
        .map(|v| unit_texts.iter().map(|t| dot(v, t) / temperature).collect())
        .collect();

    // Positive masks share the label structure in both directions.
    let positive_count: Vec<usize> = labels
        .iter()
        .map(|&a| labels.iter().filter(|&&b| b == a).count())
        .collect();

    let inv_batch = F::one() / real::<F>(batch as f64);
    let half = real::<F>(0.5);

    // Image-to-text direction: softmax over each row.
    let mut loss_i2t = F::zero();
    let mut row_probs = Vec::with_capacity(batch);
    for i in 0..batch {
        let probs = super::softmax_row(&logits[i]);
        let lse = log_sum_exp(&logits[i]);
        let inv_pos = F::one() / real::<F>(positive_count[i] as f64);
        let mut pos_term = F::zero();
        for j in 0..batch {
            if labels[j] == labels[i] {
                pos_term += logits[i][j];
            }
        }
        loss_i2t += lse - inv_pos * pos_term;
        row_probs.push(probs);
    }
    loss_i2t *= inv_batch;

    // Text-to-image direction: softmax over each column.
    let mut loss_t2i = F::zero();
    let mut col_probs = vec![vec![F::zero(); batch]; batch];
    for j in 0..batch {
        let column: Vec<F> = (0..batch).map(|i| logits[i][j]).collect();
        let probs = super::softmax_row(&column);
        let lse = log_sum_exp(&column);
        let inv_pos = F::one() / real::<F>(positive_count[j] as f64);
        let mut pos_term = F::zero();
        for i in 0..batch {
            col_probs[i][j] = probs[i];
            if labels[i] == labels[j] {
                pos_term += logits[i][j];
            }
        }
        loss_t2i += lse - inv_pos * pos_term;
    }
    loss_t2i *= inv_batch;

    let loss = (loss_i2t + loss_t2i) * half;

    // dL/dM[i][j], combining both directions.
    let mut logit_grads = vec![vec![F::zero(); batch]; batch];
    for i in 0..batch {
        for j in 0..batch {
            let same = labels[i] == labels[j];
            let w_row = if same {
                F::one() / real::<F>(positive_count[i] as f64)
            } else {
                F::zero()
            };
            let w_col = if same {
                F::one() / real::<F>(positive_count[j] as f64)
            } else {
                F::zero()
            };
            let g_row = row_probs[i][j] - w_row;
            let g_col = col_probs[i][j] - w_col;
            logit_grads[i][j] = half * inv_batch * (g_row + g_col);
        }
    }

    // Back through the scaled dot products and the normalization.
    let mut grad_images = vec![vec![F::zero(); dim]; batch];
    let mut grad_texts = vec![vec![F::zero(); dim]; batch];
    for i in 0..batch {
        let mut u = vec![F::zero(); dim];
        for j in 0..batch {
            let g = logit_grads[i][j] / temperature;
            for (uk, tk) in u.iter_mut().zip(&unit_texts[j]) {
                *uk += g * *tk;
            }
        }
        let n = &unit_images[i];
        let along = dot(&u, n);
        for k in 0..dim {
            grad_images[i][k] = (u[k] - along * n[k]) / image_norms[i];
        }
    }
    for j in 0..batch {
        let mut u = vec![F::zero(); dim];
        for i in 0..batch {
            let g = logit_grads[i][j] / temperature;
            for (uk, vk) in u.iter_mut().zip(&unit_images[i]) {
                *uk += g * *vk;
            }
        }
        let n = &unit_texts[j];
        let along = dot(&u, n);
        for k in 0..dim {
            grad_texts[j][k] = (u[k] - along * n[k]) / text_norms[j];
        }
    }

    Ok(AlignmentOutput {
        loss,
        grad_image_features: grad_images,
        grad_text_features: grad_texts,
        single_identity,
    })
}

fn log_sum_exp<F: Real>(row: &[F]) -> F {
    let max = row.iter().cloned().fold(F::neg_infinity(), F::max);
    max + row.iter().map(|&z| (z - max).exp()).sum::<F>().ln()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn orthogonal_pairs_closed_form() {
        // Matched pairs identical, cross-pairs orthogonal, two identities.
        let fv = vec![vec![1.0f64, 0.0], vec![0.0, 1.0]];
        let ft = fv.clone();
        let out = alignment_loss(&fv, &ft, &[0, 1], 0.07).unwrap();
        // Per direction and per row: -log(e^{1/t} / (e^{1/t} + 1)).
        let expected = (-1.0f64 / 0.07).exp().ln_1p();
        assert!((out.loss - expected).abs() < 1e-15);
        assert!(!out.single_identity);
    }

    #[test]
    fn sharper_temperature_lowers_diagonal_loss() {
        let fv = vec![
            vec![1.0f64, 0.1, 0.0],
            vec![0.0, 1.0, 0.2],
            vec![0.3, 0.0, 1.0],
        ];
        let hot = alignment_loss(&fv, &fv, &[0, 1, 2], 0.5).unwrap().loss;
        let cold = alignment_loss(&fv, &fv, &[0, 1, 2], 0.05).unwrap().loss;
        assert!(cold < hot);
    }

    #[test]
    fn single_identity_flagged() {
        let fv = vec![vec![1.0f64, 0.0], vec![0.8, 0.6]];
        let out = alignment_loss(&fv, &fv, &[3, 3], 0.07).unwrap();
        assert!(out.single_identity);
        assert!(out.loss.is_finite());
    }
}
