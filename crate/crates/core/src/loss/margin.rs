//! Multimodal angular-margin identity loss.
//!
//! Cosine logits against a shared unit-norm class-weight matrix, with an
//! additive angular margin applied to the target class only, scaled by `s`,
//! then standard cross-entropy. Image and text batches use the same weight
//! matrix and the combined loss is the mean of the two modality losses.
//!
//! Gradients are analytic, taken with respect to the *raw* feature and
//! weight rows, i.e. they include the chain rule through the internal L2
//! normalization.

use super::{cross_entropy_row, softmax_row, ClassWeights, LossOutput, MarginConfig};
use crate::embedding::{clamp_unit, l2_norm};
use crate::error::{Error, Result};
use crate::scalar::{real, Real};

/// Below this |sin theta| the margin chain-rule factor is considered
/// degenerate: its contribution is dropped and a counter incremented.
const SIN_THETA_GUARD: f64 = 1e-7;

/// Margin-adjusted cosine for the target class.
///
/// With theta = acos(cos_theta): `cos(theta + m)` while theta <= pi - m,
/// otherwise `cos(theta) - m*sin(pi - m)`. The branch test is evaluated as
/// `cos_theta >= cos(pi - m)` to avoid an acos round-trip, and the main
/// branch expands through the angle-addition identity; sin(theta) >= 0 on
/// [0, pi] so the square root carries no sign ambiguity.
pub fn target_margin_cosine<F: Real>(cos_theta: F, margin: F) -> F {
    let c = clamp_unit(cos_theta);
    let boundary = (F::PI() - margin).cos();
    if c >= boundary {
        let sin_theta = (F::one() - c * c).max(F::zero()).sqrt();
        c * margin.cos() - sin_theta * margin.sin()
    } else {
        c - margin * (F::PI() - margin).sin()
    }
}

/// d(target_margin_cosine)/d(cos theta) on the current branch.
///
/// Main branch: cos m + cos theta * sin m / sin theta, guarded against
/// degenerate angles. Else branch: 1.
fn target_margin_cosine_grad<F: Real>(cos_theta: F, margin: F, degenerate: &mut usize) -> F {
    let c = clamp_unit(cos_theta);
    let boundary = (F::PI() - margin).cos();
    if c >= boundary {
        let sin_theta = (F::one() - c * c).max(F::zero()).sqrt();
        if sin_theta < real(SIN_THETA_GUARD) {
            *degenerate += 1;
            margin.cos()
        } else {
            margin.cos() + c * margin.sin() / sin_theta
        }
    } else {
        F::one()
    }
}

/// Gradients of the batch-mean loss with respect to the raw inputs.
#[derive(Debug, Clone)]
pub struct MaIdGradients<F> {
    pub features: Vec<Vec<F>>,
    pub weights: Vec<Vec<F>>,
    /// Target angles that hit the |sin theta| guard during backprop.
    pub degenerate_angles: usize,
}

struct ForwardParts<F> {
    norm_features: Vec<Vec<F>>,
    feature_norms: Vec<F>,
    norm_weights: Vec<Vec<F>>,
    weight_norms: Vec<F>,
    cosines: Vec<Vec<F>>,
    logits: Vec<Vec<F>>,
    loss: F,
}

fn forward_parts<F: Real>(
    features: &[Vec<F>],
    labels: &[usize],
    weights: &ClassWeights<F>,
    cfg: &MarginConfig<F>,
) -> Result<ForwardParts<F>> {
    if features.is_empty() {
        return Err(Error::ShapeMismatch("empty feature batch".into()));
    }
    if features.len() != labels.len() {
        return Err(Error::LengthMismatch {
            left: features.len(),
            right: labels.len(),
        });
    }
    let dim = weights.dim();
    let classes = weights.num_classes();
    for f in features {
        if f.len() != dim {
            return Err(Error::DimensionMismatch {
                expected: dim,
                got: f.len(),
            });
        }
    }
    for &y in labels {
        if y >= classes {
            return Err(Error::LabelOutOfRange { label: y, classes });
        }
    }

    let feature_norms: Vec<F> = features.iter().map(|f| l2_norm(f)).collect();
    let weight_norms: Vec<F> = weights.rows().iter().map(|w| l2_norm(w)).collect();
    let norm_features = features
        .iter()
        .map(|f| crate::embedding::l2_normalize(f))
        .collect::<Result<Vec<_>>>()?;
    let norm_weights = weights
        .rows()
        .iter()
        .map(|w| crate::embedding::l2_normalize(w))
        .collect::<Result<Vec<_>>>()?;

    let cosines: Vec<Vec<F>> = norm_features
        .iter()
        .map(|f| {
            norm_weights
                .iter()
                .map(|w| clamp_unit(crate::embedding::dot(f, w)))
                .collect()
        })
        .collect();

    let logits: Vec<Vec<F>> = cosines
        .iter()
        .zip(labels)
        .map(|(row, &y)| {
            row.iter()
                .enumerate()
                .map(|(j, &c)| {
                    if j == y {
                        cfg.scale * target_margin_cosine(c, cfg.margin)
                    } else {
                        cfg.scale * c
                    }
                })
                .collect()
        })
        .collect();

    let batch = real::<F>(features.len() as f64);
    let loss = logits
        .iter()
        .zip(labels)
        .map(|(row, &y)| cross_entropy_row(row, y))
        .sum::<F>()
        / batch;

    Ok(ForwardParts {
        norm_features,
        feature_norms,
        norm_weights,
        weight_norms,
        cosines,
        logits,
        loss,
    })
}

/// Batch-mean margin cross-entropy over one modality.
pub fn ma_id_forward<F: Real>(
    features: &[Vec<F>],
    labels: &[usize],
    weights: &ClassWeights<F>,
    cfg: &MarginConfig<F>,
) -> Result<LossOutput<F>> {
    let parts = forward_parts(features, labels, weights, cfg)?;
    Ok(LossOutput {
        loss: parts.loss,
        logits: parts.logits,
    })
}

/// Analytic gradients of [`ma_id_forward`]'s loss with respect to the raw
/// feature rows and raw weight rows.
pub fn ma_id_backward<F: Real>(
    features: &[Vec<F>],
    labels: &[usize],
    weights: &ClassWeights<F>,
    cfg: &MarginConfig<F>,
) -> Result<MaIdGradients<F>> {
    let parts = forward_parts(features, labels, weights, cfg)?;
    let batch = features.len();
    let classes = weights.num_classes();
    let dim = weights.dim();
    let inv_batch = F::one() / real::<F>(batch as f64);
    let mut degenerate = 0usize;

    // dL/d cosine_{ij}, including the margin chain factor on the target.
    let mut cos_grads = vec![vec![F::zero(); classes]; batch];
    for i in 0..batch {
        let probs = softmax_row(&parts.logits[i]);
        for j in 0..classes {
            let softmax_term = if j == labels[i] {
                probs[j] - F::one()
            } else {
                probs[j]
            };
            let branch = if j == labels[i] {
                target_margin_cosine_grad(parts.cosines[i][j], cfg.margin, &mut degenerate)
            } else {
                F::one()
            };
            cos_grads[i][j] = inv_batch * softmax_term * cfg.scale * branch;
        }
    }

    // Chain through the L2 normalization of each raw row: for u = dL/d(unit
    // row), the raw gradient is (u - (u . n) n) / ||raw||.
    let mut grad_features = vec![vec![F::zero(); dim]; batch];
    for i in 0..batch {
        let mut u = vec![F::zero(); dim];
        for j in 0..classes {
            let g = cos_grads[i][j];
            if g != F::zero() {
                for (uk, wk) in u.iter_mut().zip(&parts.norm_weights[j]) {
                    *uk += g * *wk;
                }
            }
        }
        let n = &parts.norm_features[i];
        let along = crate::embedding::dot(&u, n);
        for k in 0..dim {
            grad_features[i][k] = (u[k] - along * n[k]) / parts.feature_norms[i];
        }
    }

    let mut grad_weights = vec![vec![F::zero(); dim]; classes];
    for j in 0..classes {
        let mut t = vec![F::zero(); dim];
        for i in 0..batch {
            let g = cos_grads[i][j];
            if g != F::zero() {
                for (tk, fk) in t.iter_mut().zip(&parts.norm_features[i]) {
                    *tk += g * *fk;
                }
            }
        }
        let n = &parts.norm_weights[j];
        let along = crate::embedding::dot(&t, n);
        for k in 0..dim {
            grad_weights[j][k] = (t[k] - along * n[k]) / parts.weight_norms[j];
        }
    }

    Ok(MaIdGradients {
        features: grad_features,
        weights: grad_weights,
        degenerate_angles: degenerate,
    })
}

/// Joint output over both modalities.
#[derive(Debug, Clone)]
pub struct MultimodalLoss<F> {
    pub loss: F,
    pub image: LossOutput<F>,
    pub text: LossOutput<F>,
    pub grad_image_features: Vec<Vec<F>>,
    pub grad_text_features: Vec<Vec<F>>,
    pub grad_weights: Vec<Vec<F>>,
    pub degenerate_angles: usize,
}

/// Identity loss over both modalities with the shared weight matrix:
/// the mean of the two unimodal losses, with the weight gradient averaged
/// across modalities and the feature gradients halved accordingly.
pub fn multimodal_ma_id<F: Real>(
    image_features: &[Vec<F>],
    text_features: &[Vec<F>],
    labels: &[usize],
    weights: &ClassWeights<F>,
    cfg: &MarginConfig<F>,
) -> Result<MultimodalLoss<F>> {
    if image_features.len() != text_features.len() {
        return Err(Error::LengthMismatch {
            left: image_features.len(),
            right: text_features.len(),
        });
    }
    let image = ma_id_forward(image_features, labels, weights, cfg)?;
    let text = ma_id_forward(text_features, labels, weights, cfg)?;
    let image_grads = ma_id_backward(image_features, labels, weights, cfg)?;
    let text_grads = ma_id_backward(text_features, labels, weights, cfg)?;

    let half = real::<F>(0.5);
    let scale_rows = |rows: &[Vec<F>]| -> Vec<Vec<F>> {
        rows.iter()
            .map(|r| r.iter().map(|&x| x * half).collect())
            .collect()
    };
    let grad_weights = image_grads
        .weights
        .iter()
        .zip(&text_grads.weights)
        .map(|(a, b)| a.iter().zip(b).map(|(&x, &y)| (x + y) * half).collect())
        .collect();

    Ok(MultimodalLoss {
        loss: (image.loss + text.loss) * half,
        grad_image_features: scale_rows(&image_grads.features),
        grad_text_features: scale_rows(&text_grads.features),
        grad_weights,
        degenerate_angles: image_grads.degenerate_angles + text_grads.degenerate_angles,
        image,
        text,
    })
}
