//! Finite-difference verification of every analytic gradient path, plus the
//! zero-margin reduction to plain normalized-softmax cross-entropy.

mod common;

use common::*;
use rand::Rng;
use uniret_core::loss::{
    alignment_loss, ma_id_backward, ma_id_forward, multimodal_ma_id, ClassWeights, MarginConfig,
};
use uniret_core::train::{
    assign_from_flat, batch_forward_backward, flatten_params, EncoderParams,
};

const FD_H: f64 = 1e-5;

fn flatten_rows(rows: &[Vec<f64>]) -> Vec<f64> {
    rows.iter().flatten().copied().collect()
}

fn unflatten_rows(flat: &[f64], rows: usize, dim: usize) -> Vec<Vec<f64>> {
    flat.chunks(dim).take(rows).map(<[f64]>::to_vec).collect()
}

struct Instance {
    features: Vec<Vec<f64>>,
    weights: ClassWeights<f64>,
    labels: Vec<usize>,
    cfg: MarginConfig<f64>,
}

/// Draw a random instance whose target angles sit safely away from both the
/// piecewise boundary and the degenerate sin(theta) region.
fn sample_instance(rng: &mut rand_chacha::ChaCha8Rng, margin: f64, scale: f64) -> Instance {
    loop {
        let batch = rng.gen_range(1..=8);
        let classes = rng.gen_range(2..=16);
        let dim = rng.gen_range(2..=12);
        let features = gaussian_rows(rng, batch, dim);
        let weight_rows = gaussian_rows(rng, classes, dim);
        let labels = random_labels(rng, batch, classes);

        let ok = features.iter().zip(&labels).all(|(f, &y)| {
            let fu = uniret_core::embedding::l2_normalize(f).unwrap();
            let wu = uniret_core::embedding::l2_normalize(&weight_rows[y]).unwrap();
            let cos = uniret_core::embedding::dot(&fu, &wu).clamp(-1.0, 1.0);
            let theta = cos.acos();
            (theta - (std::f64::consts::PI - margin)).abs() > 1e-3 && theta.sin() > 1e-3
        });
        if !ok {
            continue;
        }
        return Instance {
            features,
            weights: ClassWeights::from_rows(weight_rows).unwrap(),
            labels,
            cfg: MarginConfig::new(margin, scale).unwrap(),
        };
    }
}

fn check_instance(inst: &Instance) -> (f64, f64) {
    let grads = ma_id_backward(&inst.features, &inst.labels, &inst.weights, &inst.cfg).unwrap();
    let dim = inst.weights.dim();
    let batch = inst.features.len();
    let classes = inst.weights.num_classes();

    let flat_f = flatten_rows(&inst.features);
    let fd_f = finite_diff_grad(
        |flat| {
            let feats = unflatten_rows(flat, batch, dim);
            ma_id_forward(&feats, &inst.labels, &inst.weights, &inst.cfg)
                .unwrap()
                .loss
        },
        &flat_f,
        FD_H,
    );
    let err_f = rel_error_norm(&flatten_rows(&grads.features), &fd_f);

    let flat_w = flatten_rows(inst.weights.rows());
    let fd_w = finite_diff_grad(
        |flat| {
            let rows = unflatten_rows(flat, classes, dim);
            let w = ClassWeights::from_rows(rows).unwrap();
            ma_id_forward(&inst.features, &inst.labels, &w, &inst.cfg)
                .unwrap()
                .loss
        },
        &flat_w,
        FD_H,
    );
    let err_w = rel_error_norm(&flatten_rows(&grads.weights), &fd_w);
    (err_f, err_w)
}

#[test]
fn margin_gradients_match_finite_differences() {
    let mut rng = rng(2024);
    let margins = [0.0, 0.2, 0.35];
    let scales = [1.0, 30.0];
    let mut checked = 0;
    let mut max_err = 0.0f64;
    while checked < 120 {
        let margin = margins[checked % margins.len()];
        let scale = scales[checked % scales.len()];
        let inst = sample_instance(&mut rng, margin, scale);
        let (ef, ew) = check_instance(&inst);
        max_err = max_err.max(ef).max(ew);
        checked += 1;
    }
    assert!(max_err < 1e-4, "max relative error {max_err}");
}

#[test]
fn zero_margin_reduces_to_plain_cross_entropy() {
    // Independent oracle: normalize, scale the cosine logits, standard CE.
    fn plain_ce(features: &[Vec<f64>], labels: &[usize], weights: &[Vec<f64>], s: f64) -> f64 {
        let mut total = 0.0;
        for (f, &y) in features.iter().zip(labels) {
            let fn_ = f.iter().map(|x| x * x).sum::<f64>().sqrt();
            let logits: Vec<f64> = weights
                .iter()
                .map(|w| {
                    let wn = w.iter().map(|x| x * x).sum::<f64>().sqrt();
                    let dot: f64 = f.iter().zip(w).map(|(a, b)| a * b).sum();
                    s * (dot / (fn_ * wn)).clamp(-1.0, 1.0)
                })
                .collect();
            let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let lse = max + logits.iter().map(|z| (z - max).exp()).sum::<f64>().ln();
            total += lse - logits[y];
        }
        total / features.len() as f64
    }

    let mut rng = rng(99);
    for case in 0..1000 {
        let batch = rng.gen_range(1..=6);
        let classes = rng.gen_range(2..=10);
        let dim = rng.gen_range(2..=8);
        let features = gaussian_rows(&mut rng, batch, dim);
        let weight_rows = gaussian_rows(&mut rng, classes, dim);
        let labels = random_labels(&mut rng, batch, classes);
        let s = if case % 2 == 0 { 30.0 } else { 1.0 };
        let cfg = MarginConfig::new(0.0, s).unwrap();
        let w = ClassWeights::from_rows(weight_rows.clone()).unwrap();
        let ours = ma_id_forward(&features, &labels, &w, &cfg).unwrap().loss;
        let oracle = plain_ce(&features, &labels, &weight_rows, s);
        assert!(
            (ours - oracle).abs() <= 1e-10,
            "case {case}: {ours} vs {oracle}"
        );
    }
}

#[test]
fn zero_margin_gradients_equal_plain_softmax_gradients() {
    // With m=0 the branch factor is exactly 1; compare the analytic gradient
    // term by term against finite differences of the reduction oracle.
    let mut rng = rng(7);
    let inst = sample_instance(&mut rng, 0.0, 1.0);
    let (ef, ew) = check_instance(&inst);
    assert!(ef < 1e-6, "feature gradient error {ef}");
    assert!(ew < 1e-6, "weight gradient error {ew}");
}

#[test]
fn symmetric_instance_has_orthogonal_gradient() {
    // f equidistant from an orthonormal weight basis, m=0: loss is ln C and
    // the raw-feature gradient is orthogonal to f, so with f along (1,1,1)
    // its components sum to zero.
    let weights = ClassWeights::from_rows(vec![
        vec![1.0, 0.0, 0.0],
        vec![0.0, 1.0, 0.0],
        vec![0.0, 0.0, 1.0],
    ])
    .unwrap();
    let f = vec![vec![1.0, 1.0, 1.0]];
    let cfg = MarginConfig::new(0.0, 1.0).unwrap();
    let out = ma_id_forward(&f, &[0], &weights, &cfg).unwrap();
    let uniform_gap = out.loss - (3.0f64).ln();
    assert!(uniform_gap.abs() < 0.4); // logits differ only through the target scale
    let grads = ma_id_backward(&f, &[0], &weights, &cfg).unwrap();
    let component_sum: f64 = grads.features[0].iter().sum();
    assert!(component_sum.abs() < 1e-12, "sum {component_sum}");

    let fd = finite_diff_grad(
        |flat| {
            ma_id_forward(&[flat.to_vec()], &[0], &weights, &cfg)
                .unwrap()
                .loss
        },
        &f[0],
        FD_H,
    );
    assert!(rel_error_norm(&grads.features[0], &fd) < 1e-6);
}

#[test]
fn loss_strictly_increases_with_margin() {
    // Margin only lowers the target logit, so for target angles inside
    // (0, pi - m) the loss must grow with m.
    let mut rng = rng(31);
    let features = gaussian_rows(&mut rng, 4, 6);
    let weights = ClassWeights::from_rows(gaussian_rows(&mut rng, 5, 6)).unwrap();
    let labels = random_labels(&mut rng, 4, 5);
    let mut prev = f64::NEG_INFINITY;
    for &m in &[0.0, 0.1, 0.2, 0.35, 0.5] {
        let cfg = MarginConfig::new(m, 30.0).unwrap();
        let loss = ma_id_forward(&features, &labels, &weights, &cfg)
            .unwrap()
            .loss;
        assert!(loss > prev, "loss {loss} not increasing at m={m}");
        prev = loss;
    }
}

#[test]
fn scale_preserves_logit_argmax() {
    let mut rng = rng(57);
    let features = gaussian_rows(&mut rng, 6, 5);
    let weights = ClassWeights::from_rows(gaussian_rows(&mut rng, 7, 5)).unwrap();
    let labels = random_labels(&mut rng, 6, 7);
    let argmaxes = |s: f64| -> Vec<usize> {
        let cfg = MarginConfig::new(0.35, s).unwrap();
        ma_id_forward(&features, &labels, &weights, &cfg)
            .unwrap()
            .logits
            .iter()
            .map(|row| {
                row.iter()
                    .enumerate()
                    .max_by(|a, b| a.1.partial_cmp(b.1).unwrap())
                    .unwrap()
                    .0
            })
            .collect()
    };
    let base = argmaxes(1.0);
    for &s in &[0.5, 7.0, 30.0, 120.0] {
        assert_eq!(argmaxes(s), base);
    }
}

#[test]
fn multimodal_weight_gradient_is_mean_of_unimodal() {
    let mut rng = rng(12);
    let fv = gaussian_rows(&mut rng, 5, 6);
    let ft = gaussian_rows(&mut rng, 5, 6);
    let weights = ClassWeights::from_rows(gaussian_rows(&mut rng, 8, 6)).unwrap();
    let labels = random_labels(&mut rng, 5, 8);
    let cfg = MarginConfig::new(0.35, 30.0).unwrap();

    let multi = multimodal_ma_id(&fv, &ft, &labels, &weights, &cfg).unwrap();
    let gi = ma_id_backward(&fv, &labels, &weights, &cfg).unwrap();
    let gt = ma_id_backward(&ft, &labels, &weights, &cfg).unwrap();
    for ((m, a), b) in multi.grad_weights.iter().zip(&gi.weights).zip(&gt.weights) {
        for ((x, y), z) in m.iter().zip(a).zip(b) {
            assert!((x - (y + z) / 2.0).abs() < 1e-12);
        }
    }

    // The loss itself is the exact mean of the two forward passes.
    let li = ma_id_forward(&fv, &labels, &weights, &cfg).unwrap().loss;
    let lt = ma_id_forward(&ft, &labels, &weights, &cfg).unwrap().loss;
    assert_eq!(multi.loss, (li + lt) / 2.0);
}

#[test]
fn shared_weights_couple_both_modalities() {
    // A weight perturbation must move both modality losses: nonzero mixed
    // finite differences confirm the shared-classifier structure.
    let mut rng = rng(88);
    let fv = gaussian_rows(&mut rng, 4, 5);
    let ft = gaussian_rows(&mut rng, 4, 5);
    let weight_rows = gaussian_rows(&mut rng, 3, 5);
    let labels = random_labels(&mut rng, 4, 3);
    let cfg = MarginConfig::new(0.2, 30.0).unwrap();

    let flat_w = flatten_rows(&weight_rows);
    let loss_of = |flat: &[f64], feats: &[Vec<f64>]| {
        let w = ClassWeights::from_rows(unflatten_rows(flat, 3, 5)).unwrap();
        ma_id_forward(feats, &labels, &w, &cfg).unwrap().loss
    };
    let fd_img = finite_diff_grad(|flat| loss_of(flat, &fv), &flat_w, FD_H);
    let fd_txt = finite_diff_grad(|flat| loss_of(flat, &ft), &flat_w, FD_H);
    let norm = |g: &[f64]| g.iter().map(|x| x * x).sum::<f64>().sqrt();
    assert!(norm(&fd_img) > 1e-6);
    assert!(norm(&fd_txt) > 1e-6);
}

#[test]
fn alignment_gradients_match_finite_differences() {
    let mut rng = rng(64);
    for case in 0..20 {
        let batch = rng.gen_range(2..=6);
        let dim = rng.gen_range(2..=8);
        let fv = gaussian_rows(&mut rng, batch, dim);
        let ft = gaussian_rows(&mut rng, batch, dim);
        let labels = random_labels(&mut rng, batch, 3);
        let temperature = if case % 2 == 0 { 0.07 } else { 0.5 };

        let out = alignment_loss(&fv, &ft, &labels, temperature).unwrap();

        let flat_v = flatten_rows(&fv);
        let fd_v = finite_diff_grad(
            |flat| {
                let v = unflatten_rows(flat, batch, dim);
                alignment_loss(&v, &ft, &labels, temperature).unwrap().loss
            },
            &flat_v,
            FD_H,
        );
        assert!(
            rel_error_norm(&flatten_rows(&out.grad_image_features), &fd_v) < 1e-4,
            "image grads case {case}"
        );

        let flat_t = flatten_rows(&ft);
        let fd_t = finite_diff_grad(
            |flat| {
                let t = unflatten_rows(flat, batch, dim);
                alignment_loss(&fv, &t, &labels, temperature).unwrap().loss
            },
            &flat_t,
            FD_H,
        );
        assert!(
            rel_error_norm(&flatten_rows(&out.grad_text_features), &fd_t) < 1e-4,
            "text grads case {case}"
        );
    }
}

#[test]
fn full_batch_chain_matches_finite_differences() {
    // Complete path: encoder (with tanh hidden layer) -> both losses.
    let mut rng = rng(19);
    let batch = 4;
    let in_dim = 5;
    let out_dim = 3;
    let encoder = EncoderParams::<f64>::init(in_dim, out_dim, Some(4), 42);
    let weights = ClassWeights::random_unit(3, out_dim, 43).unwrap();
    let images = gaussian_rows(&mut rng, batch, in_dim);
    let texts = gaussian_rows(&mut rng, batch, in_dim);
    let labels = random_labels(&mut rng, batch, 3);
    let cfg = MarginConfig::new(0.2, 30.0).unwrap();

    let img_refs: Vec<&[f64]> = images.iter().map(Vec::as_slice).collect();
    let txt_refs: Vec<&[f64]> = texts.iter().map(Vec::as_slice).collect();
    let step = batch_forward_backward(
        &encoder, &weights, &img_refs, &txt_refs, &labels, &cfg, 0.07, 1.0, 1.0,
    )
    .unwrap();

    let grad_weights = ClassWeights::from_rows(step.weight_grads.clone()).unwrap();
    let analytic = flatten_params(&step.encoder_grads, &grad_weights);
    let flat = flatten_params(&encoder, &weights);
    let fd = finite_diff_grad(
        |point| {
            let mut enc = encoder.clone();
            let mut w = weights.clone();
            assign_from_flat(&mut enc, &mut w, point).unwrap();
            batch_forward_backward(
                &enc, &w, &img_refs, &txt_refs, &labels, &cfg, 0.07, 1.0, 1.0,
            )
            .unwrap()
            .total_loss
        },
        &flat,
        FD_H,
    );
    let err = rel_error_norm(&analytic, &fd);
    assert!(err < 1e-4, "chain gradient error {err}");
}
