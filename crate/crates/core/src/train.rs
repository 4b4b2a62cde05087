//! Desk-scale unified training loop.
//!
//! Small per-modality encoders (affine, optionally one tanh hidden layer) are
//! optimized on a curated dataset with the combined objective
//! `id_weight * L_id + align_weight * L_align`. Class-weight rows are
//! projected back onto the unit sphere after every step. The whole loop is
//! deterministic for a fixed seed: batch math is sequential and every random
//! draw comes from seeded sub-streams.

use crate::embedding::{dot, l2_normalize, PairedDataset};
use crate::error::{Error, Result};
use crate::loss::{
    alignment_loss, loss_debug_json, multimodal_ma_id, ClassWeights, MarginConfig,
};
use crate::scalar::{derive_seed, real, Real};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;

/// One affine layer, row-major weight (out x in).
#[derive(Debug, Clone, PartialEq)]
pub struct AffineLayer<F> {
    pub weight: Vec<Vec<F>>,
    pub bias: Vec<F>,
}

impl<F: Real> AffineLayer<F> {
    fn init(out_dim: usize, in_dim: usize, rng: &mut ChaCha8Rng) -> Self {
        let std = 1.0 / (in_dim as f64).sqrt();
        let weight = (0..out_dim)
            .map(|_| {
                (0..in_dim)
                    .map(|_| {
                        real::<F>(
                            <StandardNormal as Distribution<f64>>::sample(&StandardNormal, rng)
                                * std,
                        )
                    })
                    .collect()
            })
            .collect();
        Self {
            weight,
            bias: vec![F::zero(); out_dim],
        }
    }

    fn zeros(out_dim: usize, in_dim: usize) -> Self {
        Self {
            weight: vec![vec![F::zero(); in_dim]; out_dim],
            bias: vec![F::zero(); out_dim],
        }
    }

    fn apply(&self, x: &[F]) -> Vec<F> {
        self.weight
            .iter()
            .zip(&self.bias)
            .map(|(row, &b)| dot(row, x) + b)
            .collect()
    }

    pub fn out_dim(&self) -> usize {
        self.weight.len()
    }

    pub fn in_dim(&self) -> usize {
        self.weight.first().map_or(0, Vec::len)
    }
}

/// One modality encoder: affine, or affine-tanh-affine when a hidden layer
/// is configured.
#[derive(Debug, Clone, PartialEq)]
pub struct Encoder<F> {
    pub hidden: Option<AffineLayer<F>>,
    pub output: AffineLayer<F>,
}

impl<F: Real> Encoder<F> {
    fn init(in_dim: usize, out_dim: usize, hidden_dim: Option<usize>, rng: &mut ChaCha8Rng) -> Self {
        match hidden_dim {
            Some(h) => Self {
                hidden: Some(AffineLayer::init(h, in_dim, rng)),
                output: AffineLayer::init(out_dim, h, rng),
            },
            None => Self {
                hidden: None,
                output: AffineLayer::init(out_dim, in_dim, rng),
            },
        }
    }

    fn zeros_like(&self) -> Self {
        Self {
            hidden: self
                .hidden
                .as_ref()
                .map(|l| AffineLayer::zeros(l.out_dim(), l.in_dim())),
            output: AffineLayer::zeros(self.output.out_dim(), self.output.in_dim()),
        }
    }

    pub fn in_dim(&self) -> usize {
        self.hidden
            .as_ref()
            .map_or_else(|| self.output.in_dim(), AffineLayer::in_dim)
    }

    pub fn out_dim(&self) -> usize {
        self.output.out_dim()
    }

    /// Forward pass returning the output and, when present, the hidden
    /// activation needed for backprop.
    fn forward_cached(&self, x: &[F]) -> (Vec<F>, Option<Vec<F>>) {
        match &self.hidden {
            Some(layer) => {
                let h: Vec<F> = layer.apply(x).into_iter().map(|a| a.tanh()).collect();
                (self.output.apply(&h), Some(h))
            }
            None => (self.output.apply(x), None),
        }
    }

    pub fn forward(&self, x: &[F]) -> Vec<F> {
        self.forward_cached(x).0
    }

    /// Accumulate parameter gradients for one sample given dL/d(output).
    fn backward_into(
        &self,
        x: &[F],
        hidden_act: Option<&Vec<F>>,
        grad_out: &[F],
        grads: &mut Encoder<F>,
    ) {
        match (&self.hidden, hidden_act) {
            (Some(_), Some(h)) => {
                let gh = grads.hidden.as_mut().expect("grad shape matches");
                for (row, (&g, gb)) in grads
                    .output
                    .weight
                    .iter_mut()
                    .zip(grad_out.iter().zip(grads.output.bias.iter_mut()))
                {
                    for (w, &hk) in row.iter_mut().zip(h) {
                        *w += g * hk;
                    }
                    *gb += g;
                }
                // d(tanh)/da = 1 - h^2
                let mut da = vec![F::zero(); h.len()];
                for (k, dak) in da.iter_mut().enumerate() {
                    let mut acc = F::zero();
                    for (row, &g) in self.output.weight.iter().zip(grad_out) {
                        acc += row[k] * g;
                    }
                    *dak = acc * (F::one() - h[k] * h[k]);
                }
                for (row, (&g, gb)) in gh
                    .weight
                    .iter_mut()
                    .zip(da.iter().zip(gh.bias.iter_mut()))
                {
                    for (w, &xk) in row.iter_mut().zip(x) {
                        *w += g * xk;
                    }
                    *gb += g;
                }
            }
            _ => {
                for (row, (&g, gb)) in grads
                    .output
                    .weight
                    .iter_mut()
                    .zip(grad_out.iter().zip(grads.output.bias.iter_mut()))
                {
                    for (w, &xk) in row.iter_mut().zip(x) {
                        *w += g * xk;
                    }
                    *gb += g;
                }
            }
        }
    }
}

/// Both modality encoders.
#[derive(Debug, Clone, PartialEq)]
pub struct EncoderParams<F> {
    pub image: Encoder<F>,
    pub text: Encoder<F>,
}

impl<F: Real> EncoderParams<F> {
    pub fn init(in_dim: usize, out_dim: usize, hidden_dim: Option<usize>, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Self {
            image: Encoder::init(in_dim, out_dim, hidden_dim, &mut rng),
            text: Encoder::init(in_dim, out_dim, hidden_dim, &mut rng),
        }
    }

    /// Identity map with zero bias; requires in_dim == out_dim.
    pub fn identity(dim: usize) -> Self {
        let eye = || {
            let mut layer = AffineLayer::zeros(dim, dim);
            for (i, row) in layer.weight.iter_mut().enumerate() {
                row[i] = F::one();
            }
            Encoder {
                hidden: None,
                output: layer,
            }
        };
        Self {
            image: eye(),
            text: eye(),
        }
    }

    pub fn zeros_like(&self) -> Self {
        Self {
            image: self.image.zeros_like(),
            text: self.text.zeros_like(),
        }
    }

    pub fn in_dim(&self) -> usize {
        self.image.in_dim()
    }

    pub fn out_dim(&self) -> usize {
        self.image.out_dim()
    }
}

/// Flatten order shared by the optimizer and the checkpoint blob:
/// image encoder (hidden weight, hidden bias, output weight, output bias),
/// text encoder likewise, then class-weight rows.
pub fn flatten_params<F: Real>(encoder: &EncoderParams<F>, weights: &ClassWeights<F>) -> Vec<F> {
    let mut out = Vec::new();
    for enc in [&encoder.image, &encoder.text] {
        if let Some(h) = &enc.hidden {
            for row in &h.weight {
                out.extend_from_slice(row);
            }
            out.extend_from_slice(&h.bias);
        }
        for row in &enc.output.weight {
            out.extend_from_slice(row);
        }
        out.extend_from_slice(&enc.output.bias);
    }
    for row in weights.rows() {
        out.extend_from_slice(row);
    }
    out
}

/// Inverse of [`flatten_params`], writing into existing structures.
pub fn assign_from_flat<F: Real>(
    encoder: &mut EncoderParams<F>,
    weights: &mut ClassWeights<F>,
    flat: &[F],
) -> Result<()> {
    let mut pos = 0usize;
    let mut take = |n: usize| -> Result<std::ops::Range<usize>> {
        if pos + n > flat.len() {
            return Err(Error::ShapeMismatch(format!(
                "flat parameter vector too short: need {} more at {pos}",
                n
            )));
        }
        let r = pos..pos + n;
        pos += n;
        Ok(r)
    };
    for enc in [&mut encoder.image, &mut encoder.text] {
        if let Some(h) = &mut enc.hidden {
            for row in &mut h.weight {
                let r = take(row.len())?;
                row.copy_from_slice(&flat[r]);
            }
            let r = take(h.bias.len())?;
            h.bias.copy_from_slice(&flat[r]);
        }
        for row in &mut enc.output.weight {
            let r = take(row.len())?;
            row.copy_from_slice(&flat[r]);
        }
        let r = take(enc.output.bias.len())?;
        enc.output.bias.copy_from_slice(&flat[r]);
    }
    for row in weights.rows_mut() {
        let r = take(row.len())?;
        row.copy_from_slice(&flat[r]);
    }
    if pos != flat.len() {
        return Err(Error::ShapeMismatch(format!(
            "flat parameter vector too long: {} extra values",
            flat.len() - pos
        )));
    }
    Ok(())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum OptimizerKind {
    Sgd,
    Adam,
}

enum OptimizerState<F> {
    Sgd,
    Adam {
        m: Vec<F>,
        v: Vec<F>,
        t: u32,
    },
}

impl<F: Real> OptimizerState<F> {
    fn new(kind: OptimizerKind, len: usize) -> Self {
        match kind {
            OptimizerKind::Sgd => Self::Sgd,
            OptimizerKind::Adam => Self::Adam {
                m: vec![F::zero(); len],
                v: vec![F::zero(); len],
                t: 0,
            },
        }
    }

    fn step(&mut self, params: &mut [F], grads: &[F], lr: F) {
        match self {
            Self::Sgd => {
                for (p, &g) in params.iter_mut().zip(grads) {
                    *p -= lr * g;
                }
            }
            Self::Adam { m, v, t } => {
                *t += 1;
                let b1 = real::<F>(0.9);
                let b2 = real::<F>(0.999);
                let eps = real::<F>(1e-8);
                let bc1 = F::one() - b1.powi(*t as i32);
                let bc2 = F::one() - b2.powi(*t as i32);
                for i in 0..params.len() {
                    m[i] = b1 * m[i] + (F::one() - b1) * grads[i];
                    v[i] = b2 * v[i] + (F::one() - b2) * grads[i] * grads[i];
                    let mhat = m[i] / bc1;
                    let vhat = v[i] / bc2;
                    params[i] -= lr * mhat / (vhat.sqrt() + eps);
                }
            }
        }
    }
}

/// Training hyperparameters. Defaults are the standard desk-scale setup:
/// plain SGD, lr 0.05, batch 64, 50 epochs, margin 0.35 at scale 30,
/// temperature 0.07, with a step decay over the final fifth of training.
/// The identity term carries weight 8 against the alignment term: at
/// temperature 0.07 the alignment gradients scale with 1/temperature and
/// would otherwise drown the identity signal at this model size.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    /// Constant schedule when None; otherwise the learning rate is
    /// multiplied by `lr_decay_factor` from this epoch on.
    pub lr_decay_epoch: Option<usize>,
    pub lr_decay_factor: f64,
    pub seed: u64,
    pub margin: f64,
    pub scale: f64,
    pub temperature: f64,
    pub id_loss_weight: f64,
    pub align_loss_weight: f64,
    pub embed_dim: usize,
    pub hidden_dim: Option<usize>,
    pub optimizer: OptimizerKind,
    pub deterministic: bool,
    /// Sample cap for the per-epoch separation metrics.
    pub separation_max_pairs: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 50,
            batch_size: 64,
            learning_rate: 0.05,
            lr_decay_epoch: Some(40),
            lr_decay_factor: 0.1,
            seed: 0,
            margin: 0.35,
            scale: 30.0,
            temperature: 0.07,
            id_loss_weight: 8.0,
            align_loss_weight: 1.0,
            embed_dim: 16,
            hidden_dim: None,
            optimizer: OptimizerKind::Sgd,
            deterministic: true,
            separation_max_pairs: 2000,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(Error::InvalidConfig("batch_size must be positive".into()));
        }
        if !(self.learning_rate > 0.0) {
            return Err(Error::InvalidConfig(
                "learning_rate must be positive".into(),
            ));
        }
        if !(self.lr_decay_factor > 0.0) {
            return Err(Error::InvalidConfig(
                "lr_decay_factor must be positive".into(),
            ));
        }
        if self.embed_dim == 0 {
            return Err(Error::InvalidConfig("embed_dim must be positive".into()));
        }
        MarginConfig::new(self.margin, self.scale)?;
        if !(self.temperature > 0.0) {
            return Err(Error::InvalidConfig("temperature must be positive".into()));
        }
        Ok(())
    }
}

/// Intra/inter-identity cosine statistics over an embedding set.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct SeparationMetrics {
    pub mean_intra_cos: f64,
    pub mean_inter_cos: f64,
    pub separation: f64,
}

/// Per-epoch training record.
#[derive(Debug, Clone, Copy, Serialize, Deserialize, PartialEq)]
pub struct EpochMetrics {
    pub epoch: usize,
    pub loss_ma_id: f64,
    pub loss_align: f64,
    pub intra: f64,
    pub inter: f64,
    pub separation: f64,
}

/// Final parameters plus the metric history.
#[derive(Debug, Clone)]
pub struct TrainOutput<F> {
    pub encoder: EncoderParams<F>,
    pub weights: ClassWeights<F>,
    pub history: Vec<EpochMetrics>,
    pub single_identity_batches: usize,
    pub degenerate_angles: usize,
}

/// Gradients of one batch's combined loss.
pub struct BatchStep<F> {
    pub loss_ma_id: F,
    pub loss_align: F,
    pub total_loss: F,
    pub encoder_grads: EncoderParams<F>,
    pub weight_grads: Vec<Vec<F>>,
    pub single_identity: bool,
    pub degenerate_angles: usize,
}

/// Forward and backward over one batch of raw inputs, through the encoders,
/// the shared-weight identity loss, and the alignment loss.
pub fn batch_forward_backward<F: Real>(
    encoder: &EncoderParams<F>,
    weights: &ClassWeights<F>,
    image_inputs: &[&[F]],
    text_inputs: &[&[F]],
    labels: &[usize],
    margin_cfg: &MarginConfig<F>,
    temperature: F,
    id_weight: F,
    align_weight: F,
) -> Result<BatchStep<F>> {
    let batch = image_inputs.len();
    let mut image_feats = Vec::with_capacity(batch);
    let mut image_hidden = Vec::with_capacity(batch);
    for x in image_inputs {
        let (f, h) = encoder.image.forward_cached(x);
        image_feats.push(f);
        image_hidden.push(h);
    }
    let mut text_feats = Vec::with_capacity(batch);
    let mut text_hidden = Vec::with_capacity(batch);
    for x in text_inputs {
        let (f, h) = encoder.text.forward_cached(x);
        text_feats.push(f);
        text_hidden.push(h);
    }

    let id = multimodal_ma_id(&image_feats, &text_feats, labels, weights, margin_cfg)?;
    let align = alignment_loss(&image_feats, &text_feats, labels, temperature)?;
    let total_loss = id_weight * id.loss + align_weight * align.loss;

    // Combine dL/d(feature) from both objectives, then push through the
    // encoders.
    let mut encoder_grads = encoder.zeros_like();
    for i in 0..batch {
        let grad_v: Vec<F> = id.grad_image_features[i]
            .iter()
            .zip(&align.grad_image_features[i])
            .map(|(&a, &b)| id_weight * a + align_weight * b)
            .collect();
        encoder.image.backward_into(
            image_inputs[i],
            image_hidden[i].as_ref(),
            &grad_v,
            &mut encoder_grads.image,
        );
        let grad_t: Vec<F> = id.grad_text_features[i]
            .iter()
            .zip(&align.grad_text_features[i])
            .map(|(&a, &b)| id_weight * a + align_weight * b)
            .collect();
        encoder.text.backward_into(
            text_inputs[i],
            text_hidden[i].as_ref(),
            &grad_t,
            &mut encoder_grads.text,
        );
    }

    let weight_grads = id
        .grad_weights
        .iter()
        .map(|row| row.iter().map(|&g| id_weight * g).collect())
        .collect();

    Ok(BatchStep {
        loss_ma_id: id.loss,
        loss_align: align.loss,
        total_loss,
        encoder_grads,
        weight_grads,
        single_identity: align.single_identity,
        degenerate_angles: id.degenerate_angles,
    })
}

/// Shuffle pair indices into batches, retrying the shuffle until every batch
/// of size >= 2 carries at least two identities (bounded attempts). Returns
/// the batches and whether full stratification was achieved.
pub fn stratified_batches(
    labels: &[usize],
    batch_size: usize,
    rng: &mut ChaCha8Rng,
) -> (Vec<Vec<usize>>, bool) {
    let n = labels.len();
    let mut best: Option<Vec<Vec<usize>>> = None;
    for _attempt in 0..32 {
        let mut idx: Vec<usize> = (0..n).collect();
        idx.shuffle(rng);
        let batches: Vec<Vec<usize>> = idx.chunks(batch_size).map(<[usize]>::to_vec).collect();
        let stratified = batches.iter().all(|b| {
            b.len() < 2 || b.iter().any(|&i| labels[i] != labels[b[0]])
        });
        if stratified {
            return (batches, true);
        }
        if best.is_none() {
            best = Some(batches);
        }
    }
    (best.expect("at least one attempt"), false)
}

/// Minibatch training on a curated dataset.
pub fn train<F: Real>(dataset: &PairedDataset<F>, cfg: &TrainConfig) -> Result<TrainOutput<F>> {
    cfg.validate()?;
    if dataset.is_empty() {
        return Err(Error::EmptyInput("dataset"));
    }
    if dataset.num_identities() < 2 {
        return Err(Error::SingleIdentityDataset);
    }

    // person_id -> contiguous class index, sorted for determinism.
    let mut ids: Vec<u32> = dataset.pairs().iter().map(|p| p.person_id).collect();
    ids.sort_unstable();
    ids.dedup();
    let class_of: BTreeMap<u32, usize> = ids.iter().enumerate().map(|(i, &p)| (p, i)).collect();
    let labels: Vec<usize> = dataset
        .pairs()
        .iter()
        .map(|p| class_of[&p.person_id])
        .collect();
    let num_classes = ids.len();

    // Encoder inputs: unit-normalized raw features, matching what a reader
    // produces when the dataset comes from disk.
    let in_dim = dataset.pairs()[0].image.vector.len();
    let image_inputs: Vec<Vec<F>> = dataset
        .pairs()
        .iter()
        .map(|p| l2_normalize(&p.image.vector))
        .collect::<Result<_>>()?;
    let text_inputs: Vec<Vec<F>> = dataset
        .pairs()
        .iter()
        .map(|p| l2_normalize(&p.text.vector))
        .collect::<Result<_>>()?;

    let mut encoder = EncoderParams::<F>::init(
        in_dim,
        cfg.embed_dim,
        cfg.hidden_dim,
        derive_seed(cfg.seed, 1),
    );
    let mut weights =
        ClassWeights::<F>::random_unit(num_classes, cfg.embed_dim, derive_seed(cfg.seed, 2))?;
    let mut batch_rng = ChaCha8Rng::seed_from_u64(derive_seed(cfg.seed, 3));
    let metrics_seed = derive_seed(cfg.seed, 4);

    let margin_cfg = MarginConfig::new(real::<F>(cfg.margin), real::<F>(cfg.scale))?;
    let temperature = real::<F>(cfg.temperature);
    let id_weight = real::<F>(cfg.id_loss_weight);
    let align_weight = real::<F>(cfg.align_loss_weight);

    let flat_len = flatten_params(&encoder, &weights).len();
    let mut optimizer = OptimizerState::<F>::new(cfg.optimizer, flat_len);

    let mut history = Vec::with_capacity(cfg.epochs);
    let mut single_identity_batches = 0usize;
    let mut degenerate_angles = 0usize;

    for epoch in 0..cfg.epochs {
        let lr = match cfg.lr_decay_epoch {
            Some(at) if epoch >= at => real::<F>(cfg.learning_rate * cfg.lr_decay_factor),
            _ => real::<F>(cfg.learning_rate),
        };
        let (batches, _) = stratified_batches(&labels, cfg.batch_size, &mut batch_rng);
        let mut id_loss_sum = 0.0f64;
        let mut align_loss_sum = 0.0f64;

        for (batch_no, batch) in batches.iter().enumerate() {
            let imgs: Vec<&[F]> = batch.iter().map(|&i| image_inputs[i].as_slice()).collect();
            let txts: Vec<&[F]> = batch.iter().map(|&i| text_inputs[i].as_slice()).collect();
            let batch_labels: Vec<usize> = batch.iter().map(|&i| labels[i]).collect();

            let step = batch_forward_backward(
                &encoder,
                &weights,
                &imgs,
                &txts,
                &batch_labels,
                &margin_cfg,
                temperature,
                id_weight,
                align_weight,
            )?;
            if !step.total_loss.is_finite() {
                let gf = flatten_params(&step.encoder_grads, &weights);
                let gnorm = crate::embedding::l2_norm(&gf);
                let wnorm = step
                    .weight_grads
                    .iter()
                    .map(|r| crate::embedding::l2_norm(r))
                    .fold(F::zero(), F::max);
                return Err(Error::NonFiniteLoss {
                    epoch,
                    batch: batch_no,
                    dump: loss_debug_json(step.total_loss, gnorm, wnorm),
                });
            }
            if step.single_identity {
                single_identity_batches += 1;
            }
            degenerate_angles += step.degenerate_angles;

            id_loss_sum += step.loss_ma_id.to_f64().unwrap_or(f64::NAN) * batch.len() as f64;
            align_loss_sum += step.loss_align.to_f64().unwrap_or(f64::NAN) * batch.len() as f64;

            let grad_weights = ClassWeights::from_rows(step.weight_grads)?;
            let mut flat_params = flatten_params(&encoder, &weights);
            let flat_grads = flatten_params(&step.encoder_grads, &grad_weights);
            optimizer.step(&mut flat_params, &flat_grads, lr);
            assign_from_flat(&mut encoder, &mut weights, &flat_params)?;
            weights.renormalize()?;
        }

        let n = dataset.len() as f64;
        let embedded = embed_dataset(&encoder, &image_inputs, &text_inputs, &labels);
        let sep = separation_metrics(&embedded, cfg.separation_max_pairs, metrics_seed)?;
        history.push(EpochMetrics {
            epoch,
            loss_ma_id: id_loss_sum / n,
            loss_align: align_loss_sum / n,
            intra: sep.mean_intra_cos,
            inter: sep.mean_inter_cos,
            separation: sep.separation,
        });
    }

    Ok(TrainOutput {
        encoder,
        weights,
        history,
        single_identity_batches,
        degenerate_angles,
    })
}

/// Encode every image and text input; labels are duplicated across the two
/// modalities. Used for the per-epoch separation metrics.
fn embed_dataset<F: Real>(
    encoder: &EncoderParams<F>,
    image_inputs: &[Vec<F>],
    text_inputs: &[Vec<F>],
    labels: &[usize],
) -> Vec<(Vec<F>, u32)> {
    let mut out = Vec::with_capacity(image_inputs.len() * 2);
    for (x, &y) in image_inputs.iter().zip(labels) {
        out.push((encoder.image.forward(x), y as u32));
    }
    for (x, &y) in text_inputs.iter().zip(labels) {
        out.push((encoder.text.forward(x), y as u32));
    }
    out
}

/// Mean cosine similarity within identities and across identities.
///
/// Intra pairs are enumerated exhaustively when few enough, otherwise a
/// seeded sample of `max_pairs`; inter pairs are always a seeded sample.
pub fn separation_metrics<F: Real>(
    embeddings: &[(Vec<F>, u32)],
    max_pairs: usize,
    seed: u64,
) -> Result<SeparationMetrics> {
    if max_pairs == 0 {
        return Err(Error::InvalidConfig("max_pairs must be positive".into()));
    }
    let units: Vec<Vec<F>> = embeddings
        .iter()
        .map(|(v, _)| l2_normalize(v))
        .collect::<Result<_>>()?;
    let labels: Vec<u32> = embeddings.iter().map(|&(_, y)| y).collect();
    let n = units.len();

    let mut by_label: BTreeMap<u32, Vec<usize>> = BTreeMap::new();
    for (i, &y) in labels.iter().enumerate() {
        by_label.entry(y).or_default().push(i);
    }
    let intra_total: usize = by_label
        .values()
        .map(|g| g.len() * (g.len() - 1) / 2)
        .sum();
    if intra_total == 0 {
        return Err(Error::InsufficientSamples(
            "no identity has two or more samples",
        ));
    }
    if by_label.len() < 2 {
        return Err(Error::InsufficientSamples("need at least two identities"));
    }

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let cos = |i: usize, j: usize| dot(&units[i], &units[j]).to_f64().unwrap_or(f64::NAN);

    let mean_intra = if intra_total <= max_pairs {
        let mut sum = 0.0;
        for group in by_label.values() {
            for (a, &i) in group.iter().enumerate() {
                for &j in &group[a + 1..] {
                    sum += cos(i, j);
                }
            }
        }
        sum / intra_total as f64
    } else {
        let mut sum = 0.0;
        let mut count = 0usize;
        while count < max_pairs {
            let i = rng.gen_range(0..n);
            let group = &by_label[&labels[i]];
            if group.len() < 2 {
                continue;
            }
            let j = group[rng.gen_range(0..group.len())];
            if j == i {
                continue;
            }
            sum += cos(i, j);
            count += 1;
        }
        sum / max_pairs as f64
    };

    let mut sum = 0.0;
    let mut count = 0usize;
    let mut attempts = 0usize;
    while count < max_pairs && attempts < max_pairs * 64 {
        attempts += 1;
        let i = rng.gen_range(0..n);
        let j = rng.gen_range(0..n);
        if labels[i] == labels[j] {
            continue;
        }
        sum += cos(i, j);
        count += 1;
    }
    if count == 0 {
        return Err(Error::InsufficientSamples("no cross-identity pair found"));
    }
    let mean_inter = sum / count as f64;

    Ok(SeparationMetrics {
        mean_intra_cos: mean_intra,
        mean_inter_cos: mean_inter,
        separation: mean_intra - mean_inter,
    })
}
