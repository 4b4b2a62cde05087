//! Ensemble-consensus dataset curation.
//!
//! Every pair's text is scored by each frozen expert against the full image
//! gallery of the unified dataset; the pair is kept when at least one expert
//! ranks its own image within the top K. Ranks are computed once and reused
//! for every K threshold, since filtering is a one-time preprocessing pass.

use crate::embedding::{dot, l2_norm, Modality, PairedDataset};
use crate::error::{Error, Result};
use crate::scalar::Real;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use std::collections::HashMap;
use std::time::Instant;

/// A frozen scoring function: precomputed unit-norm embedding tables for both
/// modalities, keyed by sample id.
#[derive(Debug, Clone)]
pub struct ExpertScorer<F> {
    pub expert_id: u32,
    text_embeddings: HashMap<u64, Vec<F>>,
    image_embeddings: HashMap<u64, Vec<F>>,
}

impl<F: Real> ExpertScorer<F> {
    pub fn new(
        expert_id: u32,
        text_embeddings: HashMap<u64, Vec<F>>,
        image_embeddings: HashMap<u64, Vec<F>>,
    ) -> Result<Self> {
        let unit_tol = crate::scalar::real::<F>(1e-6);
        for table in [&text_embeddings, &image_embeddings] {
            for v in table.values() {
                if (l2_norm(v) - F::one()).abs() > unit_tol {
                    return Err(Error::InvalidConfig(format!(
                        "expert {expert_id} embedding table contains a non-unit vector"
                    )));
                }
            }
        }
        Ok(Self {
            expert_id,
            text_embeddings,
            image_embeddings,
        })
    }

    pub fn text_embedding(&self, sample_id: u64) -> Option<&[F]> {
        self.text_embeddings.get(&sample_id).map(|v| v.as_slice())
    }

    pub fn image_embedding(&self, sample_id: u64) -> Option<&[F]> {
        self.image_embeddings.get(&sample_id).map(|v| v.as_slice())
    }
}

/// Per-pair retention decision with the per-expert full-gallery ranks behind it.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CurationMask {
    /// One flag per pair, in dataset order.
    pub delta: Vec<bool>,
    /// ranks[pair][expert], 1-based position of the pair's own image.
    pub ranks: Vec<Vec<usize>>,
    pub k: usize,
}

impl CurationMask {
    pub fn retained(&self) -> usize {
        self.delta.iter().filter(|&&d| d).count()
    }
}

/// Retention counts per source plus the overall figure.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RetentionReport {
    pub per_source: Vec<SourceRetention>,
    pub overall: SourceRetention,
    /// Not part of the serialized report bundle; see the CLI timing file.
    #[serde(skip)]
    pub wall_clock_secs: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SourceRetention {
    pub source_id: Option<u32>,
    pub retained: usize,
    pub total: usize,
    pub percent: f64,
}

/// 1-based rank of the ground-truth column in a similarity row: one plus the
/// number of strictly larger scores plus the number of equal scores at a
/// smaller index.
pub fn rank_of_ground_truth<F: Real>(sim_row: &[F], gt_index: usize) -> Result<usize> {
    if gt_index >= sim_row.len() {
        return Err(Error::IndexOutOfRange {
            index: gt_index,
            len: sim_row.len(),
        });
    }
    let gt = sim_row[gt_index];
    let mut rank = 1;
    for (j, &s) in sim_row.iter().enumerate() {
        if s > gt || (s == gt && j < gt_index) {
            rank += 1;
        }
    }
    Ok(rank)
}

/// Per-pair, per-expert ranks of each pair's own image against the full
/// gallery. This is the single ranking pass shared by [`curate`] and
/// [`retention_curve`].
pub fn compute_ranks<F: Real>(
    dataset: &PairedDataset<F>,
    experts: &[ExpertScorer<F>],
) -> Result<Vec<Vec<usize>>> {
    if experts.is_empty() {
        return Err(Error::EmptyInput("experts"));
    }
    if dataset.is_empty() {
        return Err(Error::EmptyInput("dataset"));
    }

    // Resolve every embedding up front so missing samples fail loudly.
    let mut galleries: Vec<Vec<&[F]>> = Vec::with_capacity(experts.len());
    let mut queries: Vec<Vec<&[F]>> = Vec::with_capacity(experts.len());
    for expert in experts {
        let mut gallery = Vec::with_capacity(dataset.len());
        let mut query = Vec::with_capacity(dataset.len());
        for pair in dataset.pairs() {
            gallery.push(expert.image_embedding(pair.image.sample_id).ok_or(
                Error::MissingEmbedding {
                    expert_id: expert.expert_id,
                    modality: Modality::Image,
                    sample_id: pair.image.sample_id,
                },
            )?);
            query.push(expert.text_embedding(pair.text.sample_id).ok_or(
                Error::MissingEmbedding {
                    expert_id: expert.expert_id,
                    modality: Modality::Text,
                    sample_id: pair.text.sample_id,
                },
            )?);
        }
        galleries.push(gallery);
        queries.push(query);
    }

    // ranks[pair][expert]; parallel over (expert, pair) work items, written
    // back by index so the result is independent of scheduling.
    let n = dataset.len();
    let per_expert: Vec<Vec<usize>> = (0..experts.len())
        .into_par_iter()
        .map(|l| {
            let gallery = &galleries[l];
            let query = &queries[l];
            (0..n)
                .into_par_iter()
                .map(|i| {
                    let row: Vec<F> = gallery.iter().map(|g| dot(query[i], g)).collect();
                    rank_of_ground_truth(&row, i).expect("gt index in range")
                })
                .collect()
        })
        .collect();

    Ok((0..n)
        .map(|i| per_expert.iter().map(|r| r[i]).collect())
        .collect())
}

/// Build the retention mask for precomputed ranks at threshold `k`.
pub fn mask_from_ranks(ranks: Vec<Vec<usize>>, k: usize, n: usize) -> Result<CurationMask> {
    if k == 0 || k > n {
        return Err(Error::KTooLarge { k, len: n });
    }
    let delta = ranks
        .iter()
        .map(|per_expert| per_expert.iter().any(|&r| r <= k))
        .collect();
    Ok(CurationMask { delta, ranks, k })
}

/// One-time ensemble curation pass: full-gallery ranking per expert, a pair
/// retained when any expert ranks its image within the top `k`.
pub fn curate<F: Real>(
    dataset: &PairedDataset<F>,
    experts: &[ExpertScorer<F>],
    k: usize,
) -> Result<(CurationMask, PairedDataset<F>, RetentionReport)> {
    let started = Instant::now();
    let ranks = compute_ranks(dataset, experts)?;
    let mask = mask_from_ranks(ranks, k, dataset.len())?;
    let clean = dataset.filter_by(&mask.delta)?;
    let mut report = retention_by_source(&mask, dataset)?;
    report.wall_clock_secs = started.elapsed().as_secs_f64();
    Ok((mask, clean, report))
}

/// Per-source and overall retention percentages for a mask.
pub fn retention_by_source<F: Real>(
    mask: &CurationMask,
    dataset: &PairedDataset<F>,
) -> Result<RetentionReport> {
    if mask.delta.len() != dataset.len() {
        return Err(Error::LengthMismatch {
            left: mask.delta.len(),
            right: dataset.len(),
        });
    }
    let mut totals: HashMap<u32, (usize, usize)> = HashMap::new();
    for (pair, &kept) in dataset.pairs().iter().zip(&mask.delta) {
        let entry = totals.entry(pair.image.source_id).or_insert((0, 0));
        entry.1 += 1;
        if kept {
            entry.0 += 1;
        }
    }
    let mut per_source: Vec<SourceRetention> = totals
        .into_iter()
        .map(|(source_id, (retained, total))| SourceRetention {
            source_id: Some(source_id),
            retained,
            total,
            percent: percent(retained, total),
        })
        .collect();
    per_source.sort_by_key(|s| s.source_id);
    let retained = mask.retained();
    let overall = SourceRetention {
        source_id: None,
        retained,
        total: dataset.len(),
        percent: percent(retained, dataset.len()),
    };
    Ok(RetentionReport {
        per_source,
        overall,
        wall_clock_secs: 0.0,
    })
}

/// Overall retention percentage across a sweep of K values, reusing one
/// ranking pass.
pub fn retention_curve<F: Real>(
    dataset: &PairedDataset<F>,
    experts: &[ExpertScorer<F>],
    k_values: &[usize],
) -> Result<Vec<(usize, f64)>> {
    if k_values.windows(2).any(|w| w[0] > w[1]) {
        return Err(Error::InvalidConfig(
            "k_values must be sorted ascending".into(),
        ));
    }
    let ranks = compute_ranks(dataset, experts)?;
    let n = dataset.len();
    k_values
        .iter()
        .map(|&k| {
            if k == 0 || k > n {
                return Err(Error::KTooLarge { k, len: n });
            }
            let retained = ranks
                .iter()
                .filter(|per_expert| per_expert.iter().any(|&r| r <= k))
                .count();
            Ok((k, percent(retained, n)))
        })
        .collect()
}

fn percent(part: usize, whole: usize) -> f64 {
    if whole == 0 {
        0.0
    } else {
        100.0 * part as f64 / whole as f64
    }
}
