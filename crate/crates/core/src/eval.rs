//! Text-to-image retrieval protocol: Rank-k accuracy and mean Average
//! Precision over the full test gallery.
//!
//! Relevance is identity match: every gallery image sharing the query's
//! person id counts, and the query's own paired image is not excluded. Ties
//! in scores resolve toward the smaller gallery index everywhere.

use crate::embedding::{l2_normalize, similarity_matrix, PairedDataset, SimilarityMatrix};
use crate::error::{Error, Result};
use crate::nnn::{compute_bias, normalize_scores, NnnConfig};
use crate::scalar::Real;
use crate::train::EncoderParams;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use std::collections::{BTreeMap, HashSet};

/// Default Rank-k cutoffs.
pub const DEFAULT_RANK_KS: [usize; 3] = [1, 5, 10];

/// Rank-k percentages, mAP, and the per-query APs behind it.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct MetricSummary {
    /// k -> percent of queries with a relevant item in the top k.
    pub rank_k: BTreeMap<usize, f64>,
    /// Mean of per-query AP, in percent.
    pub map_percent: f64,
    /// Average precision per query, as fractions in [0, 1].
    pub per_query_ap: Vec<f64>,
}

/// Raw (and optionally normalized) score matrices with their metrics.
#[derive(Debug, Clone)]
pub struct RetrievalResult<F> {
    pub raw_scores: SimilarityMatrix<F>,
    pub normalized_scores: Option<SimilarityMatrix<F>>,
    pub raw_metrics: MetricSummary,
    pub normalized_metrics: Option<MetricSummary>,
}

/// Full descending ranking of one score row, ties toward the smaller index.
fn ranking<F: Real>(row: &[F]) -> Vec<usize> {
    crate::embedding::top_k_indices(row, row.len()).expect("k equals row length")
}

fn check_relevance<F: Real>(
    scores: &SimilarityMatrix<F>,
    relevance: &[HashSet<usize>],
) -> Result<()> {
    if relevance.len() != scores.rows() {
        return Err(Error::LengthMismatch {
            left: relevance.len(),
            right: scores.rows(),
        });
    }
    for (q, set) in relevance.iter().enumerate() {
        if set.is_empty() {
            return Err(Error::NoRelevantItems { query: q });
        }
        if let Some(&bad) = set.iter().find(|&&g| g >= scores.cols()) {
            return Err(Error::IndexOutOfRange {
                index: bad,
                len: scores.cols(),
            });
        }
    }
    Ok(())
}

/// Percent of queries whose top-k retrieved gallery indices intersect their
/// relevance set, for each requested k.
pub fn rank_k_accuracy<F: Real>(
    scores: &SimilarityMatrix<F>,
    relevance: &[HashSet<usize>],
    ks: &[usize],
) -> Result<BTreeMap<usize, f64>> {
    check_relevance(scores, relevance)?;
    for &k in ks {
        if k == 0 || k > scores.cols() {
            return Err(Error::KTooLarge {
                k,
                len: scores.cols(),
            });
        }
    }
    // 1-based rank of the first relevant item per query.
    let first_hit: Vec<usize> = (0..scores.rows())
        .into_par_iter()
        .map(|q| {
            let order = ranking(scores.row(q));
            order
                .iter()
                .position(|g| relevance[q].contains(g))
                .expect("relevance nonempty")
                + 1
        })
        .collect();
    let total = scores.rows() as f64;
    Ok(ks
        .iter()
        .map(|&k| {
            let hits = first_hit.iter().filter(|&&r| r <= k).count();
            (k, 100.0 * hits as f64 / total)
        })
        .collect())
}

/// Mean Average Precision in percent, plus the per-query AP fractions.
///
/// AP per query: walk the ranked gallery; at each relevant item of rank p,
/// add (relevant seen so far)/p; divide by the query's relevant count.
pub fn mean_average_precision<F: Real>(
    scores: &SimilarityMatrix<F>,
    relevance: &[HashSet<usize>],
) -> Result<(f64, Vec<f64>)> {
    check_relevance(scores, relevance)?;
    let per_query: Vec<f64> = (0..scores.rows())
        .into_par_iter()
        .map(|q| {
            let order = ranking(scores.row(q));
            let mut seen = 0usize;
            let mut sum = 0.0f64;
            for (pos, g) in order.iter().enumerate() {
                if relevance[q].contains(g) {
                    seen += 1;
                    sum += seen as f64 / (pos + 1) as f64;
                }
            }
            sum / relevance[q].len() as f64
        })
        .collect();
    let map = per_query.iter().sum::<f64>() / per_query.len() as f64 * 100.0;
    Ok((map, per_query))
}

/// Metrics for a score matrix under the standard cutoffs (capped at the
/// gallery size).
pub fn evaluate_scores<F: Real>(
    scores: &SimilarityMatrix<F>,
    relevance: &[HashSet<usize>],
) -> Result<MetricSummary> {
    let ks: Vec<usize> = DEFAULT_RANK_KS
        .iter()
        .copied()
        .filter(|&k| k <= scores.cols())
        .collect();
    let rank_k = rank_k_accuracy(scores, relevance, &ks)?;
    let (map_percent, per_query_ap) = mean_average_precision(scores, relevance)?;
    Ok(MetricSummary {
        rank_k,
        map_percent,
        per_query_ap,
    })
}

/// Identity-match relevance sets: gallery images sharing each query's person id.
pub fn identity_relevance(query_ids: &[u32], gallery_ids: &[u32]) -> Vec<HashSet<usize>> {
    query_ids
        .iter()
        .map(|qid| {
            gallery_ids
                .iter()
                .enumerate()
                .filter(|(_, gid)| *gid == qid)
                .map(|(g, _)| g)
                .collect()
        })
        .collect()
}

/// Embed a test set and score every text query against the full image
/// gallery; with an NNN config, also report bias-normalized metrics.
///
/// `reference_queries` supplies a held-out reference set for the bias
/// estimate; by default the bias is transductive, computed from the test
/// queries themselves.
pub fn run_protocol<F: Real>(
    encoder: &EncoderParams<F>,
    test_set: &PairedDataset<F>,
    nnn_cfg: Option<&NnnConfig>,
    reference_queries: Option<&[Vec<F>]>,
) -> Result<RetrievalResult<F>> {
    if test_set.is_empty() {
        return Err(Error::EmptyInput("test set"));
    }
    let in_dim = test_set.pairs()[0].image.vector.len();
    if encoder.in_dim() != in_dim {
        return Err(Error::DimensionMismatch {
            expected: encoder.in_dim(),
            got: in_dim,
        });
    }

    let mut gallery = Vec::with_capacity(test_set.len());
    let mut queries = Vec::with_capacity(test_set.len());
    for pair in test_set.pairs() {
        let img_in = l2_normalize(&pair.image.vector)?;
        let txt_in = l2_normalize(&pair.text.vector)?;
        gallery.push(l2_normalize(&encoder.image.forward(&img_in))?);
        queries.push(l2_normalize(&encoder.text.forward(&txt_in))?);
    }
    let ids: Vec<u32> = test_set.pairs().iter().map(|p| p.person_id).collect();
    let relevance = identity_relevance(&ids, &ids);

    let raw_scores = similarity_matrix(&queries, &gallery)?;
    let raw_metrics = evaluate_scores(&raw_scores, &relevance)?;

    let (normalized_scores, normalized_metrics) = match nnn_cfg {
        Some(cfg) => {
            let refs = reference_queries.unwrap_or(&queries);
            let bias = compute_bias(&gallery, refs, cfg)?;
            let scores = normalize_scores(&raw_scores, &bias)?;
            let metrics = evaluate_scores(&scores, &relevance)?;
            (Some(scores), Some(metrics))
        }
        None => (None, None),
    };

    Ok(RetrievalResult {
        raw_scores,
        normalized_scores,
        raw_metrics,
        normalized_metrics,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::embedding::{EmbeddingRecord, Modality, Pair};

    fn scores_from(rows: Vec<Vec<f64>>) -> SimilarityMatrix<f64> {
        let r = rows.len();
        let c = rows[0].len();
        SimilarityMatrix::from_values(r, c, rows.into_iter().flatten().collect()).unwrap()
    }

    fn single_relevance(targets: &[usize]) -> Vec<HashSet<usize>> {
        targets.iter().map(|&t| HashSet::from([t])).collect()
    }

    #[test]
    fn perfect_ranking_is_hundred_everywhere() {
        let scores = scores_from(vec![vec![0.9, 0.1, 0.0], vec![0.2, 0.95, 0.1]]);
        let rel = single_relevance(&[0, 1]);
        let acc = rank_k_accuracy(&scores, &rel, &[1, 2, 3]).unwrap();
        assert!(acc.values().all(|&v| v == 100.0));
        let (map, _) = mean_average_precision(&scores, &rel).unwrap();
        assert_eq!(map, 100.0);
    }

    #[test]
    fn relevant_at_sixth_position() {
        // One query, 10 columns, relevant item ranked exactly 6th.
        let mut row = vec![0.0f64; 10];
        for (i, v) in row.iter_mut().enumerate() {
            *v = 1.0 - 0.04 * i as f64; // strictly decreasing
        }
        let rel = single_relevance(&[5]);
        let scores = scores_from(vec![row]);
        let acc = rank_k_accuracy(&scores, &rel, &[1, 5, 10]).unwrap();
        assert_eq!(acc[&1], 0.0);
        assert_eq!(acc[&5], 0.0);
        assert_eq!(acc[&10], 100.0);
    }

    #[test]
    fn ap_two_relevant_at_ranks_one_and_three() {
        let scores = scores_from(vec![vec![0.9, 0.8, 0.7, 0.1]]);
        let rel = vec![HashSet::from([0usize, 2])];
        let (map, ap) = mean_average_precision(&scores, &rel).unwrap();
        assert!((ap[0] - 5.0 / 6.0).abs() < 1e-15);
        assert!((map - 500.0 / 6.0).abs() < 1e-12);
    }

    #[test]
    fn empty_relevance_rejected() {
        let scores = scores_from(vec![vec![0.5, 0.2]]);
        let rel = vec![HashSet::new()];
        assert!(matches!(
            mean_average_precision(&scores, &rel),
            Err(Error::NoRelevantItems { query: 0 })
        ));
    }

    #[test]
    fn rank_k_nondecreasing_in_k() {
        let scores = scores_from(vec![
            vec![0.1, 0.9, 0.3, 0.2],
            vec![0.4, 0.2, 0.8, 0.5],
            vec![0.6, 0.1, 0.2, 0.9],
        ]);
        let rel = single_relevance(&[0, 1, 2]);
        let acc = rank_k_accuracy(&scores, &rel, &[1, 2, 3, 4]).unwrap();
        let vals: Vec<f64> = acc.values().copied().collect();
        assert!(vals.windows(2).all(|w| w[0] <= w[1]));
    }

    #[test]
    fn map_invariant_under_monotone_row_transform() {
        let rows = vec![vec![0.1, 0.7, 0.4, -0.2], vec![0.5, -0.1, 0.3, 0.6]];
        let rel = single_relevance(&[1, 3]);
        let base = scores_from(rows.clone());
        let squashed = scores_from(
            rows.iter()
                .map(|r| r.iter().map(|&x| (3.0 * x).tanh()).collect())
                .collect(),
        );
        let (a, _) = mean_average_precision(&base, &rel).unwrap();
        let (b, _) = mean_average_precision(&squashed, &rel).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn single_relevant_map_is_mean_reciprocal_rank() {
        let scores = scores_from(vec![
            vec![0.2, 0.9, 0.5, 0.1],
            vec![0.8, 0.3, 0.4, 0.6],
            vec![0.1, 0.2, 0.3, 0.9],
        ]);
        let targets = [2usize, 0, 0];
        let rel = single_relevance(&targets);
        let (map, _) = mean_average_precision(&scores, &rel).unwrap();
        let mut mrr = 0.0;
        for (q, &t) in targets.iter().enumerate() {
            let order = crate::embedding::top_k_indices(scores.row(q), 4).unwrap();
            let rank = order.iter().position(|&g| g == t).unwrap() + 1;
            mrr += 1.0 / rank as f64;
        }
        mrr = mrr / 3.0 * 100.0;
        assert!((map - mrr).abs() < 1e-12);
    }

    fn perfect_test_set(n: usize) -> PairedDataset<f64> {
        // Text vector equals its paired image vector, all identities distinct.
        let pairs = (0..n)
            .map(|i| {
                let mut v = vec![0.1f64; n];
                v[i] = 2.0;
                Pair {
                    image: EmbeddingRecord {
                        sample_id: i as u64,
                        person_id: i as u32,
                        source_id: 0,
                        modality: Modality::Image,
                        vector: v.clone(),
                    },
                    text: EmbeddingRecord {
                        sample_id: i as u64,
                        person_id: i as u32,
                        source_id: 0,
                        modality: Modality::Text,
                        vector: v,
                    },
                    person_id: i as u32,
                }
            })
            .collect();
        PairedDataset::new(pairs).unwrap()
    }

    #[test]
    fn identity_encoder_perfect_correspondence() {
        let ds = perfect_test_set(6);
        let encoder = EncoderParams::<f64>::identity(6);
        let cfg = NnnConfig::new(0.75, 3).unwrap();
        let result = run_protocol(&encoder, &ds, Some(&cfg), None).unwrap();
        assert_eq!(result.raw_metrics.rank_k[&1], 100.0);
        assert_eq!(result.raw_metrics.map_percent, 100.0);
        let normalized = result.normalized_metrics.unwrap();
        assert_eq!(normalized.rank_k[&1], 100.0);
        assert_eq!(normalized.map_percent, 100.0);
    }

    #[test]
    fn protocol_without_nnn_has_no_normalized_output() {
        let ds = perfect_test_set(4);
        let encoder = EncoderParams::<f64>::identity(4);
        let result = run_protocol(&encoder, &ds, None, None).unwrap();
        assert!(result.normalized_scores.is_none());
        assert!(result.normalized_metrics.is_none());
    }
}
