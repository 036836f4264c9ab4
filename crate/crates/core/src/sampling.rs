//! Negative-query selection.
//!
//! A negative query comes from the same video as the target and must be both
//! temporally distinct (IoU below a threshold) and semantically distinct
//! (sentence-embedding cosine below a threshold). When nothing qualifies the
//! caller falls back to the positive-only path.

use rand::Rng;

use crate::temporal::{iou, Span};
use crate::tensor::Tensor;

/// One language query: identifier, per-token embeddings, sentence embedding,
/// and its ground-truth span inside `video_id`.
#[derive(Debug, Clone)]
pub struct QueryRecord {
    pub qid: String,
    pub video_id: String,
    pub span: Span,
    pub token_embeddings: Tensor,
    pub sentence_embedding: Tensor,
}

#[derive(Debug, Clone, Copy)]
pub struct NegativeSamplerConfig {
    pub iou_threshold: f64,
    pub similarity_threshold: f64,
}

impl NegativeSamplerConfig {
    pub fn new(iou_threshold: f64, similarity_threshold: f64) -> Self {
        assert!(
            (0.0..=1.0).contains(&iou_threshold),
            "iou threshold {iou_threshold} outside [0, 1]"
        );
        assert!(
            (-1.0..=1.0).contains(&similarity_threshold),
            "similarity threshold {similarity_threshold} outside [-1, 1]"
        );
        NegativeSamplerConfig {
            iou_threshold,
            similarity_threshold,
        }
    }

    /// Thresholds maxed out: every same-video query is eligible, reducing
    /// selection to uniform sampling (the no-sampling-strategy ablation).
    pub fn disabled() -> Self {
        NegativeSamplerConfig {
            iou_threshold: 1.0 + 1e-9,
            similarity_threshold: 1.0 + 1e-9,
        }
    }
}

impl Default for NegativeSamplerConfig {
    fn default() -> Self {
        NegativeSamplerConfig::new(0.5, 0.5)
    }
}

/// Cosine similarity of two equal-length vectors; zero when either vector is
/// zero.
pub fn cosine_similarity(a: &Tensor, b: &Tensor) -> f64 {
    assert_eq!(
        a.numel(),
        b.numel(),
        "cosine: length mismatch {} vs {}",
        a.numel(),
        b.numel()
    );
    cosine_slices(a.data(), b.data())
}

pub fn cosine_slices(a: &[f64], b: &[f64]) -> f64 {
    assert_eq!(a.len(), b.len(), "cosine: length mismatch {} vs {}", a.len(), b.len());
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let na: f64 = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb: f64 = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    if na == 0.0 || nb == 0.0 {
        return 0.0;
    }
    dot / (na * nb)
}

/// Indices of pool entries eligible as negatives for `target`.
pub fn eligible_negatives(
    target: &QueryRecord,
    pool: &[QueryRecord],
    cfg: &NegativeSamplerConfig,
) -> Vec<usize> {
    pool.iter()
        .enumerate()
        .filter(|(_, q)| {
            assert_eq!(
                q.video_id, target.video_id,
                "negative pool crosses videos: {} vs {}",
                q.video_id, target.video_id
            );
            debug_assert_ne!(q.qid, target.qid, "target must not be in its own pool");
            iou(&q.span, &target.span) < cfg.iou_threshold
                && cosine_similarity(&q.sentence_embedding, &target.sentence_embedding)
                    < cfg.similarity_threshold
        })
        .map(|(i, _)| i)
        .collect()
}

/// Uniformly sample one eligible negative from the pool, or `None` when the
/// eligible set is empty.
pub fn select_negative<'p>(
    target: &QueryRecord,
    pool: &'p [QueryRecord],
    cfg: &NegativeSamplerConfig,
    rng: &mut impl Rng,
) -> Option<&'p QueryRecord> {
    let eligible = eligible_negatives(target, pool, cfg);
    if eligible.is_empty() {
        return None;
    }
    let pick = eligible[rng.gen_range(0..eligible.len())];
    Some(&pool[pick])
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn record(qid: &str, video: &str, span: (f64, f64), emb: Vec<f64>) -> QueryRecord {
        QueryRecord {
            qid: qid.into(),
            video_id: video.into(),
            span: Span::seconds(span.0, span.1),
            token_embeddings: Tensor::zeros(vec![1, 4]),
            sentence_embedding: Tensor::from_vec(vec![emb.len()], emb),
        }
    }

    #[test]
    fn cosine_basics() {
        let a = Tensor::from_vec(vec![2], vec![1.0, 0.0]);
        let b = Tensor::from_vec(vec![2], vec![0.0, 1.0]);
        assert_abs_diff_eq!(cosine_similarity(&a, &a), 1.0, epsilon = 1e-15);
        assert_abs_diff_eq!(cosine_similarity(&a, &b), 0.0);
        let c = Tensor::from_vec(vec![2], vec![1.0, 1.0]);
        assert_abs_diff_eq!(
            cosine_similarity(&a, &c),
            std::f64::consts::FRAC_1_SQRT_2,
            epsilon = 1e-12
        );
        let zero = Tensor::zeros(vec![2]);
        assert_eq!(cosine_similarity(&a, &zero), 0.0);
    }

    #[test]
    #[should_panic(expected = "length mismatch")]
    fn cosine_length_mismatch_rejected() {
        let a = Tensor::zeros(vec![2]);
        let b = Tensor::zeros(vec![3]);
        cosine_similarity(&a, &b);
    }

    #[test]
    fn empty_pool_gives_none() {
        let target = record("q0", "v", (0.0, 5.0), vec![1.0, 0.0]);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        assert!(select_negative(&target, &[], &NegativeSamplerConfig::default(), &mut rng).is_none());
    }

    #[test]
    fn single_eligible_candidate_always_selected() {
        let target = record("q0", "v", (0.0, 5.0), vec![1.0, 0.0]);
        let pool = vec![record("q1", "v", (10.0, 15.0), vec![0.0, 1.0])];
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let got = select_negative(&target, &pool, &NegativeSamplerConfig::default(), &mut rng);
        assert_eq!(got.unwrap().qid, "q1");
    }

    #[test]
    fn iou_filter_removes_overlapping_candidate() {
        // IoUs {0.6, ~0.1} against threshold 0.5 with low similarities:
        // the second candidate is the only survivor.
        let target = record("q0", "v", (0.0, 10.0), vec![1.0, 0.0]);
        let cand_a = record("q1", "v", (2.0, 8.0), vec![0.1, 1.0]); // inter 6, union 10
        let cand_b = record("q2", "v", (9.0, 15.0), vec![0.1, 1.0]); // inter 1, union 15
        assert_abs_diff_eq!(iou(&cand_a.span, &target.span), 0.6, epsilon = 1e-12);
        let pool = vec![cand_a, cand_b];
        let cfg = NegativeSamplerConfig::new(0.5, 0.5);
        for seed in 0..32 {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let got = select_negative(&target, &pool, &cfg, &mut rng).unwrap();
            assert_eq!(got.qid, "q2");
        }
    }

    #[test]
    #[should_panic(expected = "crosses videos")]
    fn cross_video_pool_rejected() {
        let target = record("q0", "v", (0.0, 5.0), vec![1.0, 0.0]);
        let pool = vec![record("q1", "other", (10.0, 15.0), vec![0.0, 1.0])];
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        select_negative(&target, &pool, &NegativeSamplerConfig::default(), &mut rng);
    }

    #[test]
    fn returned_negative_respects_both_thresholds() {
        // Exhaustive randomized check: a returned candidate never violates
        // either filter.
        let mut rng = ChaCha8Rng::seed_from_u64(42);
        let cfg = NegativeSamplerConfig::new(0.5, 0.5);
        for trial in 0..10_000 {
            let target = record("t", "v", (2.0, 6.0), vec![1.0, 0.0, 0.0]);
            let pool: Vec<QueryRecord> = (0..4)
                .map(|i| {
                    let s = rng.gen_range(0.0..8.0);
                    let l = rng.gen_range(0.1..4.0);
                    let emb = vec![
                        rng.gen_range(-1.0..1.0),
                        rng.gen_range(-1.0..1.0),
                        rng.gen_range(-1.0..1.0),
                    ];
                    record(&format!("q{trial}_{i}"), "v", (s, s + l), emb)
                })
                .collect();
            if let Some(neg) = select_negative(&target, &pool, &cfg, &mut rng) {
                assert!(iou(&neg.span, &target.span) < cfg.iou_threshold);
                assert!(
                    cosine_similarity(&neg.sentence_embedding, &target.sentence_embedding)
                        < cfg.similarity_threshold
                );
            }
        }
    }

    #[test]
    fn fixed_seed_is_deterministic() {
        let target = record("q0", "v", (0.0, 2.0), vec![1.0, 0.0]);
        let pool: Vec<QueryRecord> = (0..6)
            .map(|i| record(&format!("q{}", i + 1), "v", (4.0 + i as f64, 5.0 + i as f64), vec![0.0, 1.0]))
            .collect();
        let cfg = NegativeSamplerConfig::default();
        let mut a = ChaCha8Rng::seed_from_u64(9);
        let mut b = ChaCha8Rng::seed_from_u64(9);
        for _ in 0..20 {
            let x = select_negative(&target, &pool, &cfg, &mut a).map(|q| q.qid.clone());
            let y = select_negative(&target, &pool, &cfg, &mut b).map(|q| q.qid.clone());
            assert_eq!(x, y);
        }
    }

    #[test]
    fn disabled_filters_reduce_to_uniform_sampling() {
        // Every candidate must be reachable, including ones the filters
        // would normally drop (identical embedding, full overlap).
        let target = record("q0", "v", (0.0, 5.0), vec![1.0, 0.0]);
        let pool = vec![
            record("dup", "v", (0.0, 5.0), vec![1.0, 0.0]),
            record("far", "v", (8.0, 9.0), vec![0.0, 1.0]),
        ];
        let cfg = NegativeSamplerConfig::disabled();
        let mut seen = std::collections::HashSet::new();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for _ in 0..64 {
            seen.insert(select_negative(&target, &pool, &cfg, &mut rng).unwrap().qid.clone());
        }
        assert_eq!(seen.len(), 2);
    }
}
