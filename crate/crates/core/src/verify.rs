//! Self-verification suites: gradient checks against finite differences,
//! assignment and metric oracles, geometry properties, probability
//! contracts, and format round-trips. Shared by the `verify` CLI command and
//! the acceptance tests.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::data::features::{read_features, write_features, FeatureMatrix};
use crate::metrics::{average_precision, rank_predictions, recall_at, QueryEval, RankedPredictions};
use crate::model::joint_probability;
use crate::temporal::{giou, iou, Span};
use crate::tensor::{grad_check, Tape, Tensor};
use crate::training::matching::{brute_force_assign, hungarian_assign};
use crate::training::{
    class_loss, frame_prob_loss, margin_loss, moment_loss, semantic_alignment_loss,
    spans_to_start_end, total_loss, FrameIndexSets, LossWeights,
};

#[derive(Debug, Clone)]
pub struct SuiteResult {
    pub name: &'static str,
    pub passed: bool,
    pub detail: String,
}

impl SuiteResult {
    fn ok(name: &'static str, detail: impl Into<String>) -> Self {
        SuiteResult {
            name,
            passed: true,
            detail: detail.into(),
        }
    }

    fn fail(name: &'static str, detail: impl Into<String>) -> Self {
        SuiteResult {
            name,
            passed: false,
            detail: detail.into(),
        }
    }
}

pub const GRAD_TOLERANCE: f64 = 1e-4;
pub const GRAD_TRIALS: usize = 100;

/// Draw a (gt, prediction) pair staying clear of the L1/IoU kinks so central
/// differences are valid.
fn non_kink_span_pair(rng: &mut ChaCha8Rng) -> ((f64, f64), Tensor) {
    loop {
        let gs = rng.gen_range(0.05..0.6);
        let ge = gs + rng.gen_range(0.1..0.35);
        // Unconstrained (center, width) for the prediction.
        let c_raw: f64 = rng.gen_range(-1.5..1.5);
        let w_raw: f64 = rng.gen_range(-2.0..0.5);
        let c = 1.0 / (1.0 + (-c_raw).exp());
        let w = 1.0 / (1.0 + (-w_raw).exp());
        let (ps, pe) = (c - w / 2.0, c + w / 2.0);
        let clearance = 1e-3;
        let kinks = [ps - gs, pe - ge, pe - gs, ps - ge];
        if kinks.iter().all(|d| d.abs() > clearance) {
            return ((gs, ge), Tensor::from_vec(vec![1, 2], vec![c_raw, w_raw]));
        }
    }
}

/// Gradient checks at `GRAD_TRIALS` random non-kink points for each loss:
/// moment, margin, frame-probability, semantic alignment, class, and the
/// weighted total.
pub fn gradient_suite() -> SuiteResult {
    let name = "gradient-checks";
    let w = LossWeights::default();
    let mut rng = ChaCha8Rng::seed_from_u64(0x67726164);
    let mut worst: f64 = 0.0;
    let mut worst_loss = "";

    for trial in 0..GRAD_TRIALS {
        // Moment loss wrt unconstrained (center, width).
        let (gt, x) = non_kink_span_pair(&mut rng);
        let err = grad_check(
            |t, raw| {
                let sq = t.sigmoid(raw);
                let (s, e) = spans_to_start_end(t, sq);
                moment_loss(t, s, e, gt, &w)
            },
            &x,
            1e-5,
        );
        if err > worst {
            worst = err;
            worst_loss = "moment";
        }

        // Margin loss wrt frame features, pairs kept off the hinge kink.
        let n = 6;
        let d = 4;
        let feats = loop {
            let cand = Tensor::from_vec(
                vec![n, d],
                (0..n * d).map(|_| rng.gen_range(-1.0..1.0)).collect(),
            );
            let wm: Vec<f64> = vec![0.7, -0.4, 0.2, 0.5];
            let scores: Vec<f64> = (0..n)
                .map(|i| {
                    cand.data()[i * d..(i + 1) * d]
                        .iter()
                        .zip(&wm)
                        .map(|(a, b)| a * b)
                        .sum()
                })
                .collect();
            let clear = (0..3).all(|f| {
                (3..6).all(|b| (0.2 + scores[b] - scores[f]).abs() > 1e-3)
            });
            if clear {
                break cand;
            }
        };
        let sets = FrameIndexSets {
            fore: vec![0, 1, 2],
            back: vec![3, 4, 5],
        };
        let err = grad_check(
            |t, f| {
                let wm = t.constant(vec![d, 1], vec![0.7, -0.4, 0.2, 0.5]);
                let mut pair_rng = ChaCha8Rng::seed_from_u64(trial as u64);
                margin_loss(t, f, &sets, wm, w.margin, 256, &mut pair_rng)
            },
            &feats,
            1e-5,
        );
        if err > worst {
            worst = err;
            worst_loss = "margin";
        }

        // Frame-probability loss wrt pre-sigmoid frame logits.
        let logits = Tensor::from_vec(vec![8], (0..8).map(|_| rng.gen_range(-2.0..2.0)).collect());
        let sets8 = FrameIndexSets {
            fore: vec![1, 2, 3],
            back: vec![0, 4, 5, 6, 7],
        };
        let err = grad_check(
            |t, x| {
                let p = t.sigmoid(x);
                frame_prob_loss(t, p, &sets8)
            },
            &logits,
            1e-5,
        );
        if err > worst {
            worst = err;
            worst_loss = "frame-probability";
        }

        // Semantic alignment loss wrt a batch of pooled vectors.
        let batch = 3;
        let dim = 5;
        let pooled = Tensor::from_vec(
            vec![batch * 2, dim],
            (0..batch * 2 * dim)
                .map(|_| rng.gen_range(-1.0..1.0))
                .collect(),
        );
        let err = grad_check(
            |t, all| {
                let mut scores = Vec::new();
                for i in 0..batch {
                    let vi = t.slice_rows(all, i, i + 1);
                    let mut row = Vec::new();
                    for j in 0..batch {
                        let qj = t.slice_rows(all, batch + j, batch + j + 1);
                        row.push(crate::model::semantic_score(t, vi, qj));
                    }
                    scores.push(row);
                }
                semantic_alignment_loss(t, &scores, &w)
            },
            &pooled,
            1e-5,
        );
        if err > worst {
            worst = err;
            worst_loss = "semantic";
        }

        // Class loss wrt logits.
        let m = 4;
        let logits = Tensor::from_vec(
            vec![m, 2],
            (0..m * 2).map(|_| rng.gen_range(-2.0..2.0)).collect(),
        );
        let matched = vec![rng.gen_range(0..m)];
        let err = grad_check(
            |t, l| class_loss(t, l, &matched, &w),
            &logits,
            1e-5,
        );
        if err > worst {
            worst = err;
            worst_loss = "class";
        }

        // Weighted total of smooth components wrt shared inputs.
        let (gt2, x2) = non_kink_span_pair(&mut rng);
        let err = grad_check(
            |t, raw| {
                let sq = t.sigmoid(raw);
                let (s, e) = spans_to_start_end(t, sq);
                let moment = moment_loss(t, s, e, gt2, &w);
                let zero = t.constant_scalar(0.0);
                let nodes = total_loss(t, moment, zero, zero, zero, zero, &w);
                nodes.total
            },
            &x2,
            1e-5,
        );
        if err > worst {
            worst = err;
            worst_loss = "total";
        }
    }

    if worst < GRAD_TOLERANCE {
        SuiteResult::ok(
            name,
            format!("{GRAD_TRIALS} trials per loss, max relative error {worst:.2e}"),
        )
    } else {
        SuiteResult::fail(
            name,
            format!("{worst_loss} loss gradient error {worst:.2e} >= {GRAD_TOLERANCE:.0e}"),
        )
    }
}

/// Hungarian assignment equals exhaustive search on random matrices with
/// up to 4 rows and 6 columns.
pub fn hungarian_suite(instances: usize) -> SuiteResult {
    let name = "hungarian-oracle";
    let mut rng = ChaCha8Rng::seed_from_u64(0x68756e67);
    for k in 0..instances {
        let rows = rng.gen_range(1..=4);
        let cols = rng.gen_range(rows..=6);
        let costs: Vec<Vec<f64>> = (0..rows)
            .map(|_| (0..cols).map(|_| rng.gen_range(-10.0..10.0)).collect())
            .collect();
        let fast = hungarian_assign(&costs);
        let slow = brute_force_assign(&costs);
        if (fast.total_cost - slow.total_cost).abs() > 1e-9 {
            return SuiteResult::fail(
                name,
                format!(
                    "instance {k}: hungarian {} vs brute force {}",
                    fast.total_cost, slow.total_cost
                ),
            );
        }
    }
    SuiteResult::ok(name, format!("{instances} random instances, zero discrepancies"))
}

/// IoU/gIoU ranges, ordering, symmetry, and exact hand values, over a
/// caller-supplied gIoU (so a broken implementation is caught by name).
pub fn geometry_properties(
    pairs: usize,
    giou_fn: impl Fn(&Span, &Span) -> f64,
) -> Result<String, String> {
    let mut rng = ChaCha8Rng::seed_from_u64(0x67656f6d);
    for _ in 0..pairs {
        let s1 = rng.gen_range(0.0..50.0);
        let a = Span::seconds(s1, s1 + rng.gen_range(0.01..20.0));
        let s2 = rng.gen_range(0.0..50.0);
        let b = Span::seconds(s2, s2 + rng.gen_range(0.01..20.0));
        let i = iou(&a, &b);
        let g = giou_fn(&a, &b);
        if !(0.0..=1.0).contains(&i) {
            return Err(format!("iou {i} outside [0, 1] for {a:?} vs {b:?}"));
        }
        if g > i + 1e-12 {
            return Err(format!("giou {g} exceeds iou {i} for {a:?} vs {b:?}"));
        }
        if !(g > -1.0 && g <= 1.0 + 1e-12) {
            return Err(format!("giou {g} outside (-1, 1] for {a:?} vs {b:?}"));
        }
        if (i - iou(&b, &a)).abs() > 1e-12 {
            return Err("iou asymmetry".into());
        }
        if (g - giou_fn(&b, &a)).abs() > 1e-12 {
            return Err("giou asymmetry".into());
        }
    }
    // Exact hand values.
    let a = Span::seconds(0.0, 0.5);
    let b = Span::seconds(0.25, 0.75);
    if (iou(&a, &b) - 1.0 / 3.0).abs() > 1e-12 {
        return Err(format!("iou hand case: got {}, want 1/3", iou(&a, &b)));
    }
    let c = Span::seconds(0.0, 1.0);
    let d = Span::seconds(2.0, 3.0);
    if (giou_fn(&c, &d) + 1.0 / 3.0).abs() > 1e-12 {
        return Err(format!("giou hand case: got {}, want -1/3", giou_fn(&c, &d)));
    }
    Ok(format!("{pairs} random pairs + hand cases within 1e-12"))
}

pub fn geometry_suite(pairs: usize) -> SuiteResult {
    let name = "geometry-properties";
    match geometry_properties(pairs, giou) {
        Ok(detail) => SuiteResult::ok(name, detail),
        Err(e) => SuiteResult::fail(name, e),
    }
}

/// p_joint == p_pos * (1 - p_neg) within 1e-12; absent negative is the
/// identity on the positive path.
pub fn joint_probability_suite(trials: usize) -> SuiteResult {
    let name = "joint-probability-contract";
    let mut rng = ChaCha8Rng::seed_from_u64(0x6a6f696e);
    for _ in 0..trials {
        let n = rng.gen_range(1..40);
        let p_pos: Vec<f64> = (0..n).map(|_| rng.gen_range(0.0..1.0)).collect();
        let p_neg: Vec<f64> = (0..n).map(|_| rng.gen_range(0.0..1.0)).collect();
        let mut tape = Tape::new();
        let pos = tape.constant(vec![n], p_pos.clone());
        let neg = tape.constant(vec![n], p_neg.clone());
        let joint = joint_probability(&mut tape, pos, Some(neg));
        for i in 0..n {
            let expected = p_pos[i] * (1.0 - p_neg[i]);
            if (tape.value(joint)[i] - expected).abs() > 1e-12 {
                return SuiteResult::fail(name, format!("entry {i} deviates"));
            }
        }
        let without = joint_probability(&mut tape, pos, None);
        if without != pos {
            return SuiteResult::fail(name, "absent negative is not the identity");
        }
        let zeros = tape.constant(vec![n], vec![0.0; n]);
        let with_zero = joint_probability(&mut tape, pos, Some(zeros));
        if tape.value(with_zero) != p_pos.as_slice() {
            return SuiteResult::fail(name, "zero negative does not reduce to p_pos");
        }
    }
    SuiteResult::ok(name, format!("{trials} random vectors within 1e-12"))
}

/// Brute-force AP recomputation from scratch, used as the metric oracle.
fn oracle_ap(threshold: f64, ranked: &RankedPredictions, gts: &[Span]) -> f64 {
    // Greedy TP flags, recomputed independently.
    let mut matched = vec![false; gts.len()];
    let mut flags = Vec::new();
    for p in &ranked.spans {
        let mut hit = None;
        for (gi, gt) in gts.iter().enumerate() {
            if !matched[gi] && iou(p, gt) >= threshold {
                hit = Some(gi);
                break;
            }
        }
        if let Some(gi) = hit {
            matched[gi] = true;
            flags.push(true);
        } else {
            flags.push(false);
        }
    }
    // Enumerate all ranking prefixes; integrate max precision at recall >= r.
    let mut points = Vec::new();
    for k in 1..=flags.len() {
        let tp = flags[..k].iter().filter(|b| **b).count();
        points.push((tp as f64 / gts.len() as f64, tp as f64 / k as f64));
    }
    let mut recalls: Vec<f64> = points.iter().map(|p| p.0).collect();
    recalls.push(0.0);
    recalls.sort_by(|a, b| a.partial_cmp(b).unwrap());
    recalls.dedup();
    let mut ap = 0.0;
    for w in recalls.windows(2) {
        let best = points
            .iter()
            .filter(|(r, _)| *r >= w[1])
            .map(|(_, p)| *p)
            .fold(0.0f64, f64::max);
        ap += (w[1] - w[0]) * best;
    }
    ap
}

/// AP equals the brute-force recomputation on random instances with up to 8
/// predictions; recall_at monotonicity holds on every instance.
pub fn metric_suite(instances: usize) -> SuiteResult {
    let name = "metric-oracle";
    let mut rng = ChaCha8Rng::seed_from_u64(0x6d657472);
    for k in 0..instances {
        let n_pred = rng.gen_range(0..=8);
        let n_gt = rng.gen_range(1..=3);
        let preds: Vec<(f64, Span)> = (0..n_pred)
            .map(|_| {
                let s = rng.gen_range(0.0..8.0);
                (
                    rng.gen_range(0.0..1.0),
                    Span::seconds(s, s + rng.gen_range(0.2..3.0)),
                )
            })
            .collect();
        let gts: Vec<Span> = (0..n_gt)
            .map(|_| {
                let s = rng.gen_range(0.0..8.0);
                Span::seconds(s, s + rng.gen_range(0.5..3.0))
            })
            .collect();
        let ranked = rank_predictions(preds);
        let threshold = rng.gen_range(0.1..0.9);
        let fast = average_precision(threshold, &ranked, &gts).unwrap();
        let slow = oracle_ap(threshold, &ranked, &gts);
        if (fast - slow).abs() > 1e-12 {
            return SuiteResult::fail(
                name,
                format!("instance {k}: ap {fast} vs oracle {slow}"),
            );
        }

        let queries = vec![QueryEval {
            qid: format!("q{k}"),
            ranked,
            gts,
        }];
        let mut prev = 0.0;
        for n in 1..=8 {
            let r = recall_at(n, 0.5, &queries);
            if r + 1e-12 < prev {
                return SuiteResult::fail(name, format!("recall not monotone in n at {n}"));
            }
            prev = r;
        }
        let mut prev = 1.0f64;
        for t in [0.1, 0.3, 0.5, 0.7, 0.9] {
            let r = recall_at(1, t, &queries);
            if r > prev + 1e-12 {
                return SuiteResult::fail(name, format!("recall not monotone in threshold at {t}"));
            }
            prev = r;
        }
    }
    SuiteResult::ok(name, format!("{instances} random instances, AP exact, recall monotone"))
}

/// BMFT write/read round-trip bit-exactness.
pub fn format_suite() -> SuiteResult {
    let name = "format-round-trip";
    let dir = match tempfile::tempdir() {
        Ok(d) => d,
        Err(e) => return SuiteResult::fail(name, format!("tempdir: {e}")),
    };
    let mut rng = ChaCha8Rng::seed_from_u64(0x666d74);
    for k in 0..20 {
        let rows = rng.gen_range(0..30);
        let dim = rng.gen_range(1..16);
        let m = FeatureMatrix::new(
            rows,
            dim,
            (0..rows * dim).map(|_| rng.gen_range(-10.0f32..10.0)).collect(),
        );
        let path = dir.path().join(format!("m{k}.bmft"));
        if let Err(e) = write_features(&path, &m) {
            return SuiteResult::fail(name, format!("write: {e}"));
        }
        match read_features(&path) {
            Ok(back) => {
                if back.rows != m.rows
                    || back.dim != m.dim
                    || back
                        .data
                        .iter()
                        .zip(&m.data)
                        .any(|(a, b)| a.to_bits() != b.to_bits())
                {
                    return SuiteResult::fail(name, format!("round trip differs for m{k}"));
                }
            }
            Err(e) => return SuiteResult::fail(name, format!("read: {e}")),
        }
    }
    SuiteResult::ok(name, "20 random matrices round-trip bit-exactly")
}

/// Full verification battery, sized to finish well under five minutes.
pub fn run_all() -> Vec<SuiteResult> {
    vec![
        gradient_suite(),
        hungarian_suite(1000),
        geometry_suite(100_000),
        joint_probability_suite(1000),
        metric_suite(1000),
        format_suite(),
    ]
}
