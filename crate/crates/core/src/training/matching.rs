//! Set-prediction matching: per-pair cost and minimum-cost assignment.

use crate::model::MomentPrediction;
use crate::temporal::{giou, Span};

use super::LossWeights;

/// Matching cost between one ground truth and one prediction:
/// `-p(foreground) + lambda_l1 * L1 + lambda_iou * (1 - giou)`.
/// Lower is better. Gradients never flow through this; the assignment is
/// recomputed from plain values every step.
pub fn matching_cost(gt: &Span, pred: &MomentPrediction, w: &LossWeights) -> f64 {
    let l1 = (gt.start - pred.span.start).abs() + (gt.end - pred.span.end).abs();
    let g = giou(gt, &pred.span);
    -pred.foreground_prob + w.lambda_l1 * l1 + w.lambda_iou * (1.0 - g)
}

/// Injective assignment between ground truths (rows) and predictions
/// (columns).
#[derive(Debug, Clone, PartialEq)]
pub struct MatchResult {
    /// (gt index, prediction index) pairs, sorted by gt index.
    pub pairs: Vec<(usize, usize)>,
    pub total_cost: f64,
}

/// Minimum-total-cost assignment of rows to columns (Hungarian algorithm
/// with potentials, O(n^3)). Rectangular inputs are padded to square with
/// zero-cost dummy entries, which cannot change the optimum over real rows.
pub fn hungarian_assign(costs: &[Vec<f64>]) -> MatchResult {
    let rows = costs.len();
    assert!(rows > 0, "hungarian_assign on an empty cost matrix");
    let cols = costs[0].len();
    assert!(cols > 0, "hungarian_assign on an empty cost matrix");
    for (i, row) in costs.iter().enumerate() {
        assert_eq!(row.len(), cols, "ragged cost matrix at row {i}");
        assert!(
            row.iter().all(|c| c.is_finite()),
            "non-finite cost in row {i}"
        );
    }

    let n = rows.max(cols);
    let at = |i: usize, j: usize| -> f64 {
        if i < rows && j < cols {
            costs[i][j]
        } else {
            0.0
        }
    };

    const INF: f64 = f64::INFINITY;
    let mut u = vec![0.0f64; n + 1];
    let mut v = vec![0.0f64; n + 1];
    let mut assignment = vec![0usize; n + 1]; // column -> row (1-based)
    let mut way = vec![0usize; n + 1];

    for i in 1..=n {
        assignment[0] = i;
        let mut j0 = 0usize;
        let mut minv = vec![INF; n + 1];
        let mut used = vec![false; n + 1];
        loop {
            used[j0] = true;
            let i0 = assignment[j0];
            let mut delta = INF;
            let mut j1 = 0usize;
            for j in 1..=n {
                if used[j] {
                    continue;
                }
                let cur = at(i0 - 1, j - 1) - u[i0] - v[j];
                if cur < minv[j] {
                    minv[j] = cur;
                    way[j] = j0;
                }
                if minv[j] < delta {
                    delta = minv[j];
                    j1 = j;
                }
            }
            for j in 0..=n {
                if used[j] {
                    u[assignment[j]] += delta;
                    v[j] -= delta;
                } else {
                    minv[j] -= delta;
                }
            }
            j0 = j1;
            if assignment[j0] == 0 {
                break;
            }
        }
        loop {
            let j1 = way[j0];
            assignment[j0] = assignment[j1];
            j0 = j1;
            if j0 == 0 {
                break;
            }
        }
    }

    let mut pairs = Vec::new();
    let mut total = 0.0;
    for j in 1..=n {
        let i = assignment[j];
        if i >= 1 && i <= rows && j <= cols {
            pairs.push((i - 1, j - 1));
            total += costs[i - 1][j - 1];
        }
    }
    pairs.sort_unstable();
    debug_assert_eq!(pairs.len(), rows.min(cols));
    MatchResult {
        pairs,
        total_cost: total,
    }
}

/// Exhaustive minimum-cost injection, for oracle checks on small instances.
pub fn brute_force_assign(costs: &[Vec<f64>]) -> MatchResult {
    let rows = costs.len();
    let cols = costs[0].len();
    let k = rows.min(cols);
    let mut best: Option<MatchResult> = None;

    fn recurse(
        costs: &[Vec<f64>],
        row: usize,
        k: usize,
        used: &mut Vec<bool>,
        picked: &mut Vec<(usize, usize)>,
        acc: f64,
        best: &mut Option<MatchResult>,
    ) {
        let rows = costs.len();
        if picked.len() == k || row == rows {
            if picked.len() == k {
                let better = best.as_ref().map(|b| acc < b.total_cost).unwrap_or(true);
                if better {
                    *best = Some(MatchResult {
                        pairs: picked.clone(),
                        total_cost: acc,
                    });
                }
            }
            return;
        }
        // Rows may outnumber columns: allow skipping this row.
        let remaining_rows = rows - row;
        let needed = k - picked.len();
        if remaining_rows > needed {
            recurse(costs, row + 1, k, used, picked, acc, best);
        }
        for j in 0..costs[0].len() {
            if !used[j] {
                used[j] = true;
                picked.push((row, j));
                recurse(costs, row + 1, k, used, picked, acc + costs[row][j], best);
                picked.pop();
                used[j] = false;
            }
        }
    }

    let mut used = vec![false; cols];
    let mut picked = Vec::new();
    recurse(costs, 0, k, &mut used, &mut picked, 0.0, &mut best);
    let mut out = best.expect("nonempty matrix always has an assignment");
    out.pairs.sort_unstable();
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn matching_cost_hand_cases() {
        let w = LossWeights::default();
        let gt = Span::normalized(0.2, 0.6);
        let perfect = MomentPrediction {
            foreground_prob: 1.0,
            span: gt,
        };
        assert_abs_diff_eq!(matching_cost(&gt, &perfect, &w), -1.0, epsilon = 1e-12);

        let no_conf = MomentPrediction {
            foreground_prob: 0.0,
            span: gt,
        };
        assert_abs_diff_eq!(matching_cost(&gt, &no_conf, &w), 0.0, epsilon = 1e-12);

        // gt [0.2,0.6], pred [0.3,0.7], p = 0.5: -0.5 + 0.2 + 8*(1 - 0.6) = 2.9
        let offset = MomentPrediction {
            foreground_prob: 0.5,
            span: Span::normalized(0.3, 0.7),
        };
        assert_abs_diff_eq!(matching_cost(&gt, &offset, &w), 2.9, epsilon = 1e-12);
    }

    #[test]
    fn single_row_picks_the_minimum() {
        let costs = vec![vec![3.0, -1.0, 2.0, 0.5]];
        let res = hungarian_assign(&costs);
        assert_eq!(res.pairs, vec![(0, 1)]);
        assert_abs_diff_eq!(res.total_cost, -1.0);
    }

    #[test]
    fn two_by_two_hand_case() {
        let costs = vec![vec![1.0, 2.0], vec![3.0, 0.0]];
        let res = hungarian_assign(&costs);
        assert_eq!(res.pairs, vec![(0, 0), (1, 1)]);
        assert_abs_diff_eq!(res.total_cost, 1.0);
    }

    #[test]
    #[should_panic(expected = "empty cost matrix")]
    fn empty_matrix_rejected() {
        hungarian_assign(&[]);
    }

    #[test]
    fn matches_brute_force_on_random_instances() {
        let mut rng = ChaCha8Rng::seed_from_u64(0xbeef);
        for _ in 0..1000 {
            let rows = rng.gen_range(1..=4);
            let cols = rng.gen_range(rows..=6);
            let costs: Vec<Vec<f64>> = (0..rows)
                .map(|_| (0..cols).map(|_| rng.gen_range(-10.0..10.0)).collect())
                .collect();
            let fast = hungarian_assign(&costs);
            let slow = brute_force_assign(&costs);
            assert!(
                (fast.total_cost - slow.total_cost).abs() < 1e-9,
                "hungarian {} vs brute force {} on {costs:?}",
                fast.total_cost,
                slow.total_cost
            );
            assert_eq!(fast.pairs.len(), rows.min(cols));
            // Injectivity in both coordinates.
            let mut rs: Vec<usize> = fast.pairs.iter().map(|p| p.0).collect();
            let mut cs: Vec<usize> = fast.pairs.iter().map(|p| p.1).collect();
            rs.dedup();
            cs.sort_unstable();
            cs.dedup();
            assert_eq!(rs.len(), fast.pairs.len());
            assert_eq!(cs.len(), fast.pairs.len());
        }
    }

    #[test]
    fn argmin_invariant_under_constant_shift() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        for _ in 0..100 {
            let costs: Vec<f64> = (0..6).map(|_| rng.gen_range(-5.0..5.0)).collect();
            let base = hungarian_assign(&[costs.clone()]);
            let shifted: Vec<f64> = costs.iter().map(|c| c + 123.456).collect();
            let after = hungarian_assign(&[shifted]);
            assert_eq!(base.pairs, after.pairs);
        }
    }
}
