//! Reliability matching between pre-perturbation pseudo-labels and
//! post-perturbation predictions.
//!
//! The two box sets are padded to equal size, matched one-to-one with a
//! Kuhn–Munkres solver on an IoU+L1 cost, and every pseudo-label is tiered
//! High/Medium/Low against global quantile thresholds computed over the
//! sorted multiset of all costs seen so far in the stream.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::geom3d::{bev_iou, box_l1, Box3D};

/// Finite stand-in for an infinite matching cost inside the solver.
/// Real box costs are bounded by grid scale and never approach this.
pub const SENTINEL_COST: f64 = 1e9;

/// Reliability tier of a pseudo-labeled box.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Tier {
    High,
    Medium,
    Low,
}

/// One-to-one assignment of pseudo-labels onto (padded) perturbed
/// predictions. `assignment[i] == None` means box `i` matched a padding
/// slot; its cost is reported as infinite.
#[derive(Debug, Clone, PartialEq)]
pub struct MatchResult {
    pub assignment: Vec<Option<usize>>,
    pub per_box_cost: Vec<f64>,
}

/// Sorted multiset of all matching costs observed since the first batch.
/// Infinite costs are recorded as [`SENTINEL_COST`], which sorts last.
#[derive(Debug, Clone, Default, Serialize, Deserialize)]
pub struct CostHistory {
    costs: Vec<f64>,
}

impl CostHistory {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.costs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.costs.is_empty()
    }

    pub fn insert(&mut self, cost: f64) {
        let value = if cost.is_finite() { cost } else { SENTINEL_COST };
        let pos = self.costs.partition_point(|&c| c <= value);
        self.costs.insert(pos, value);
    }

    pub fn as_sorted(&self) -> &[f64] {
        &self.costs
    }
}

/// Quantile thresholds splitting costs into the three reliability tiers.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TierThresholds {
    pub c1: f64,
    pub c2: f64,
    pub alpha: f64,
}

#[derive(Debug, Error, PartialEq)]
pub enum MatcherError {
    #[error("cost history is empty; thresholds undefined")]
    EmptyHistory,
}

/// Matching cost `w_iou * (1 - bev_iou) + w_l1 * box_l1`.
pub fn box_cost(a: &Box3D, b: &Box3D, w_iou: f64, w_l1: f64) -> f64 {
    debug_assert!(w_iou >= 0.0 && w_l1 >= 0.0 && w_iou + w_l1 > 0.0);
    w_iou * (1.0 - bev_iou(a, b)) + w_l1 * box_l1(a, b)
}

/// O(n^3) Kuhn–Munkres assignment on a square cost matrix (row-major,
/// `n*n` entries). Returns the minimum-total-cost permutation
/// `row -> column`; among equal-cost optima the lexicographically
/// smallest assignment is returned.
pub fn hungarian(cost: &[f64], n: usize) -> Vec<usize> {
    assert!(n >= 1, "hungarian needs n >= 1");
    assert_eq!(cost.len(), n * n, "cost matrix must be n*n");
    let base = solve_assignment(cost, n, &[]);
    let best_total = assignment_total(cost, n, &base);
    let tol = 1e-9 * (1.0 + best_total.abs());

    // Lexicographic tightening: greedily force the smallest column for each
    // row that still achieves the optimal total.
    let mut forced: Vec<usize> = Vec::with_capacity(n);
    let mut used = vec![false; n];
    for row in 0..n {
        let mut chosen = None;
        let mut chosen_total = f64::INFINITY;
        for col in 0..n {
            if used[col] {
                continue;
            }
            forced.push(col);
            let candidate = solve_assignment(cost, n, &forced);
            let total = assignment_total(cost, n, &candidate);
            forced.pop();
            if total <= best_total + tol {
                chosen = Some(col);
                break;
            }
            if total < chosen_total {
                chosen_total = total;
                chosen = chosen.or(Some(col));
            }
        }
        let col = chosen.expect("some column is always feasible");
        forced.push(col);
        used[col] = true;
        let _ = row;
    }
    forced
}

fn assignment_total(cost: &[f64], n: usize, assignment: &[usize]) -> f64 {
    assignment
        .iter()
        .enumerate()
        .map(|(i, &j)| cost[i * n + j])
        .sum()
}

/// Potentials-based shortest-augmenting-path assignment. Rows listed in
/// `forced` (row i -> forced[i]) are pinned to their columns.
fn solve_assignment(cost: &[f64], n: usize, forced: &[usize]) -> Vec<usize> {
    let at = |i: usize, j: usize| -> f64 {
        if i < forced.len() {
            if forced[i] == j {
                0.0
            } else {
                f64::INFINITY
            }
        } else {
            cost[i * n + j]
        }
    };
    // 1-based arrays following the classical formulation.
    let mut u = vec![0.0f64; n + 1];
    let mut v = vec![0.0f64; n + 1];
    let mut p = vec![0usize; n + 1]; // column -> row
    let mut way = vec![0usize; n + 1];
    for i in 1..=n {
        p[0] = i;
        let mut j0 = 0usize;
        let mut minv = vec![f64::INFINITY; n + 1];
        let mut visited = vec![false; n + 1];
        loop {
            visited[j0] = true;
            let i0 = p[j0];
            let mut delta = f64::INFINITY;
            let mut j1 = 0usize;
            for j in 1..=n {
                if visited[j] {
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
                if visited[j] {
                    u[p[j]] += delta;
                    v[j] -= delta;
                } else {
                    minv[j] -= delta;
                }
            }
            j0 = j1;
            if p[j0] == 0 {
                break;
            }
        }
        loop {
            let j1 = way[j0];
            p[j0] = p[j1];
            j0 = j1;
            if j0 == 0 {
                break;
            }
        }
    }
    let mut result = vec![0usize; n];
    for j in 1..=n {
        if p[j] > 0 {
            result[p[j] - 1] = j - 1;
        }
    }
    result
}

/// Optimal one-to-one matching of pseudo-labels against perturbed
/// predictions. The smaller set is padded with empty slots; any pair
/// involving padding costs [`SENTINEL_COST`], re-reported as infinite.
pub fn match_predictions(
    pseudo: &[Box3D],
    perturbed: &[Box3D],
    w_iou: f64,
    w_l1: f64,
) -> MatchResult {
    let n_pseudo = pseudo.len();
    let n_pert = perturbed.len();
    let n = n_pseudo.max(n_pert);
    if n == 0 {
        return MatchResult {
            assignment: Vec::new(),
            per_box_cost: Vec::new(),
        };
    }
    let mut cost = vec![SENTINEL_COST; n * n];
    for (i, a) in pseudo.iter().enumerate() {
        for (j, b) in perturbed.iter().enumerate() {
            cost[i * n + j] = box_cost(a, b, w_iou, w_l1);
        }
    }
    let perm = hungarian(&cost, n);
    let mut assignment = Vec::with_capacity(n_pseudo);
    let mut per_box_cost = Vec::with_capacity(n_pseudo);
    for (i, &j) in perm.iter().take(n_pseudo).enumerate() {
        if j < n_pert {
            assignment.push(Some(j));
            per_box_cost.push(cost[i * n + j]);
        } else {
            assignment.push(None);
            per_box_cost.push(f64::INFINITY);
        }
    }
    MatchResult {
        assignment,
        per_box_cost,
    }
}

fn quantile_index(alpha_n: f64, n: usize) -> usize {
    // 1-based ceiling index with a guard against float roundoff such as
    // 0.1 * 100 = 10.000000000000002.
    let idx = (alpha_n - 1e-9).ceil().max(1.0) as usize;
    idx.min(n)
}

/// Inserts the new costs into the history and recomputes the quantile
/// thresholds `c1 = A[ceil(alpha*n)]`, `c2 = A[ceil((1-alpha)*n)]`
/// (1-based). Errors if the history is still empty afterwards.
pub fn update_thresholds(
    history: &mut CostHistory,
    new_costs: &[f64],
    alpha: f64,
) -> Result<TierThresholds, MatcherError> {
    assert!(alpha > 0.0 && alpha < 0.5, "alpha must be in (0, 0.5)");
    for &c in new_costs {
        history.insert(c);
    }
    let n = history.len();
    if n == 0 {
        return Err(MatcherError::EmptyHistory);
    }
    let sorted = history.as_sorted();
    let c1 = sorted[quantile_index(alpha * n as f64, n) - 1];
    let c2 = sorted[quantile_index((1.0 - alpha) * n as f64, n) - 1];
    Ok(TierThresholds { c1, c2, alpha })
}

/// Tiers each pseudo-label by its matching cost: strictly below `c1` is
/// High, strictly above `c2` is Low, otherwise Medium. Infinite costs are
/// always Low.
pub fn tier_boxes(
    pseudo: &[Box3D],
    result: &MatchResult,
    th: &TierThresholds,
) -> Vec<(Box3D, Tier)> {
    assert_eq!(pseudo.len(), result.per_box_cost.len());
    pseudo
        .iter()
        .zip(&result.per_box_cost)
        .map(|(b, &cost)| {
            let tier = if !cost.is_finite() {
                Tier::Low
            } else if cost < th.c1 {
                Tier::High
            } else if cost > th.c2 {
                Tier::Low
            } else {
                Tier::Medium
            };
            (*b, tier)
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn bx(cx: f64, cy: f64, dx: f64, dy: f64) -> Box3D {
        Box3D::new(cx, cy, 1.0, dx, dy, 2.0, 0.0)
    }

    /// Exhaustive minimum over all permutations, for n small.
    fn brute_force_total(cost: &[f64], n: usize) -> f64 {
        fn recurse(cost: &[f64], n: usize, row: usize, used: &mut Vec<bool>, acc: f64) -> f64 {
            if row == n {
                return acc;
            }
            let mut best = f64::INFINITY;
            for j in 0..n {
                if !used[j] {
                    used[j] = true;
                    best = best.min(recurse(cost, n, row + 1, used, acc + cost[row * n + j]));
                    used[j] = false;
                }
            }
            best
        }
        recurse(cost, n, 0, &mut vec![false; n], 0.0)
    }

    #[test]
    fn box_cost_identity_is_zero() {
        let a = bx(0.0, 0.0, 2.0, 2.0);
        assert_eq!(box_cost(&a, &a, 1.0, 1.0), 0.0);
    }

    #[test]
    fn box_cost_composes_iou_and_l1() {
        // third-IoU pair with unit center offset: 1*(2/3) + 1*1 = 5/3
        let a = bx(0.0, 0.0, 2.0, 2.0);
        let b = bx(1.0, 0.0, 2.0, 2.0);
        assert!((box_cost(&a, &b, 1.0, 1.0) - 5.0 / 3.0).abs() < 1e-12);
    }

    #[test]
    fn hungarian_identity_on_zero_diagonal() {
        let cost = [0.0, 9.0, 9.0, 9.0, 0.0, 9.0, 9.0, 9.0, 0.0];
        assert_eq!(hungarian(&cost, 3), vec![0, 1, 2]);
    }

    #[test]
    fn hungarian_three_by_three_example() {
        let cost = [4.0, 1.0, 3.0, 2.0, 0.0, 5.0, 3.0, 2.0, 2.0];
        let perm = hungarian(&cost, 3);
        assert_eq!(perm, vec![1, 0, 2]);
        assert_eq!(assignment_total(&cost, 3, &perm), 5.0);
    }

    #[test]
    fn hungarian_lexicographic_tie_break() {
        // every assignment costs 2.0; the lexicographically smallest wins
        let cost = [1.0, 1.0, 1.0, 1.0];
        assert_eq!(hungarian(&cost, 2), vec![0, 1]);
    }

    #[test]
    fn hungarian_matches_brute_force_small() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for n in 2..=5usize {
            for _ in 0..50 {
                let cost: Vec<f64> = (0..n * n).map(|_| rng.gen_range(0.0..10.0)).collect();
                let perm = hungarian(&cost, n);
                let total = assignment_total(&cost, n, &perm);
                let expect = brute_force_total(&cost, n);
                assert_eq!(total, expect, "n={n}: {total} vs {expect}");
            }
        }
    }

    #[test]
    fn match_identical_lists_is_identity() {
        let boxes = vec![bx(0.0, 0.0, 2.0, 2.0), bx(10.0, 0.0, 2.0, 2.0)];
        let result = match_predictions(&boxes, &boxes, 1.0, 1.0);
        assert_eq!(result.assignment, vec![Some(0), Some(1)]);
        assert_eq!(result.per_box_cost, vec![0.0, 0.0]);
    }

    #[test]
    fn match_against_empty_is_all_infinite() {
        let boxes = vec![bx(0.0, 0.0, 2.0, 2.0), bx(10.0, 0.0, 2.0, 2.0)];
        let result = match_predictions(&boxes, &[], 1.0, 1.0);
        assert_eq!(result.assignment, vec![None, None]);
        assert!(result.per_box_cost.iter().all(|c| c.is_infinite()));
    }

    #[test]
    fn match_both_empty() {
        let result = match_predictions(&[], &[], 1.0, 1.0);
        assert!(result.assignment.is_empty());
    }

    #[test]
    fn match_surplus_box_gets_infinite_cost() {
        // three pseudo-labels, two perturbed near-duplicates: the far box
        // is the one left unmatched
        let pseudo = vec![
            bx(0.0, 0.0, 2.0, 2.0),
            bx(10.0, 0.0, 2.0, 2.0),
            bx(30.0, 30.0, 2.0, 2.0),
        ];
        let perturbed = vec![bx(0.1, 0.0, 2.0, 2.0), bx(10.1, 0.0, 2.0, 2.0)];
        let result = match_predictions(&pseudo, &perturbed, 1.0, 1.0);
        assert_eq!(result.assignment[0], Some(0));
        assert_eq!(result.assignment[1], Some(1));
        assert_eq!(result.assignment[2], None);
        assert_eq!(
            result.per_box_cost.iter().filter(|c| c.is_infinite()).count(),
            1
        );
    }

    #[test]
    fn thresholds_on_one_to_hundred() {
        let mut history = CostHistory::new();
        let costs: Vec<f64> = (1..=100).map(|i| i as f64).collect();
        let th = update_thresholds(&mut history, &costs, 0.1).unwrap();
        assert_eq!(th.c1, 10.0);
        assert_eq!(th.c2, 90.0);
    }

    #[test]
    fn thresholds_all_equal_history() {
        let mut history = CostHistory::new();
        let th = update_thresholds(&mut history, &[3.5; 20], 0.08).unwrap();
        assert_eq!(th.c1, 3.5);
        assert_eq!(th.c2, 3.5);
        // with c1 == c2 == c every box at cost c is Medium (strict bounds)
        let pseudo = vec![bx(0.0, 0.0, 2.0, 2.0)];
        let result = MatchResult {
            assignment: vec![Some(0)],
            per_box_cost: vec![3.5],
        };
        assert_eq!(tier_boxes(&pseudo, &result, &th)[0].1, Tier::Medium);
    }

    #[test]
    fn thresholds_undefined_on_empty() {
        let mut history = CostHistory::new();
        assert_eq!(
            update_thresholds(&mut history, &[], 0.08),
            Err(MatcherError::EmptyHistory)
        );
    }

    #[test]
    fn tier_rules() {
        let th = TierThresholds {
            c1: 1.0,
            c2: 5.0,
            alpha: 0.08,
        };
        let pseudo = vec![bx(0.0, 0.0, 2.0, 2.0); 4];
        let result = MatchResult {
            assignment: vec![Some(0), Some(1), Some(2), None],
            per_box_cost: vec![0.0, 1.0, 7.0, f64::INFINITY],
        };
        let tiers: Vec<Tier> = tier_boxes(&pseudo, &result, &th)
            .into_iter()
            .map(|(_, t)| t)
            .collect();
        assert_eq!(tiers, vec![Tier::High, Tier::Medium, Tier::Low, Tier::Low]);
    }

    #[test]
    fn sentinel_sorts_last_in_history() {
        let mut history = CostHistory::new();
        history.insert(f64::INFINITY);
        history.insert(2.0);
        history.insert(1.0);
        assert_eq!(history.as_sorted(), &[1.0, 2.0, SENTINEL_COST]);
    }

    proptest! {
        #[test]
        fn hungarian_total_optimal_and_bijective(
            seed in 0u64..500, n in 2usize..6,
        ) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let cost: Vec<f64> = (0..n * n).map(|_| rng.gen_range(0.0..10.0)).collect();
            let perm = hungarian(&cost, n);
            let mut seen = vec![false; n];
            for &j in &perm {
                prop_assert!(!seen[j]);
                seen[j] = true;
            }
            prop_assert_eq!(
                assignment_total(&cost, n, &perm),
                brute_force_total(&cost, n)
            );
        }

        #[test]
        fn match_swap_gives_inverse_permutation(seed in 0u64..200, n in 1usize..6) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let boxes = |rng: &mut ChaCha8Rng| -> Vec<Box3D> {
                (0..n)
                    .map(|_| {
                        bx(
                            rng.gen_range(-20.0..20.0),
                            rng.gen_range(-20.0..20.0),
                            rng.gen_range(1.0..4.0),
                            rng.gen_range(1.0..4.0),
                        )
                    })
                    .collect()
            };
            let a = boxes(&mut rng);
            let b = boxes(&mut rng);
            let fwd = match_predictions(&a, &b, 1.0, 1.0);
            let bwd = match_predictions(&b, &a, 1.0, 1.0);
            for (i, &assigned) in fwd.assignment.iter().enumerate() {
                let j = assigned.unwrap();
                prop_assert_eq!(bwd.assignment[j], Some(i));
            }
            let mut fwd_costs = fwd.per_box_cost.clone();
            let mut bwd_costs = bwd.per_box_cost.clone();
            fwd_costs.sort_by(f64::total_cmp);
            bwd_costs.sort_by(f64::total_cmp);
            for (x, y) in fwd_costs.iter().zip(&bwd_costs) {
                // clipping a-by-b vs b-by-a can differ in the last ulp
                prop_assert!((x - y).abs() <= 1e-9 * (1.0 + x.abs()));
            }
        }

        #[test]
        fn quantile_thresholds_ordered(seed in 0u64..200, n in 13usize..400) {
            // ceil(1/0.08) = 13 guarantees c1 <= c2
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let costs: Vec<f64> = (0..n).map(|_| rng.gen_range(0.0..100.0)).collect();
            let mut history = CostHistory::new();
            let th = update_thresholds(&mut history, &costs, 0.08).unwrap();
            prop_assert!(th.c1 <= th.c2);
            let below = history.as_sorted().iter().filter(|&&c| c < th.c1).count();
            prop_assert!(below as f64 / n as f64 <= 0.08 + 1.0 / n as f64);
        }
    }
}
