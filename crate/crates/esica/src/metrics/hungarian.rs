//! Maximum-total-IoU one-to-one instance matching.

use crate::error::{Error, Result};

/// One-to-one matching between predicted and ground-truth instances.
#[derive(Debug, Clone, PartialEq)]
pub struct InstanceMatch {
    /// (pred_id, gt_id, iou), every pair at or above the threshold.
    pub pairs: Vec<(usize, usize, f64)>,
    pub unmatched_pred: Vec<usize>,
    pub unmatched_gt: Vec<usize>,
}

/// Kuhn-Munkres with potentials on a square cost matrix; O(n^3).
/// Returns, for each row, the assigned column. Minimizes total cost.
fn assign_min(cost: &[f64], n: usize) -> Vec<usize> {
    const INF: f64 = f64::INFINITY;
    // 1-indexed working arrays; p[j] = row matched to column j.
    let mut u = vec![0.0f64; n + 1];
    let mut v = vec![0.0f64; n + 1];
    let mut p = vec![0usize; n + 1];
    let mut way = vec![0usize; n + 1];
    for i in 1..=n {
        p[0] = i;
        let mut j0 = 0usize;
        let mut minv = vec![INF; n + 1];
        let mut used = vec![false; n + 1];
        loop {
            used[j0] = true;
            let i0 = p[j0];
            let mut delta = INF;
            let mut j1 = 0usize;
            for j in 1..=n {
                if used[j] {
                    continue;
                }
                let cur = cost[(i0 - 1) * n + (j - 1)] - u[i0] - v[j];
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
    let mut row_to_col = vec![0usize; n];
    for j in 1..=n {
        if p[j] != 0 {
            row_to_col[p[j] - 1] = j - 1;
        }
    }
    row_to_col
}

/// Best achievable total IoU matching rows to columns one-to-one
/// (rows/columns beyond min(n_pred, n_gt) stay unmatched at zero value).
fn best_total(iou: &[f64], n_pred: usize, n_gt: usize) -> f64 {
    let n = n_pred.max(n_gt);
    if n == 0 {
        return 0.0;
    }
    let mut cost = vec![0.0f64; n * n];
    for i in 0..n {
        for j in 0..n {
            let value = if i < n_pred && j < n_gt {
                iou[i * n_gt + j]
            } else {
                0.0
            };
            cost[i * n + j] = -value;
        }
    }
    let assignment = assign_min(&cost, n);
    let mut total = 0.0;
    for (i, &j) in assignment.iter().enumerate() {
        if i < n_pred && j < n_gt {
            total += iou[i * n_gt + j];
        }
    }
    total
}

/// Maximum-total-IoU one-to-one assignment; pairs below `threshold` are
/// discarded after the assignment. Among equally optimal assignments, the
/// lexicographically smallest (pred_id, gt_id) pair set is returned.
pub fn hungarian_match(
    iou: &[f64],
    n_pred: usize,
    n_gt: usize,
    threshold: f64,
) -> Result<InstanceMatch> {
    if iou.len() != n_pred * n_gt {
        return Err(Error::contract(format!(
            "hungarian_match: matrix size {} vs {n_pred}x{n_gt}",
            iou.len()
        )));
    }
    if iou.iter().any(|v| !(0.0..=1.0).contains(v)) {
        return Err(Error::contract("hungarian_match: IoU entries must be in [0,1]"));
    }

    // Totals of partial assignments are sums in different orders, so exact
    // optimality is tested with a tie margin far below any real IoU gap.
    const TIE_EPS: f64 = 1e-9;
    let optimum = best_total(iou, n_pred, n_gt);

    // Fix rows greedily in ascending order, preferring the smallest column
    // (then "unmatched") that still reaches the optimal total on the rest.
    let mut chosen: Vec<Option<usize>> = Vec::with_capacity(n_pred);
    let mut free_cols: Vec<usize> = (0..n_gt).collect();
    let mut fixed_value = 0.0f64;
    for i in 0..n_pred {
        let remaining_rows = n_pred - i - 1;
        let mut pick: Option<usize> = None;
        for (slot, &j) in free_cols.iter().enumerate() {
            let rest = residual_best(iou, n_gt, i + 1, remaining_rows, &free_cols, slot);
            let total = fixed_value + iou[i * n_gt + j] + rest;
            if total + TIE_EPS >= optimum {
                pick = Some(slot);
                break;
            }
        }
        match pick {
            Some(slot) => {
                let j = free_cols.remove(slot);
                fixed_value += iou[i * n_gt + j];
                chosen.push(Some(j));
            }
            None => chosen.push(None),
        }
    }

    let mut pairs = Vec::new();
    let mut unmatched_pred = Vec::new();
    let mut matched_gt = vec![false; n_gt];
    for (i, sel) in chosen.iter().enumerate() {
        match sel {
            Some(j) if iou[i * n_gt + j] >= threshold => {
                pairs.push((i, *j, iou[i * n_gt + j]));
                matched_gt[*j] = true;
            }
            _ => unmatched_pred.push(i),
        }
    }
    let unmatched_gt = (0..n_gt).filter(|&j| !matched_gt[j]).collect();
    Ok(InstanceMatch {
        pairs,
        unmatched_pred,
        unmatched_gt,
    })
}

/// Best total over rows [row_start, n_pred) and the free columns with one
/// slot removed.
fn residual_best(
    iou: &[f64],
    n_gt: usize,
    row_start: usize,
    remaining_rows: usize,
    free_cols: &[usize],
    skip_slot: usize,
) -> f64 {
    let cols: Vec<usize> = free_cols
        .iter()
        .enumerate()
        .filter(|(s, _)| *s != skip_slot)
        .map(|(_, &j)| j)
        .collect();
    if remaining_rows == 0 || cols.is_empty() {
        return 0.0;
    }
    let mut sub = vec![0.0f64; remaining_rows * cols.len()];
    for r in 0..remaining_rows {
        for (c, &j) in cols.iter().enumerate() {
            sub[r * cols.len() + c] = iou[(row_start + r) * n_gt + j];
        }
    }
    best_total(&sub, remaining_rows, cols.len())
}

/// Exhaustive matching oracle: maximum total IoU over every injective
/// row-to-column map, by enumeration. Exponential; verification only.
pub fn brute_force_best_total(iou: &[f64], n_pred: usize, n_gt: usize) -> f64 {
    fn recurse(
        iou: &[f64],
        n_gt: usize,
        row: usize,
        n_pred: usize,
        used: &mut Vec<bool>,
        acc: f64,
        best: &mut f64,
    ) {
        if row == n_pred {
            if acc > *best {
                *best = acc;
            }
            return;
        }
        // Leave this row unmatched.
        recurse(iou, n_gt, row + 1, n_pred, used, acc, best);
        for j in 0..n_gt {
            if !used[j] {
                used[j] = true;
                recurse(iou, n_gt, row + 1, n_pred, used, acc + iou[row * n_gt + j], best);
                used[j] = false;
            }
        }
    }
    let mut best = 0.0;
    let mut used = vec![false; n_gt];
    recurse(iou, n_gt, 0, n_pred, &mut used, 0.0, &mut best);
    best
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn dominant_diagonal_matches_identity() {
        let iou = [0.9, 0.1, 0.1, 0.8];
        let m = hungarian_match(&iou, 2, 2, 0.5).unwrap();
        assert_eq!(m.pairs, vec![(0, 0, 0.9), (1, 1, 0.8)]);
        assert!(m.unmatched_pred.is_empty());
        assert!(m.unmatched_gt.is_empty());
    }

    #[test]
    fn greedy_would_lose_this_one() {
        // Greedy takes (0,0)=0.6 then row 1 gets 0.0; the optimum crosses:
        // (0,1) + (1,0) = 0.55 + 0.58 = 1.13.
        let iou = [0.6, 0.55, 0.58, 0.0];
        let m = hungarian_match(&iou, 2, 2, 0.5).unwrap();
        assert_eq!(m.pairs, vec![(0, 1, 0.55), (1, 0, 0.58)]);
    }

    #[test]
    fn below_threshold_pairs_are_discarded_after_assignment() {
        let iou = [0.9, 0.0, 0.0, 0.3];
        let m = hungarian_match(&iou, 2, 2, 0.5).unwrap();
        assert_eq!(m.pairs, vec![(0, 0, 0.9)]);
        assert_eq!(m.unmatched_pred, vec![1]);
        assert_eq!(m.unmatched_gt, vec![1]);
    }

    #[test]
    fn ties_break_lexicographically() {
        // Both assignments total 1.0; (0,0),(1,1) is lexicographically first.
        let iou = [0.5, 0.5, 0.5, 0.5];
        let m = hungarian_match(&iou, 2, 2, 0.5).unwrap();
        assert_eq!(m.pairs, vec![(0, 0, 0.5), (1, 1, 0.5)]);
    }

    #[test]
    fn rectangular_matrices_work() {
        let iou = [0.7, 0.2, 0.1, 0.6, 0.55, 0.0];
        // 2 preds x 3 gts
        let m = hungarian_match(&iou, 2, 3, 0.5).unwrap();
        assert_eq!(m.pairs, vec![(0, 0, 0.7), (1, 1, 0.55)]);
        assert_eq!(m.unmatched_gt, vec![2]);
        // 3 preds x 2 gts
        let m = hungarian_match(&iou, 3, 2, 0.5).unwrap();
        assert_eq!(m.pairs.len(), 2);
    }

    #[test]
    fn total_equals_permutation_enumeration_on_grid_valued_ious() {
        // IoUs on the 1/64 grid keep every sum exact in f64, so the optimal
        // totals must agree bit for bit.
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for trial in 0..200 {
            let n_pred = rng.gen_range(1..=5usize);
            let n_gt = rng.gen_range(1..=5usize);
            let iou: Vec<f64> = (0..n_pred * n_gt)
                .map(|_| rng.gen_range(0..=64u32) as f64 / 64.0)
                .collect();
            let m = hungarian_match(&iou, n_pred, n_gt, 0.0).unwrap();
            let total: f64 = m.pairs.iter().map(|(_, _, v)| v).sum();
            let best = brute_force_best_total(&iou, n_pred, n_gt);
            assert_eq!(total, best, "trial {trial}");
        }
    }

    #[test]
    fn five_by_five_random_matches_all_120_permutations() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        for _ in 0..50 {
            let iou: Vec<f64> = (0..25)
                .map(|_| rng.gen_range(0..=64u32) as f64 / 64.0)
                .collect();
            let m = hungarian_match(&iou, 5, 5, 0.0).unwrap();
            let total: f64 = m.pairs.iter().map(|(_, _, v)| v).sum();
            assert_eq!(total, brute_force_best_total(&iou, 5, 5));
        }
    }

    #[test]
    fn out_of_range_entries_rejected() {
        assert!(hungarian_match(&[1.5], 1, 1, 0.5).is_err());
        assert!(hungarian_match(&[-0.1], 1, 1, 0.5).is_err());
    }
}
