//! Brute-force reference implementations used only to verify the production
//! metric code. Each oracle takes the long way around on purpose and never
//! calls the code path it checks.

use std::collections::BTreeSet;

use crate::metrics::{BinaryMask, Connectivity};

/// Dice via explicit index sets.
pub fn dsc_by_sets(pred: &BinaryMask, gt: &BinaryMask) -> f64 {
    let p: BTreeSet<usize> = pred
        .voxels
        .iter()
        .enumerate()
        .filter(|(_, &v)| v)
        .map(|(i, _)| i)
        .collect();
    let g: BTreeSet<usize> = gt
        .voxels
        .iter()
        .enumerate()
        .filter(|(_, &v)| v)
        .map(|(i, _)| i)
        .collect();
    if p.is_empty() && g.is_empty() {
        return 1.0;
    }
    let inter = p.intersection(&g).count();
    2.0 * inter as f64 / (p.len() + g.len()) as f64
}

/// Surface voxels by direct 6-neighborhood inspection.
fn surface_coords(mask: &BinaryMask) -> Vec<(usize, usize, usize)> {
    let (h, w, d) = mask.extents;
    let at = |hh: isize, ww: isize, dd: isize| -> bool {
        if hh < 0 || ww < 0 || dd < 0 {
            return false;
        }
        let (hh, ww, dd) = (hh as usize, ww as usize, dd as usize);
        if hh >= h || ww >= w || dd >= d {
            return false;
        }
        mask.voxels[(hh * w + ww) * d + dd]
    };
    let mut out = Vec::new();
    for hh in 0..h {
        for ww in 0..w {
            for dd in 0..d {
                if !mask.voxels[(hh * w + ww) * d + dd] {
                    continue;
                }
                let (i, j, k) = (hh as isize, ww as isize, dd as isize);
                let interior = at(i - 1, j, k)
                    && at(i + 1, j, k)
                    && at(i, j - 1, k)
                    && at(i, j + 1, k)
                    && at(i, j, k - 1)
                    && at(i, j, k + 1);
                if !interior {
                    out.push((hh, ww, dd));
                }
            }
        }
    }
    out
}

/// Normalized surface Dice by all-pairs distance computation, with the same
/// arithmetic shape as the production transform.
pub fn nsd_all_pairs(pred: &BinaryMask, gt: &BinaryMask, tau_mm: f64, one_sided: bool) -> f64 {
    let p_empty = pred.count() == 0;
    let g_empty = gt.count() == 0;
    if p_empty && g_empty {
        return 1.0;
    }
    if p_empty || g_empty {
        return 0.0;
    }
    let sp = surface_coords(pred);
    let sg = surface_coords(gt);
    let (sh2, sw2, sd2) = (
        pred.spacing.0 * pred.spacing.0,
        pred.spacing.1 * pred.spacing.1,
        pred.spacing.2 * pred.spacing.2,
    );
    let tau2 = tau_mm * tau_mm;
    let min_d2 = |p: (usize, usize, usize), set: &[(usize, usize, usize)]| -> f64 {
        set.iter()
            .map(|q| {
                let dh = p.0 as f64 - q.0 as f64;
                let dw = p.1 as f64 - q.1 as f64;
                let dd = p.2 as f64 - q.2 as f64;
                dh * dh * sh2 + (dw * dw * sw2 + dd * dd * sd2)
            })
            .fold(f64::INFINITY, f64::min)
    };
    let close_p = sp.iter().filter(|p| min_d2(**p, &sg) <= tau2).count();
    if one_sided {
        return close_p as f64 / sp.len() as f64;
    }
    let close_g = sg.iter().filter(|q| min_d2(**q, &sp) <= tau2).count();
    (close_p + close_g) as f64 / (sp.len() + sg.len()) as f64
}

/// Connected components as a set of voxel sets, by iterative flood fill.
pub fn components_by_flood_fill(
    mask: &[bool],
    extents: (usize, usize, usize),
    conn: Connectivity,
) -> BTreeSet<BTreeSet<usize>> {
    let (h, w, d) = extents;
    let idx = |hh: usize, ww: usize, dd: usize| (hh * w + ww) * d + dd;
    let mut seen = vec![false; mask.len()];
    let mut parts = BTreeSet::new();
    for start_h in 0..h {
        for start_w in 0..w {
            for start_d in 0..d {
                let start = idx(start_h, start_w, start_d);
                if !mask[start] || seen[start] {
                    continue;
                }
                let mut set = BTreeSet::new();
                let mut stack = vec![(start_h, start_w, start_d)];
                seen[start] = true;
                while let Some((ch, cw, cd)) = stack.pop() {
                    set.insert(idx(ch, cw, cd));
                    for dh in -1isize..=1 {
                        for dw in -1isize..=1 {
                            for dd in -1isize..=1 {
                                if (dh, dw, dd) == (0, 0, 0) {
                                    continue;
                                }
                                if matches!(conn, Connectivity::Six)
                                    && dh.abs() + dw.abs() + dd.abs() != 1
                                {
                                    continue;
                                }
                                let nh = ch as isize + dh;
                                let nw = cw as isize + dw;
                                let nd = cd as isize + dd;
                                if nh < 0 || nw < 0 || nd < 0 {
                                    continue;
                                }
                                let (nh, nw, nd) = (nh as usize, nw as usize, nd as usize);
                                if nh >= h || nw >= w || nd >= d {
                                    continue;
                                }
                                let n = idx(nh, nw, nd);
                                if mask[n] && !seen[n] {
                                    seen[n] = true;
                                    stack.push((nh, nw, nd));
                                }
                            }
                        }
                    }
                }
                parts.insert(set);
            }
        }
    }
    parts
}

/// Reference multi-head attention written head by head against raw slices;
/// used to pin grouped-query attention at full key/value heads.
pub struct NaiveMhaWeights<'a> {
    pub wq: &'a [f64],
    pub bq: &'a [f64],
    pub wk: &'a [f64],
    pub bk: &'a [f64],
    pub wv: &'a [f64],
    pub bv: &'a [f64],
    pub wo: &'a [f64],
    pub bo: &'a [f64],
}

pub fn naive_mha(
    q_in: &[f64],
    kv_in: &[f64],
    n_q: usize,
    n_kv: usize,
    d: usize,
    heads: usize,
    w: &NaiveMhaWeights<'_>,
) -> Vec<f64> {
    let dh = d / heads;
    let project = |x: &[f64], n: usize, wt: &[f64], b: &[f64]| -> Vec<f64> {
        let mut out = vec![0.0; n * d];
        for i in 0..n {
            for j in 0..d {
                let mut acc = b[j];
                for k in 0..d {
                    acc += x[i * d + k] * wt[k * d + j];
                }
                out[i * d + j] = acc;
            }
        }
        out
    };
    let q = project(q_in, n_q, w.wq, w.bq);
    let k = project(kv_in, n_kv, w.wk, w.bk);
    let v = project(kv_in, n_kv, w.wv, w.bv);
    let mut ctx = vec![0.0; n_q * d];
    for head in 0..heads {
        for i in 0..n_q {
            let mut scores = vec![0.0; n_kv];
            for (j, s) in scores.iter_mut().enumerate() {
                let mut acc = 0.0;
                for e in 0..dh {
                    acc += q[i * d + head * dh + e] * k[j * d + head * dh + e];
                }
                *s = acc / (dh as f64).sqrt();
            }
            let max = scores.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let mut sum = 0.0;
            for s in scores.iter_mut() {
                *s = (*s - max).exp();
                sum += *s;
            }
            for s in scores.iter_mut() {
                *s /= sum;
            }
            for e in 0..dh {
                let mut acc = 0.0;
                for (j, s) in scores.iter().enumerate() {
                    acc += s * v[j * d + head * dh + e];
                }
                ctx[i * d + head * dh + e] = acc;
            }
        }
    }
    let mut out = vec![0.0; n_q * d];
    for i in 0..n_q {
        for j in 0..d {
            let mut acc = w.bo[j];
            for e in 0..d {
                acc += ctx[i * d + e] * w.wo[e * d + j];
            }
            out[i * d + j] = acc;
        }
    }
    out
}
