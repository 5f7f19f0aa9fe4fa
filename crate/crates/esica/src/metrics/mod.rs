//! Semantic and instance segmentation metrics: DSC, NSD, connected-component
//! instance extraction, Hungarian-matched F1, and DSC over true positives.

pub mod components;
pub mod edt;
pub mod hungarian;

pub use components::{connected_components_3d, Connectivity};
pub use hungarian::{hungarian_match, InstanceMatch};

use serde::Serialize;

use crate::error::{Error, Result};

/// Binary voxel mask with physical spacing in millimeters.
#[derive(Debug, Clone)]
pub struct BinaryMask {
    pub voxels: Vec<bool>,
    pub extents: (usize, usize, usize),
    pub spacing: (f64, f64, f64),
}

impl BinaryMask {
    pub fn new(
        voxels: Vec<bool>,
        extents: (usize, usize, usize),
        spacing: (f64, f64, f64),
    ) -> Result<Self> {
        if voxels.len() != extents.0 * extents.1 * extents.2 {
            return Err(Error::contract(format!(
                "BinaryMask: {} voxels vs extents {:?}",
                voxels.len(),
                extents
            )));
        }
        if spacing.0 <= 0.0 || spacing.1 <= 0.0 || spacing.2 <= 0.0 {
            return Err(Error::contract("BinaryMask: spacing must be positive"));
        }
        Ok(BinaryMask {
            voxels,
            extents,
            spacing,
        })
    }

    pub fn count(&self) -> usize {
        self.voxels.iter().filter(|&&v| v).count()
    }

    fn check_comparable(&self, other: &BinaryMask, spacing_too: bool) -> Result<()> {
        if self.extents != other.extents {
            return Err(Error::contract(format!(
                "mask extents differ: {:?} vs {:?}",
                self.extents, other.extents
            )));
        }
        if spacing_too && self.spacing != other.spacing {
            return Err(Error::contract(format!(
                "mask spacings differ: {:?} vs {:?}",
                self.spacing, other.spacing
            )));
        }
        Ok(())
    }

    /// Foreground voxels with at least one face neighbor that is background
    /// or outside the volume.
    pub fn surface(&self) -> Vec<bool> {
        let (h, w, d) = self.extents;
        let idx = |hh: usize, ww: usize, dd: usize| (hh * w + ww) * d + dd;
        let mut surf = vec![false; self.voxels.len()];
        for hh in 0..h {
            for ww in 0..w {
                for dd in 0..d {
                    if !self.voxels[idx(hh, ww, dd)] {
                        continue;
                    }
                    let mut boundary = false;
                    for (oh, ow, od) in
                        [(-1i32, 0i32, 0i32), (1, 0, 0), (0, -1, 0), (0, 1, 0), (0, 0, -1), (0, 0, 1)]
                    {
                        let nh = hh as i32 + oh;
                        let nw = ww as i32 + ow;
                        let nd = dd as i32 + od;
                        if nh < 0
                            || nw < 0
                            || nd < 0
                            || nh as usize >= h
                            || nw as usize >= w
                            || nd as usize >= d
                            || !self.voxels[idx(nh as usize, nw as usize, nd as usize)]
                        {
                            boundary = true;
                            break;
                        }
                    }
                    surf[idx(hh, ww, dd)] = boundary;
                }
            }
        }
        surf
    }
}

/// Dice similarity coefficient 2|P∩G| / (|P|+|G|); both masks empty scores
/// 1.0 (correctly predicted absence).
pub fn dsc(pred: &BinaryMask, gt: &BinaryMask) -> Result<f64> {
    pred.check_comparable(gt, false)?;
    let mut inter = 0usize;
    let mut p = 0usize;
    let mut g = 0usize;
    for (a, b) in pred.voxels.iter().zip(&gt.voxels) {
        p += *a as usize;
        g += *b as usize;
        inter += (*a && *b) as usize;
    }
    if p + g == 0 {
        return Ok(1.0);
    }
    Ok(2.0 * inter as f64 / (p + g) as f64)
}

/// Normalized surface Dice at tolerance `tau_mm`.
///
/// Symmetric form: the fraction of surface voxels of each mask lying within
/// `tau_mm` of the other mask's surface, distances taken between voxel
/// centers with physical spacing. Both masks empty scores 1.0; exactly one
/// empty scores 0.0. `one_sided` restricts to predicted surface points.
pub fn nsd_with_options(
    pred: &BinaryMask,
    gt: &BinaryMask,
    tau_mm: f64,
    one_sided: bool,
) -> Result<f64> {
    pred.check_comparable(gt, true)?;
    let p_empty = pred.count() == 0;
    let g_empty = gt.count() == 0;
    if p_empty && g_empty {
        return Ok(1.0);
    }
    if p_empty || g_empty {
        return Ok(0.0);
    }
    let sp = pred.surface();
    let sg = gt.surface();
    let tau2 = tau_mm * tau_mm;

    let dist_g = edt::squared_edt(&sg, pred.extents, pred.spacing);
    let close_p = sp
        .iter()
        .zip(&dist_g)
        .filter(|(on, d2)| **on && **d2 <= tau2)
        .count();
    let n_p = sp.iter().filter(|&&v| v).count();
    if one_sided {
        return Ok(close_p as f64 / n_p as f64);
    }

    let dist_p = edt::squared_edt(&sp, pred.extents, pred.spacing);
    let close_g = sg
        .iter()
        .zip(&dist_p)
        .filter(|(on, d2)| **on && **d2 <= tau2)
        .count();
    let n_g = sg.iter().filter(|&&v| v).count();
    Ok((close_p + close_g) as f64 / (n_p + n_g) as f64)
}

/// Symmetric normalized surface Dice at tolerance `tau_mm`.
pub fn nsd(pred: &BinaryMask, gt: &BinaryMask, tau_mm: f64) -> Result<f64> {
    nsd_with_options(pred, gt, tau_mm, false)
}

/// Instance-level scores for a binary prediction against labeled ground
/// truth instances.
#[derive(Debug, Clone)]
pub struct InstanceScores {
    pub f1: f64,
    pub dsc_tp: f64,
    /// True when DSC-TP is reported as 0.0 because nothing matched.
    pub no_matches: bool,
    pub matching: InstanceMatch,
    pub n_pred: usize,
    pub n_gt: usize,
}

/// Extract predicted instances by 26-connected components, match them to
/// ground-truth instances by maximum-total-IoU at the 0.5 threshold, and
/// score F1 plus mean Dice over matched pairs.
pub fn instance_scores(pred: &BinaryMask, gt_labels: &[u32]) -> Result<InstanceScores> {
    if gt_labels.len() != pred.voxels.len() {
        return Err(Error::contract(
            "instance_scores: label volume size mismatch",
        ));
    }
    let (pred_labels, n_pred) =
        connected_components_3d(&pred.voxels, pred.extents, Connectivity::TwentySix);

    // Ground-truth ids, sorted, remapped to dense indices.
    let mut gt_ids: Vec<u32> = gt_labels.iter().copied().filter(|&l| l > 0).collect();
    gt_ids.sort_unstable();
    gt_ids.dedup();
    let n_gt = gt_ids.len();
    let gt_index = |label: u32| gt_ids.binary_search(&label).unwrap();

    // Pairwise intersections and sizes in one pass.
    let mut inter = vec![0u64; n_pred * n_gt];
    let mut pred_size = vec![0u64; n_pred];
    let mut gt_size = vec![0u64; n_gt];
    for (pl, gl) in pred_labels.iter().zip(gt_labels) {
        if *pl > 0 {
            pred_size[(*pl - 1) as usize] += 1;
        }
        if *gl > 0 {
            gt_size[gt_index(*gl)] += 1;
        }
        if *pl > 0 && *gl > 0 {
            inter[(*pl - 1) as usize * n_gt + gt_index(*gl)] += 1;
        }
    }
    let mut iou = vec![0.0f64; n_pred * n_gt];
    for i in 0..n_pred {
        for j in 0..n_gt {
            let inter_ij = inter[i * n_gt + j];
            let union = pred_size[i] + gt_size[j] - inter_ij;
            iou[i * n_gt + j] = if union == 0 {
                0.0
            } else {
                inter_ij as f64 / union as f64
            };
        }
    }

    let matching = hungarian_match(&iou, n_pred, n_gt, 0.5)?;
    let tp = matching.pairs.len();
    let fp = matching.unmatched_pred.len();
    let fn_ = matching.unmatched_gt.len();
    let f1 = if tp + fp + fn_ == 0 {
        1.0
    } else {
        2.0 * tp as f64 / (2 * tp + fp + fn_) as f64
    };
    let (dsc_tp, no_matches) = if tp == 0 {
        (0.0, true)
    } else {
        let mut acc = 0.0;
        for (i, j, _) in &matching.pairs {
            let inter_ij = inter[*i * n_gt + *j] as f64;
            acc += 2.0 * inter_ij / (pred_size[*i] + gt_size[*j]) as f64;
        }
        (acc / tp as f64, false)
    };
    Ok(InstanceScores {
        f1,
        dsc_tp,
        no_matches,
        matching,
        n_pred,
        n_gt,
    })
}

// ---------------------------------------------------------------------------
// Reports
// ---------------------------------------------------------------------------

/// Per-case metric row; absent fields mean "not applicable".
#[derive(Debug, Clone, Serialize)]
pub struct CaseMetrics {
    pub case: String,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub dsc: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub nsd: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub f1: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub dsc_tp: Option<f64>,
    #[serde(default, skip_serializing_if = "std::ops::Not::not")]
    pub no_matches: bool,
}

#[derive(Debug, Clone, Serialize)]
pub struct Aggregates {
    #[serde(skip_serializing_if = "Option::is_none")]
    pub dsc: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub nsd: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub f1: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub dsc_tp: Option<f64>,
    pub cases: usize,
}

/// Per-case and aggregate results, serializable to JSON and CSV.
#[derive(Debug, Clone, Serialize)]
pub struct MetricReport {
    pub schema: &'static str,
    pub cases: Vec<CaseMetrics>,
    pub aggregate: Aggregates,
}

impl MetricReport {
    pub fn new(cases: Vec<CaseMetrics>) -> MetricReport {
        let mean = |f: fn(&CaseMetrics) -> Option<f64>| -> Option<f64> {
            let vals: Vec<f64> = cases.iter().filter_map(f).collect();
            if vals.is_empty() {
                None
            } else {
                Some(vals.iter().sum::<f64>() / vals.len() as f64)
            }
        };
        let aggregate = Aggregates {
            dsc: mean(|c| c.dsc),
            nsd: mean(|c| c.nsd),
            f1: mean(|c| c.f1),
            dsc_tp: mean(|c| c.dsc_tp),
            cases: cases.len(),
        };
        MetricReport {
            schema: "esica-report-v1",
            cases,
            aggregate,
        }
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    /// One row per case per applicable metric.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("case,metric,value\n");
        for c in &self.cases {
            for (name, value) in [
                ("dsc", c.dsc),
                ("nsd", c.nsd),
                ("f1", c.f1),
                ("dsc_tp", c.dsc_tp),
            ] {
                if let Some(v) = value {
                    out.push_str(&format!("{},{},{}\n", csv_escape(&c.case), name, v));
                }
            }
        }
        out
    }
}

fn csv_escape(s: &str) -> String {
    if s.contains(',') || s.contains('"') || s.contains('\n') {
        format!("\"{}\"", s.replace('"', "\"\""))
    } else {
        s.to_string()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn mask(
        extents: (usize, usize, usize),
        spacing: (f64, f64, f64),
        on: &[(usize, usize, usize)],
    ) -> BinaryMask {
        let (_, w, d) = extents;
        let mut voxels = vec![false; extents.0 * w * d];
        for &(hh, ww, dd) in on {
            voxels[(hh * w + ww) * d + dd] = true;
        }
        BinaryMask::new(voxels, extents, spacing).unwrap()
    }

    #[test]
    fn dsc_identity_disjoint_halfway() {
        let iso = (1.0, 1.0, 1.0);
        let a = mask((3, 3, 3), iso, &[(0, 0, 0), (1, 1, 1)]);
        let b = mask((3, 3, 3), iso, &[(2, 2, 2), (0, 2, 0)]);
        assert_eq!(dsc(&a, &a).unwrap(), 1.0);
        assert_eq!(dsc(&a, &b).unwrap(), 0.0);
        // |P|=2, |G|=2, |P∩G|=1 -> 2*1/4 = 0.5
        let c = mask((3, 3, 3), iso, &[(0, 0, 0), (2, 2, 2)]);
        assert_eq!(dsc(&a, &c).unwrap(), 0.5);
    }

    #[test]
    fn dsc_both_empty_is_one_one_empty_is_zero_overlap() {
        let iso = (1.0, 1.0, 1.0);
        let empty = mask((2, 2, 2), iso, &[]);
        let full = mask((2, 2, 2), iso, &[(0, 0, 0)]);
        assert_eq!(dsc(&empty, &empty).unwrap(), 1.0);
        assert_eq!(dsc(&full, &empty).unwrap(), 0.0);
    }

    #[test]
    fn dsc_shape_mismatch_is_contract_violation() {
        let a = mask((2, 2, 2), (1.0, 1.0, 1.0), &[]);
        let b = mask((2, 2, 3), (1.0, 1.0, 1.0), &[]);
        assert!(dsc(&a, &b).is_err());
    }

    #[test]
    fn dsc_invariant_under_shared_voxel_permutation() {
        use rand::seq::SliceRandom;
        use rand::SeedableRng;
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(2);
        let iso = (1.0, 1.0, 1.0);
        let a = mask((2, 3, 2), iso, &[(0, 0, 0), (1, 2, 1), (0, 1, 1)]);
        let b = mask((2, 3, 2), iso, &[(0, 0, 0), (1, 1, 0)]);
        let before = dsc(&a, &b).unwrap();
        let mut perm: Vec<usize> = (0..12).collect();
        perm.shuffle(&mut rng);
        let pa: Vec<bool> = perm.iter().map(|&i| a.voxels[i]).collect();
        let pb: Vec<bool> = perm.iter().map(|&i| b.voxels[i]).collect();
        let a2 = BinaryMask::new(pa, (2, 3, 2), iso).unwrap();
        let b2 = BinaryMask::new(pb, (2, 3, 2), iso).unwrap();
        assert_eq!(before, dsc(&a2, &b2).unwrap());
    }

    #[test]
    fn nsd_identical_masks_score_one() {
        let m = mask((4, 4, 4), (1.5, 1.5, 1.5), &[(1, 1, 1), (1, 1, 2), (2, 1, 1)]);
        assert_eq!(nsd(&m, &m, 2.0).unwrap(), 1.0);
    }

    #[test]
    fn nsd_single_voxel_pair_at_known_distance() {
        // Two 1-voxel masks one voxel apart at 1.5 mm spacing: the surface
        // distance is 1.5 mm, inside tau = 2 mm and outside tau = 1 mm.
        let iso = (1.5, 1.5, 1.5);
        let a = mask((3, 3, 3), iso, &[(1, 1, 1)]);
        let b = mask((3, 3, 3), iso, &[(1, 1, 2)]);
        assert_eq!(nsd(&a, &b, 2.0).unwrap(), 1.0);
        assert_eq!(nsd(&a, &b, 1.0).unwrap(), 0.0);
    }

    #[test]
    fn nsd_empty_conventions() {
        let iso = (1.0, 1.0, 1.0);
        let empty = mask((3, 3, 3), iso, &[]);
        let solid = mask((3, 3, 3), iso, &[(1, 1, 1)]);
        assert_eq!(nsd(&empty, &empty, 2.0).unwrap(), 1.0);
        assert_eq!(nsd(&solid, &empty, 2.0).unwrap(), 0.0);
        assert_eq!(nsd(&empty, &solid, 2.0).unwrap(), 0.0);
    }

    #[test]
    fn nsd_spacing_mismatch_is_contract_violation() {
        let a = mask((2, 2, 2), (1.0, 1.0, 1.0), &[(0, 0, 0)]);
        let b = mask((2, 2, 2), (1.5, 1.0, 1.0), &[(0, 0, 0)]);
        assert!(nsd(&a, &b, 2.0).is_err());
    }

    /// All-pairs quadratic surface-distance oracle with the same arithmetic
    /// shape as the production distance transform.
    pub(super) fn nsd_brute_force(
        pred: &BinaryMask,
        gt: &BinaryMask,
        tau_mm: f64,
        one_sided: bool,
    ) -> f64 {
        let p_empty = pred.count() == 0;
        let g_empty = gt.count() == 0;
        if p_empty && g_empty {
            return 1.0;
        }
        if p_empty || g_empty {
            return 0.0;
        }
        let (h, w, d) = pred.extents;
        let coords = |surf: &[bool]| -> Vec<(usize, usize, usize)> {
            let mut out = Vec::new();
            for hh in 0..h {
                for ww in 0..w {
                    for dd in 0..d {
                        if surf[(hh * w + ww) * d + dd] {
                            out.push((hh, ww, dd));
                        }
                    }
                }
            }
            out
        };
        let sp = coords(&pred.surface());
        let sg = coords(&gt.surface());
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

    #[test]
    fn nsd_matches_brute_force_on_random_masks() {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(4);
        for trial in 0..25 {
            let extents = (12, 12, 12);
            let spacing = (
                rng.gen_range(2..13u32) as f64 / 8.0,
                rng.gen_range(2..13u32) as f64 / 8.0,
                rng.gen_range(2..13u32) as f64 / 8.0,
            );
            let blob = |rng: &mut rand_chacha::ChaCha8Rng| -> Vec<bool> {
                let c = (
                    rng.gen_range(2..10) as f64,
                    rng.gen_range(2..10) as f64,
                    rng.gen_range(2..10) as f64,
                );
                let r = rng.gen_range(1.0..4.0);
                (0..12 * 12 * 12)
                    .map(|i| {
                        let hh = (i / 144) as f64;
                        let ww = ((i / 12) % 12) as f64;
                        let dd = (i % 12) as f64;
                        (hh - c.0).powi(2) + (ww - c.1).powi(2) + (dd - c.2).powi(2) <= r * r
                    })
                    .collect()
            };
            let a = BinaryMask::new(blob(&mut rng), extents, spacing).unwrap();
            let b = BinaryMask::new(blob(&mut rng), extents, spacing).unwrap();
            for one_sided in [false, true] {
                let fast = nsd_with_options(&a, &b, 2.0, one_sided).unwrap();
                let slow = nsd_brute_force(&a, &b, 2.0, one_sided);
                assert!(
                    (fast - slow).abs() < 1e-9,
                    "trial {trial} one_sided {one_sided}: {fast} vs {slow}"
                );
            }
        }
    }

    #[test]
    fn nsd_is_symmetric() {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(6);
        let iso = (1.25, 1.0, 1.5);
        let random_mask = |rng: &mut rand_chacha::ChaCha8Rng| -> BinaryMask {
            let voxels: Vec<bool> = (0..6 * 6 * 6).map(|_| rng.gen_bool(0.3)).collect();
            BinaryMask::new(voxels, (6, 6, 6), iso).unwrap()
        };
        for _ in 0..10 {
            let a = random_mask(&mut rng);
            let b = random_mask(&mut rng);
            let ab = nsd(&a, &b, 2.0).unwrap();
            let ba = nsd(&b, &a, 2.0).unwrap();
            assert!((ab - ba).abs() < 1e-9);
        }
    }

    #[test]
    fn instance_perfect_detection() {
        let iso = (1.0, 1.0, 1.0);
        let pred = mask((5, 5, 5), iso, &[(0, 0, 0), (0, 0, 1), (4, 4, 4)]);
        let mut gt = vec![0u32; 125];
        gt[0] = 7; // ids need not be contiguous
        gt[1] = 7;
        gt[124] = 3;
        let s = instance_scores(&pred, &gt).unwrap();
        assert_eq!(s.f1, 1.0);
        assert_eq!(s.dsc_tp, 1.0);
        assert!(!s.no_matches);
    }

    #[test]
    fn instance_empty_prediction_counts_false_negatives() {
        let iso = (1.0, 1.0, 1.0);
        let pred = mask((5, 5, 5), iso, &[]);
        let mut gt = vec![0u32; 125];
        gt[0] = 1;
        gt[30] = 2;
        gt[124] = 3;
        let s = instance_scores(&pred, &gt).unwrap();
        assert_eq!(s.f1, 0.0);
        assert_eq!(s.dsc_tp, 0.0);
        assert!(s.no_matches);
        assert_eq!(s.n_gt, 3);
    }

    #[test]
    fn instance_hit_miss_and_spurious_blob() {
        // Two ground-truth spheres; the prediction covers one exactly,
        // misses the other, and adds one spurious blob with zero IoU:
        // TP=1, FP=1, FN=1 -> F1=0.5, DSC-TP=1.0.
        let iso = (1.0, 1.0, 1.0);
        let pred = mask((6, 6, 6), iso, &[(0, 0, 0), (0, 0, 1), (5, 5, 5)]);
        let mut gt = vec![0u32; 216];
        gt[0] = 1;
        gt[1] = 1;
        gt[3 * 36 + 3 * 6 + 3] = 2;
        let s = instance_scores(&pred, &gt).unwrap();
        assert_eq!(s.matching.pairs.len(), 1);
        assert_eq!(s.f1, 0.5);
        assert_eq!(s.dsc_tp, 1.0);
    }

    #[test]
    fn instance_f1_invariant_under_gt_relabeling() {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(8);
        let iso = (1.0, 1.0, 1.0);
        let voxels: Vec<bool> = (0..8 * 8 * 8).map(|_| rng.gen_bool(0.2)).collect();
        let pred = BinaryMask::new(voxels, (8, 8, 8), iso).unwrap();
        let gt_mask: Vec<bool> = (0..8 * 8 * 8).map(|_| rng.gen_bool(0.2)).collect();
        let (gt1, count) = connected_components_3d(&gt_mask, (8, 8, 8), Connectivity::TwentySix);
        // Relabel: id -> count + 1 - id (reverses the order).
        let gt2: Vec<u32> = gt1
            .iter()
            .map(|&l| if l == 0 { 0 } else { count as u32 + 1 - l })
            .collect();
        let s1 = instance_scores(&pred, &gt1).unwrap();
        let s2 = instance_scores(&pred, &gt2).unwrap();
        assert_eq!(s1.f1, s2.f1);
        assert!((s1.dsc_tp - s2.dsc_tp).abs() < 1e-12);
    }

    #[test]
    fn report_serializes_with_schema_and_csv_rows() {
        let report = MetricReport::new(vec![
            CaseMetrics {
                case: "vol0/class1".into(),
                dsc: Some(0.5),
                nsd: Some(0.75),
                f1: None,
                dsc_tp: None,
                no_matches: false,
            },
            CaseMetrics {
                case: "vol1/class1".into(),
                dsc: Some(1.0),
                nsd: None,
                f1: Some(0.0),
                dsc_tp: Some(0.0),
                no_matches: true,
            },
        ]);
        let json = report.to_json().unwrap();
        assert!(json.contains("esica-report-v1"));
        assert_eq!(report.aggregate.dsc, Some(0.75));
        assert_eq!(report.aggregate.nsd, Some(0.75));
        let csv = report.to_csv();
        assert!(csv.lines().count() == 1 + 2 + 3);
    }
}
