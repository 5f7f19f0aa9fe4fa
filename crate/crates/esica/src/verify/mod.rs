//! Verification suites: gradient checks, metric oracles, attention algebra,
//! cost-model cross-checks, serialization round-trips, and the training
//! trend experiments. Each suite returns one line per check so callers can
//! print pass/fail summaries.

pub mod oracles;
mod trends;

pub use trends::{
    convergence_suite, curriculum_trend, refinement_trend, similarity_discrimination,
    trend_dataset, RefinementArtifacts, TrendParams,
};

use rand::{Rng, SeedableRng};
use rand_chacha::{ChaCha20Rng, ChaCha8Rng};

use crate::cost::{count_cost, count_macs, measure_macs, LayerSpec};
use crate::error::Result;
use crate::metrics::{
    connected_components_3d, dsc, hungarian::brute_force_best_total, hungarian_match, nsd,
    BinaryMask, Connectivity,
};
use crate::model::{Model, ModelConfig};
use crate::nn::{GqaAttention, ParamStore};
use crate::pipeline::loss::dice_focal_loss;
use crate::tensor::{grad_check, Axis, Tensor};
use crate::text::embed_toy;

#[derive(Debug, Clone)]
pub struct Check {
    pub name: String,
    pub passed: bool,
    pub detail: String,
}

#[derive(Debug, Clone)]
pub struct SuiteReport {
    pub suite: String,
    pub checks: Vec<Check>,
}

impl SuiteReport {
    fn new(suite: &str) -> Self {
        SuiteReport {
            suite: suite.to_string(),
            checks: Vec::new(),
        }
    }

    fn push(&mut self, name: impl Into<String>, passed: bool, detail: impl Into<String>) {
        self.checks.push(Check {
            name: name.into(),
            passed,
            detail: detail.into(),
        });
    }

    pub fn passed(&self) -> bool {
        self.checks.iter().all(|c| c.passed)
    }

    pub fn render(&self) -> String {
        let mut out = String::new();
        for c in &self.checks {
            out.push_str(&format!(
                "[{}] {}::{} {}\n",
                if c.passed { "PASS" } else { "FAIL" },
                self.suite,
                c.name,
                c.detail
            ));
        }
        out
    }
}

const GRAD_TOL: f64 = 1e-4;
const GRAD_STEP: f64 = 1e-5;

fn record_grad(report: &mut SuiteReport, name: &str, result: Result<f64>) {
    match result {
        Ok(err) => report.push(
            name,
            err < GRAD_TOL,
            format!("max rel err {err:.3e} (tol {GRAD_TOL:.0e})"),
        ),
        Err(e) => report.push(name, false, format!("error: {e}")),
    }
}

/// Gradient suite: every differentiable op plus the fully composed model,
/// against central finite differences, three seeds each.
pub fn gradcheck_suite() -> SuiteReport {
    let mut report = SuiteReport::new("gradcheck");
    for seed in 0..3u64 {
        let mut rng = ChaCha20Rng::seed_from_u64(seed);
        let sq = |t: &Tensor| -> Result<Tensor> { t.mul(t)?.sum_all() };

        let a = Tensor::randn(&[2, 3, 4], 1.0, &mut rng);
        let b = Tensor::randn(&[2, 3, 4], 1.0, &mut rng).affine(1.0, 2.5).unwrap().detach();
        record_grad(&mut report, &format!("add[{seed}]"), grad_check(|t| sq(&t.add(&b)?), &a, GRAD_STEP));
        record_grad(&mut report, &format!("sub[{seed}]"), grad_check(|t| sq(&t.sub(&b)?), &a, GRAD_STEP));
        record_grad(&mut report, &format!("mul[{seed}]"), grad_check(|t| sq(&t.mul(&b)?), &a, GRAD_STEP));
        record_grad(&mut report, &format!("div[{seed}]"), grad_check(|t| sq(&t.div(&b)?), &a, GRAD_STEP));
        record_grad(&mut report, &format!("affine[{seed}]"), grad_check(|t| sq(&t.affine(0.7, -0.2)?), &a, GRAD_STEP));
        record_grad(&mut report, &format!("gelu[{seed}]"), grad_check(|t| sq(&t.gelu()?), &a, GRAD_STEP));
        record_grad(&mut report, &format!("sigmoid[{seed}]"), grad_check(|t| sq(&t.sigmoid()?), &a, GRAD_STEP));
        // ReLU checked away from its kink.
        let off = Tensor::new(&[4], vec![-1.3, 0.8, 2.1, -0.4]).unwrap();
        record_grad(&mut report, &format!("relu[{seed}]"), grad_check(|t| sq(&t.relu()?), &off, GRAD_STEP));
        let pos = a.mul(&a).unwrap().affine(1.0, 0.5).unwrap().detach();
        record_grad(&mut report, &format!("ln[{seed}]"), grad_check(|t| sq(&t.ln()?), &pos, GRAD_STEP));
        record_grad(&mut report, &format!("pow_scalar[{seed}]"), grad_check(|t| sq(&t.pow_scalar(1.7)?), &pos, GRAD_STEP));
        record_grad(&mut report, &format!("sum_all[{seed}]"), grad_check(|t| t.sum_all()?.mul(&t.sum_all()?)?.sum_all(), &a, GRAD_STEP));
        record_grad(&mut report, &format!("mean_all[{seed}]"), grad_check(|t| t.mean_all()?.mul(&t.mean_all()?)?.sum_all(), &a, GRAD_STEP));

        let m = Tensor::randn(&[3, 4], 1.0, &mut rng);
        let w = Tensor::randn(&[4, 2], 1.0, &mut rng).detach();
        record_grad(&mut report, &format!("matmul[{seed}]"), grad_check(|t| sq(&t.matmul(&w)?), &m, GRAD_STEP));
        record_grad(&mut report, &format!("transpose2d[{seed}]"), grad_check(|t| sq(&t.transpose2d()?.matmul(&m.detach())?), &m, GRAD_STEP));
        record_grad(&mut report, &format!("softmax_rows[{seed}]"), grad_check(|t| sq(&t.softmax_rows()?.mul(&t)?), &m, GRAD_STEP));
        let gamma = Tensor::randn(&[4], 0.5, &mut rng).detach();
        let beta = Tensor::randn(&[4], 0.5, &mut rng).detach();
        record_grad(&mut report, &format!("layer_norm_rows[{seed}]"), grad_check(|t| sq(&t.layer_norm_rows(&gamma, &beta, 1e-6)?), &m, GRAD_STEP));
        let vol = Tensor::randn(&[4, 2, 3, 2], 1.0, &mut rng);
        record_grad(&mut report, &format!("layer_norm_channels[{seed}]"), grad_check(|t| sq(&t.layer_norm_channels(&gamma, &beta, 1e-6)?), &vol, GRAD_STEP));
        record_grad(&mut report, &format!("reshape[{seed}]"), grad_check(|t| sq(&t.reshape(&[4, 6])?.matmul(&Tensor::full(&[6, 2], 0.3))?), &a, GRAD_STEP));
        record_grad(&mut report, &format!("concat_slice[{seed}]"), grad_check(
            |t| {
                let c = Tensor::concat_rows(&[t.clone(), t.slice_rows(0, 1)?])?;
                let cc = Tensor::concat_cols(&[c.slice_cols(0, 2)?, c.slice_cols(2, 2)?])?;
                sq(&cc.slice_rows(1, 2)?)
            },
            &m,
            GRAD_STEP,
        ));
        let bias = Tensor::randn(&[4], 1.0, &mut rng).detach();
        record_grad(&mut report, &format!("add_bias_rows[{seed}]"), grad_check(|t| sq(&t.add_bias_rows(&bias)?), &m, GRAD_STEP));
        let v = Tensor::randn(&[3], 1.0, &mut rng);
        record_grad(&mut report, &format!("broadcast_channels[{seed}]"), grad_check(|t| sq(&t.broadcast_channels((2, 2, 2))?), &v, GRAD_STEP));
        let rows = Tensor::randn(&[3, 8], 1.0, &mut rng);
        record_grad(&mut report, &format!("rope_apply[{seed}]"), grad_check(|t| sq(&t.rope_apply(&[0, 5, 17])?), &rows, GRAD_STEP));

        // Convolutions and resampling.
        let x = Tensor::randn(&[2, 4, 4, 4], 0.8, &mut rng);
        let cw = Tensor::randn(&[3, 2, 3, 3, 3], 0.3, &mut rng);
        let cb = Tensor::randn(&[3], 0.1, &mut rng).detach();
        record_grad(&mut report, &format!("conv3d_input[{seed}]"), grad_check(|t| sq(&t.conv3d(&cw.detach(), &cb, 1)?), &x, GRAD_STEP));
        record_grad(&mut report, &format!("conv3d_weight[{seed}]"), grad_check(|t| sq(&x.conv3d(t, &cb, 1)?), &cw, GRAD_STEP));
        record_grad(&mut report, &format!("conv3d_stride2[{seed}]"), grad_check(|t| sq(&x.conv3d(t, &cb, 2)?), &cw, GRAD_STEP));
        let aw = Tensor::randn(&[2, 3], 0.5, &mut rng);
        for (axis, name) in [(Axis::H, "h"), (Axis::W, "w"), (Axis::D, "d")] {
            record_grad(&mut report, &format!("axial_{name}[{seed}]"), grad_check(|t| sq(&x.depthwise_axial_conv3d(axis, t, Some(&cb.slice_rows(0, 2)?.detach()))?), &aw, GRAD_STEP));
        }
        let dw = Tensor::randn(&[2, 3, 3, 3], 0.3, &mut rng);
        record_grad(&mut report, &format!("depthwise_full[{seed}]"), grad_check(|t| sq(&x.depthwise_full_conv3d(t, None)?), &dw, GRAD_STEP));
        record_grad(&mut report, &format!("trilinear_resize[{seed}]"), grad_check(|t| sq(&t.trilinear_resize((6, 5, 7))?), &x, GRAD_STEP));

        // Dice-Focal loss.
        let target_data: Vec<f64> = (0..27).map(|i| ((i * 5) % 4 == 0) as u8 as f64).collect();
        let target = Tensor::new(&[1, 3, 3, 3], target_data).unwrap();
        let logits = Tensor::randn(&[1, 3, 3, 3], 1.5, &mut rng);
        record_grad(&mut report, &format!("dice_focal[{seed}]"), grad_check(|t| dice_focal_loss(t, &target, 1.0, 2.0), &logits, GRAD_STEP));
    }

    // The fully composed model: loss through two refinement passes, against
    // the input volume and a spread of parameters on every subpath.
    for seed in 0..3u64 {
        let model = Model::new(&ModelConfig::micro(), 40 + seed).unwrap();
        let mut rng = ChaCha20Rng::seed_from_u64(70 + seed);
        let patch = Tensor::randn(&[1, 4, 4, 4], 0.4, &mut rng);
        let target_data: Vec<f64> = (0..64).map(|i| ((i * 3) % 5 == 0) as u8 as f64).collect();
        let target = Tensor::new(&[1, 4, 4, 4], target_data).unwrap();
        let emb = embed_toy("bright sphere", 16).unwrap();
        let loss_of = |m: &Model, input: &Tensor| -> Result<Tensor> {
            let out = m.forward_refine(input, &emb, 2)?;
            let l1 = dice_focal_loss(&out.per_pass[0], &target, 1.0, 2.0)?;
            let l2 = dice_focal_loss(&out.per_pass[1], &target, 1.0, 2.0)?;
            l1.add(&l2)?.scale(0.5)
        };
        record_grad(
            &mut report,
            &format!("model_wrt_input[{seed}]"),
            grad_check(|t| loss_of(&model, t), &patch, GRAD_STEP),
        );
        for name in [
            "encoder.stem.dw_h.weight",
            "encoder.stem.local.weight",
            "encoder.stage1.down.weight",
            "encoder.attn.wq.weight",
            "text_proj.weight",
            "prompt.dense_template",
            "prompt.extractor.stage0.down.weight",
            "fusion.mask_tokens",
            "fusion.block0.cross_iq.wv.weight",
            "decoder.adapter0.proj.weight",
            "decoder.up0.refine.bias",
            "decoder.mask_mlp1.weight",
        ] {
            let base = model
                .store
                .find(name)
                .map(|id| model.store.get(id).detach())
                .expect(name);
            let result = grad_check(
                |t| {
                    let mut m = model.clone();
                    m.set_param_by_name(name, t.clone())?;
                    loss_of(&m, &patch)
                },
                &base,
                GRAD_STEP,
            );
            record_grad(&mut report, &format!("model[{seed}].{name}"), result);
        }
    }
    report
}

/// Metric oracle suite: 200 random instances per metric against brute force.
pub fn oracle_suite() -> SuiteReport {
    let mut report = SuiteReport::new("oracles");
    let mut rng = ChaCha8Rng::seed_from_u64(71);

    // Dice against explicit set arithmetic; exact.
    let mut worst = 0usize;
    let mut all_exact = true;
    for _ in 0..200 {
        let extents = (
            rng.gen_range(2..8usize),
            rng.gen_range(2..8usize),
            rng.gen_range(2..8usize),
        );
        let n = extents.0 * extents.1 * extents.2;
        let iso = (1.0, 1.0, 1.0);
        let a = BinaryMask::new((0..n).map(|_| rng.gen_bool(0.4)).collect(), extents, iso).unwrap();
        let b = BinaryMask::new((0..n).map(|_| rng.gen_bool(0.4)).collect(), extents, iso).unwrap();
        if dsc(&a, &b).unwrap() != oracles::dsc_by_sets(&a, &b) {
            all_exact = false;
            worst += 1;
        }
    }
    report.push("dsc_vs_sets_200", all_exact, format!("{worst} mismatches"));

    // NSD against all-pairs surface distances; < 1e-9.
    let mut max_diff = 0.0f64;
    for _ in 0..200 {
        let extents = (10, 10, 10);
        let spacing = (
            rng.gen_range(2..13u32) as f64 / 8.0,
            rng.gen_range(2..13u32) as f64 / 8.0,
            rng.gen_range(2..13u32) as f64 / 8.0,
        );
        let blob = |rng: &mut ChaCha8Rng| -> Vec<bool> {
            let c = (
                rng.gen_range(2.0..8.0f64),
                rng.gen_range(2.0..8.0f64),
                rng.gen_range(2.0..8.0f64),
            );
            let r = rng.gen_range(1.0..3.5f64);
            (0..1000)
                .map(|i| {
                    let hh = (i / 100) as f64;
                    let ww = ((i / 10) % 10) as f64;
                    let dd = (i % 10) as f64;
                    (hh - c.0).powi(2) + (ww - c.1).powi(2) + (dd - c.2).powi(2) <= r * r
                })
                .collect()
        };
        let a = BinaryMask::new(blob(&mut rng), extents, spacing).unwrap();
        let b = BinaryMask::new(blob(&mut rng), extents, spacing).unwrap();
        let fast = nsd(&a, &b, 2.0).unwrap();
        let slow = oracles::nsd_all_pairs(&a, &b, 2.0, false);
        max_diff = max_diff.max((fast - slow).abs());
    }
    report.push(
        "nsd_vs_all_pairs_200",
        max_diff < 1e-9,
        format!("max |diff| {max_diff:.3e}"),
    );

    // Connected components against flood fill; exact partition equality.
    let mut cc_ok = true;
    for _ in 0..200 {
        let extents = (
            rng.gen_range(2..9usize),
            rng.gen_range(2..9usize),
            rng.gen_range(2..9usize),
        );
        let n = extents.0 * extents.1 * extents.2;
        let mask: Vec<bool> = (0..n).map(|_| rng.gen_bool(0.35)).collect();
        for conn in [Connectivity::Six, Connectivity::TwentySix] {
            let (labels, count) = connected_components_3d(&mask, extents, conn);
            let mut by_label: std::collections::HashMap<u32, std::collections::BTreeSet<usize>> =
                std::collections::HashMap::new();
            for (i, &l) in labels.iter().enumerate() {
                if l > 0 {
                    by_label.entry(l).or_default().insert(i);
                }
            }
            let ours: std::collections::BTreeSet<_> = by_label.into_values().collect();
            let oracle = oracles::components_by_flood_fill(&mask, extents, conn);
            if ours != oracle || ours.len() != count {
                cc_ok = false;
            }
        }
    }
    report.push("components_vs_flood_fill_200", cc_ok, "partition equality");

    // Hungarian totals against permutation enumeration on 1/64-grid IoUs;
    // exact equality.
    let mut hung_ok = true;
    for _ in 0..200 {
        let n_pred = rng.gen_range(1..=6usize);
        let n_gt = rng.gen_range(1..=6usize);
        let iou: Vec<f64> = (0..n_pred * n_gt)
            .map(|_| rng.gen_range(0..=64u32) as f64 / 64.0)
            .collect();
        let m = hungarian_match(&iou, n_pred, n_gt, 0.0).unwrap();
        let total: f64 = m.pairs.iter().map(|(_, _, v)| v).sum();
        if total != brute_force_best_total(&iou, n_pred, n_gt) {
            hung_ok = false;
        }
    }
    report.push("hungarian_vs_permutations_200", hung_ok, "exact totals");
    report
}

/// Attention algebra: grouped queries at full key/value heads equal plain
/// multi-head attention; rotary embeddings preserve norms and depend only on
/// relative positions.
pub fn attention_algebra_suite() -> SuiteReport {
    let mut report = SuiteReport::new("attention");
    // Head dims used across the default configs plus the verification model.
    for &(d_model, heads) in &[(192usize, 12usize), (128, 2), (32, 4), (8, 2)] {
        let mut rng = ChaCha20Rng::seed_from_u64(5_000 + d_model as u64);
        let mut store = ParamStore::new();
        let attn = GqaAttention::new(&mut store, "a", d_model, heads, heads, &mut rng).unwrap();
        let n_q = 4;
        let n_kv = 6;
        let q = Tensor::randn(&[n_q, d_model], 1.0, &mut rng);
        let kv = Tensor::randn(&[n_kv, d_model], 1.0, &mut rng);
        let ours = attn
            .forward(&store, &q, &kv, None, None, "t", None)
            .unwrap();
        let weights = oracles::NaiveMhaWeights {
            wq: store.get(attn.wq.weight).data(),
            bq: store.get(attn.wq.bias).data(),
            wk: store.get(attn.wk.weight).data(),
            bk: store.get(attn.wk.bias).data(),
            wv: store.get(attn.wv.weight).data(),
            bv: store.get(attn.wv.bias).data(),
            wo: store.get(attn.wo.weight).data(),
            bo: store.get(attn.wo.bias).data(),
        };
        let reference = oracles::naive_mha(q.data(), kv.data(), n_q, n_kv, d_model, heads, &weights);
        let max_diff = ours
            .data()
            .iter()
            .zip(&reference)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0f64, f64::max);
        report.push(
            format!("gqa_equals_mha_d{d_model}_h{heads}"),
            max_diff < 1e-6,
            format!("max |diff| {max_diff:.3e}"),
        );

        // Rotary algebra at this head dim.
        let dh = d_model / heads;
        let mut norm_err = 0.0f64;
        let mut rel_err = 0.0f64;
        for trial in 0..20 {
            let mut r2 = ChaCha20Rng::seed_from_u64(9_000 + trial);
            let x = Tensor::randn(&[1, dh], 1.0, &mut r2);
            let y = Tensor::randn(&[1, dh], 1.0, &mut r2);
            let m = r2.gen_range(0..500usize);
            let n = r2.gen_range(0..500usize);
            let s = r2.gen_range(1..1000usize);
            let norm = |t: &Tensor| t.data().iter().map(|v| v * v).sum::<f64>().sqrt();
            let xr = x.rope_apply(&[m]).unwrap();
            norm_err = norm_err.max((norm(&x) - norm(&xr)).abs());
            let dot = |a: &Tensor, b: &Tensor| -> f64 {
                a.data().iter().zip(b.data()).map(|(p, q)| p * q).sum()
            };
            let base = dot(&x.rope_apply(&[m]).unwrap(), &y.rope_apply(&[n]).unwrap());
            let shifted = dot(
                &x.rope_apply(&[m + s]).unwrap(),
                &y.rope_apply(&[n + s]).unwrap(),
            );
            rel_err = rel_err.max((base - shifted).abs());
        }
        report.push(
            format!("rope_norms_d{dh}"),
            norm_err < 1e-6,
            format!("max norm drift {norm_err:.3e}"),
        );
        report.push(
            format!("rope_relative_position_d{dh}"),
            rel_err < 1e-5,
            format!("max score drift {rel_err:.3e}"),
        );
    }
    report
}

/// Cost model: analytic counts equal instrumented execution, the decomposed
/// block's parameter delta is 28*C per block, and the pinned decomposed vs
/// dense 7^3 comparison at C=64 over 24^3 matches exactly.
pub fn cost_suite() -> SuiteReport {
    let mut report = SuiteReport::new("cost");
    let mut rng = ChaCha8Rng::seed_from_u64(31);
    let mut mismatches = Vec::new();
    for i in 0..20 {
        let e = (
            rng.gen_range(2..6usize),
            rng.gen_range(2..6usize),
            rng.gen_range(2..6usize),
        );
        let odd = |r: &mut ChaCha8Rng| 2 * r.gen_range(0..3usize) + 1;
        let c = rng.gen_range(1..5usize);
        let spec = match i % 7 {
            0 => LayerSpec::dense_conv3d(
                "dense",
                c,
                rng.gen_range(1..5),
                (odd(&mut rng), odd(&mut rng), odd(&mut rng)),
                e,
                if rng.gen_bool(0.5) { 1 } else { 2 },
            ),
            1 => LayerSpec::depthwise_axial("ax", c, (1, odd(&mut rng), 1), e),
            2 => LayerSpec::depthwise_full("dw", c, (odd(&mut rng), odd(&mut rng), odd(&mut rng)), e),
            3 => LayerSpec::linear("lin", c + 1, rng.gen_range(1..6), e),
            4 => {
                let hq = [1usize, 2, 4][rng.gen_range(0..3)];
                let dh = 2 * rng.gen_range(1..4usize);
                if rng.gen_bool(0.5) {
                    LayerSpec::attention("attn", hq * dh, hq, 1, (e.0, e.1, 1))
                } else {
                    LayerSpec::cross_attention("xattn", hq * dh, hq, hq, (e.0, 1, 1), (e.1, e.2, 1))
                }
            }
            5 => LayerSpec::norm("norm", c, e),
            _ => LayerSpec::resize(
                "rs",
                c,
                e,
                (
                    rng.gen_range(1..8usize),
                    rng.gen_range(1..8usize),
                    rng.gen_range(1..8usize),
                ),
            ),
        };
        let (_, analytic) = count_macs(&spec).unwrap();
        let measured = measure_macs(&spec).unwrap();
        if analytic != measured {
            mismatches.push(format!("{:?}: {analytic} vs {measured}", spec.kind));
        }
    }
    report.push(
        "instrumented_equals_analytic_20",
        mismatches.is_empty(),
        if mismatches.is_empty() {
            "exact".to_string()
        } else {
            mismatches.join("; ")
        },
    );

    // Pinned comparison: three axial k=7 branches + one depthwise 3^3 branch
    // vs a dense 7^3 convolution at C=64 over 24^3.
    let c = 64;
    let extent = (24, 24, 24);
    let branches = [
        LayerSpec::depthwise_axial("h", c, (7, 1, 1), extent),
        LayerSpec::depthwise_axial("w", c, (1, 7, 1), extent),
        LayerSpec::depthwise_axial("d", c, (1, 1, 7), extent),
        LayerSpec::depthwise_full("local", c, (3, 3, 3), extent),
    ];
    let dense = LayerSpec::dense_conv3d("dense", c, c, (7, 7, 7), extent, 1);
    let analytic_branches: u64 = branches.iter().map(|s| count_macs(s).unwrap().1).sum();
    let analytic_dense = count_macs(&dense).unwrap().1;
    let measured_branches: u64 = branches.iter().map(|s| measure_macs(s).unwrap()).sum();
    let measured_dense = measure_macs(&dense).unwrap();
    let exact = analytic_branches == measured_branches
        && analytic_dense == measured_dense
        && analytic_branches * (c as u64) * 343 == analytic_dense * 48;
    report.push(
        "decomposed_vs_dense_c64_24cubed",
        exact,
        format!(
            "branches {analytic_branches} MACs vs dense {analytic_dense} MACs (ratio 48/{})",
            c * 343
        ),
    );

    // Parameter delta of the 3^3 branch: exactly 28*C per block, measured on
    // real models.
    let base = crate::encoder::EncoderConfig {
        stem_channels: 8,
        stage_channels: vec![8, 16, 32],
        stage_depths: vec![1, 2, 1],
        axial_kernels: (5, 5, 5),
        attn_heads: 2,
        ..Default::default()
    };
    let mut with = ParamStore::new();
    let mut rng2 = ChaCha20Rng::seed_from_u64(1);
    crate::encoder::Encoder::new(&mut with, &base, &mut rng2).unwrap();
    let mut cfg_off = base.clone();
    cfg_off.local_branch = false;
    let mut without = ParamStore::new();
    crate::encoder::Encoder::new(&mut without, &cfg_off, &mut rng2).unwrap();
    let expected: u64 = [8u64, 8, 16, 16, 32].iter().map(|c| 28 * c).sum();
    let delta = with.param_count() - without.param_count();
    report.push(
        "local_branch_param_delta",
        delta == expected,
        format!("delta {delta} == sum 28*C {expected}"),
    );

    // Analytic plan totals reconcile with a live model's parameter count.
    let mut cfg = crate::config::RunConfig::default();
    cfg.encoder = crate::encoder::EncoderConfig {
        stem_channels: 4,
        stage_channels: vec![4, 8],
        stage_depths: vec![1, 1],
        axial_kernels: (3, 3, 3),
        attn_heads: 2,
        ..Default::default()
    };
    cfg.fusion = crate::fusion::FusionConfig {
        d_model: 16,
        n_layers: 2,
        query_heads: 2,
        kv_heads: 1,
        n_mask_tokens: 1,
        mlp_ratio: 2,
    };
    cfg.decoder = crate::decoder::DecoderConfig {
        hidden_dim: 4,
        adapter_kernels: vec![3, 3],
    };
    cfg.text.d_text = 16;
    let report_cost = crate::plan::model_cost_report(&cfg, (8, 8, 8)).unwrap();
    let model = Model::new(&cfg.model_config(), 2).unwrap();
    let d = cfg.fusion.d_model as u64;
    let h = cfg.decoder.hidden_dim as u64;
    let expected_total = report_cost.params + 3 * d + (h + 1);
    report.push(
        "plan_reconciles_with_model",
        expected_total == model.param_count(),
        format!("plan {} + embeddings/head = model {}", report_cost.params, model.param_count()),
    );
    let sums_ok = report_cost.params
        == report_cost.per_layer.iter().map(|l| l.params).sum::<u64>()
        && report_cost.flops == report_cost.per_layer.iter().map(|l| l.flops).sum::<u64>();
    report.push("report_totals_are_sums", sums_ok, "per-layer sums");
    report
}

/// Serialization: byte-exact round trips and typed errors on corruption for
/// every on-disk format.
pub fn serialization_suite() -> SuiteReport {
    use crate::error::Error;
    use crate::formats::{esck, esv1};
    let mut report = SuiteReport::new("serialization");
    let dir = match tempfile::TempDir::with_prefix("esica-verify") {
        Ok(d) => d,
        Err(e) => {
            report.push("tempdir", false, e.to_string());
            return report;
        }
    };

    // ESV1.
    let vol = esv1::Esv1Volume {
        dims: (3, 4, 5),
        spacing: (1.5, 1.5, 1.5),
        payload: esv1::Esv1Payload::ImageF32((0..60).map(|i| (i as f32).sin()).collect()),
    };
    let path = dir.path().join("v.esv1");
    let rt = esv1::write_esv1(&path, &vol)
        .and_then(|_| {
            let bytes1 = std::fs::read(&path)?;
            let loaded = esv1::read_esv1(&path)?;
            esv1::write_esv1(&path, &loaded)?;
            Ok(bytes1 == std::fs::read(&path)?)
        })
        .unwrap_or(false);
    report.push("esv1_round_trip", rt, "byte-exact");
    let bytes = std::fs::read(&path).unwrap_or_default();
    let mut bad = bytes.clone();
    bad[0] = b'Q';
    let magic_typed = matches!(esv1::parse_esv1(&bad, "mem"), Err(Error::Parse { .. }));
    let trunc_typed = matches!(
        esv1::parse_esv1(&bytes[..bytes.len() - 2], "mem"),
        Err(Error::Parse { .. })
    );
    report.push("esv1_corruption_typed", magic_typed && trunc_typed, "magic + length");

    // ESCK.
    let model = Model::new(&ModelConfig::micro(), 11).unwrap();
    let cpath = dir.path().join("m.esck");
    let rt = esck::save_checkpoint(&cpath, &model.store)
        .and_then(|_| {
            let bytes1 = std::fs::read(&cpath)?;
            let mut again = Model::new(&ModelConfig::micro(), 12)?;
            esck::load_checkpoint(&cpath, &mut again.store)?;
            esck::save_checkpoint(&cpath, &again.store)?;
            Ok(bytes1 == std::fs::read(&cpath)?)
        })
        .unwrap_or(false);
    report.push("esck_round_trip", rt, "byte-exact");
    let bytes = std::fs::read(&cpath).unwrap_or_default();
    let mut bad = bytes.clone();
    bad[1] = b'!';
    let magic_typed = matches!(esck::parse_checkpoint(&bad, "mem"), Err(Error::Parse { .. }));
    let trunc_typed = matches!(
        esck::parse_checkpoint(&bytes[..bytes.len() / 2], "mem"),
        Err(Error::Parse { .. })
    );
    report.push("esck_corruption_typed", magic_typed && trunc_typed, "magic + length");

    // Embedding tables.
    let tpath = dir.path().join("emb.txt");
    let entries = vec![
        ("bright sphere".to_string(), vec![0.25, -1.0 / 3.0, 1e-300]),
        ("dark cube".to_string(), vec![1.0, 2.0, -3.5]),
    ];
    let rt = crate::text::save_table(&tpath, 3, &entries)
        .and_then(|_| {
            let bytes1 = std::fs::read(&tpath)?;
            let table = crate::text::load_table(&tpath)?;
            let same = entries.iter().all(|(p, v)| {
                table
                    .get(p)
                    .map(|e| e.vector.data() == v.as_slice())
                    .unwrap_or(false)
            });
            let reentries: Vec<(String, Vec<f64>)> = table
                .prompts()
                .map(|p| (p.to_string(), table.get(p).unwrap().vector.data().to_vec()))
                .collect();
            crate::text::save_table(&tpath, 3, &reentries)?;
            Ok(same && bytes1 == std::fs::read(&tpath)?)
        })
        .unwrap_or(false);
    report.push("embedding_table_round_trip", rt, "bitwise floats");
    let magic_typed = matches!(
        crate::text::parse_table("NOPE v1 3\n", "mem"),
        Err(Error::Parse { .. })
    );
    let dup_typed = matches!(
        crate::text::parse_table("ESICA-EMB v1 1\n\"a\"\t1\n\"a\"\t2\n", "mem"),
        Err(Error::Parse { .. })
    );
    report.push("embedding_table_errors_typed", magic_typed && dup_typed, "magic + duplicates");
    report
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn attention_and_cost_suites_pass() {
        let a = attention_algebra_suite();
        assert!(a.passed(), "{}", a.render());
        let c = cost_suite();
        assert!(c.passed(), "{}", c.render());
    }

    #[test]
    fn serialization_suite_passes() {
        let s = serialization_suite();
        assert!(s.passed(), "{}", s.render());
    }
}
