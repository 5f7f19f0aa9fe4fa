//! Sliding-window full-volume inference with Gaussian blending.

use crate::error::{Error, Result};
use crate::model::Model;
use crate::pipeline::data::LabeledVolume;
use crate::tensor::Tensor;
use crate::text::TextProvider;

#[derive(Debug, Clone)]
pub struct InferOptions {
    pub patch: (usize, usize, usize),
    /// Fractional window overlap along each axis, in [0, 1).
    pub overlap: f64,
    pub n_passes: usize,
}

impl Default for InferOptions {
    fn default() -> Self {
        InferOptions {
            patch: (96, 96, 96),
            overlap: 0.5,
            n_passes: 2,
        }
    }
}

/// Window start offsets covering [0, extent] with the given stride; the last
/// window is clamped so it ends exactly at the extent.
pub fn window_starts(extent: usize, patch: usize, stride: usize) -> Vec<usize> {
    assert!(patch <= extent && stride >= 1);
    let mut starts = Vec::new();
    let mut s = 0usize;
    loop {
        if s + patch >= extent {
            starts.push(extent - patch);
            break;
        }
        starts.push(s);
        s += stride;
    }
    starts.dedup();
    starts
}

/// Separable Gaussian blending weight over a patch, sigma = extent/8 per
/// axis, centered at the patch center.
pub fn gaussian_weight(patch: (usize, usize, usize)) -> Vec<f64> {
    let axis = |n: usize| -> Vec<f64> {
        let sigma = n as f64 / 8.0;
        let c = (n as f64 - 1.0) / 2.0;
        (0..n)
            .map(|i| (-((i as f64 - c) * (i as f64 - c)) / (2.0 * sigma * sigma)).exp())
            .collect()
    };
    let (wh, ww, wd) = (axis(patch.0), axis(patch.1), axis(patch.2));
    let mut out = Vec::with_capacity(patch.0 * patch.1 * patch.2);
    for a in &wh {
        for b in &ww {
            for c in &wd {
                out.push(a * b * c);
            }
        }
    }
    out
}

/// Blend per-window probability patches into a full map by weighted
/// averaging. Exposed for direct verification of the blending arithmetic.
pub fn blend_windows(
    windows: &[((usize, usize, usize), Vec<f64>)],
    weight: &[f64],
    extents: (usize, usize, usize),
    patch: (usize, usize, usize),
) -> Vec<f64> {
    let (h, w, d) = extents;
    let mut num = vec![0.0f64; h * w * d];
    let mut den = vec![0.0f64; h * w * d];
    for ((sh, sw, sd), probs) in windows {
        for ph in 0..patch.0 {
            for pw in 0..patch.1 {
                let src = (ph * patch.1 + pw) * patch.2;
                let dst = ((sh + ph) * w + (sw + pw)) * d + sd;
                for pd in 0..patch.2 {
                    let wv = weight[src + pd];
                    num[dst + pd] += wv * probs[src + pd];
                    den[dst + pd] += wv;
                }
            }
        }
    }
    num.iter()
        .zip(&den)
        .map(|(n, d)| if *d > 0.0 { n / d } else { 0.0 })
        .collect()
}

/// Predict a full-volume probability map for one prompt by tiling the volume
/// with overlapping patches and blending the per-patch sigmoid outputs.
pub fn sliding_window_infer(
    model: &Model,
    provider: &TextProvider,
    vol: &LabeledVolume,
    prompt: &str,
    opts: &InferOptions,
) -> Result<Vec<f64>> {
    vol.validate()?;
    if !(0.0..1.0).contains(&opts.overlap) {
        return Err(Error::config(format!(
            "sliding_window_infer: overlap {} outside [0,1)",
            opts.overlap
        )));
    }
    let emb = provider.embed(prompt)?;
    let (h, w, d) = vol.extents;
    let patch = opts.patch;

    // Pad up to the patch size when the volume is smaller.
    let (eh, ew, ed) = (h.max(patch.0), w.max(patch.1), d.max(patch.2));
    let mut padded = vec![0.0f64; eh * ew * ed];
    let src = vol.image.data();
    let (oh, ow, od) = ((eh - h) / 2, (ew - w) / 2, (ed - d) / 2);
    for hh in 0..h {
        for ww in 0..w {
            let s = (hh * w + ww) * d;
            let t = ((hh + oh) * ew + (ww + ow)) * ed + od;
            padded[t..t + d].copy_from_slice(&src[s..s + d]);
        }
    }

    let stride = |n: usize| (((n as f64) * (1.0 - opts.overlap)).round() as usize).max(1);
    let hs = window_starts(eh, patch.0, stride(patch.0));
    let ws = window_starts(ew, patch.1, stride(patch.1));
    let ds = window_starts(ed, patch.2, stride(patch.2));
    let weight = gaussian_weight(patch);

    let mut windows = Vec::with_capacity(hs.len() * ws.len() * ds.len());
    for &sh in &hs {
        for &sw in &ws {
            for &sd in &ds {
                let mut crop = Vec::with_capacity(patch.0 * patch.1 * patch.2);
                for ph in 0..patch.0 {
                    for pw in 0..patch.1 {
                        let base = ((sh + ph) * ew + (sw + pw)) * ed + sd;
                        crop.extend_from_slice(&padded[base..base + patch.2]);
                    }
                }
                let patch_tensor = Tensor::new(&[1, patch.0, patch.1, patch.2], crop)?;
                let out = model.forward_refine(&patch_tensor, &emb, opts.n_passes)?;
                let probs = out.final_logits().sigmoid()?.data().to_vec();
                windows.push(((sh, sw, sd), probs));
            }
        }
    }
    let blended = blend_windows(&windows, &weight, (eh, ew, ed), patch);

    // Crop the padding back off.
    let mut out = Vec::with_capacity(h * w * d);
    for hh in 0..h {
        for ww in 0..w {
            let base = ((hh + oh) * ew + (ww + ow)) * ed + od;
            out.extend_from_slice(&blended[base..base + d]);
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn window_starts_cover_the_extent_end_aligned() {
        assert_eq!(window_starts(48, 48, 24), vec![0]);
        assert_eq!(window_starts(96, 48, 24), vec![0, 24, 48]);
        assert_eq!(window_starts(50, 48, 24), vec![0, 2]);
    }

    #[test]
    fn single_window_blend_returns_the_window() {
        // Weight normalization cancels for a volume exactly one patch big.
        let patch = (2, 2, 2);
        let probs: Vec<f64> = (0..8).map(|i| i as f64 / 10.0).collect();
        let weight = gaussian_weight(patch);
        let out = blend_windows(&[((0, 0, 0), probs.clone())], &weight, patch, patch);
        for (a, b) in out.iter().zip(&probs) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn constant_windows_blend_to_the_same_constant() {
        let patch = (2, 2, 2);
        let weight = gaussian_weight(patch);
        let windows = vec![
            ((0usize, 0usize, 0usize), vec![0.7; 8]),
            ((1, 0, 0), vec![0.7; 8]),
        ];
        let out = blend_windows(&windows, &weight, (3, 2, 2), patch);
        for v in out {
            assert!((v - 0.7).abs() < 1e-12);
        }
    }

    #[test]
    fn two_window_overlap_matches_the_weighted_average_formula() {
        // Windows at h=0 and h=1 with constant but different probabilities;
        // at an overlap voxel the blend is (w0*p0 + w1*p1) / (w0 + w1) with
        // w taken at the voxel's in-patch offset.
        let patch = (2, 2, 2);
        let weight = gaussian_weight(patch);
        let windows = vec![
            ((0usize, 0usize, 0usize), vec![0.2; 8]),
            ((1, 0, 0), vec![0.9; 8]),
        ];
        let out = blend_windows(&windows, &weight, (3, 2, 2), patch);
        // Voxel (1, 0, 0): window 0 covers it at offset h=1, window 1 at
        // offset h=0.
        let w0 = weight[(1 * 2 + 0) * 2 + 0];
        let w1 = weight[0];
        let expect = (w0 * 0.2 + w1 * 0.9) / (w0 + w1);
        let got = out[(1 * 2 + 0) * 2 + 0];
        assert!((got - expect).abs() < 1e-12, "{got} vs {expect}");
    }

    #[test]
    fn blend_is_invariant_to_window_enumeration_order() {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(4);
        let patch = (3, 3, 3);
        let weight = gaussian_weight(patch);
        let mut windows = Vec::new();
        for sh in [0usize, 2, 4] {
            for sw in [0usize, 3] {
                let probs: Vec<f64> = (0..27).map(|_| rng.gen::<f64>()).collect();
                windows.push(((sh, sw, 0usize), probs));
            }
        }
        let a = blend_windows(&windows, &weight, (7, 6, 3), patch);
        windows.reverse();
        let b = blend_windows(&windows, &weight, (7, 6, 3), patch);
        for (x, y) in a.iter().zip(&b) {
            assert!((x - y).abs() < 1e-6);
        }
    }

    #[test]
    fn gaussian_weight_peaks_at_the_center() {
        let w = gaussian_weight((5, 5, 5));
        let center = (2 * 5 + 2) * 5 + 2;
        let max = w.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        assert_eq!(w[center], max);
        assert!(w.iter().all(|&v| v > 0.0));
    }
}
