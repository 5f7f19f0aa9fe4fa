//! Trilinear resampling with the half-pixel (align-corners-false) convention.

use super::{GradFn, Tensor};
use crate::error::{Error, Result};

/// Per-axis source indices and interpolation weight for each output index.
///
/// Source coordinate of output j is (j + 0.5) * (n_in / n_out) - 0.5; the two
/// bracketing samples are clamped to the valid range, so edge outputs
/// replicate the border value.
pub(crate) struct AxisMap {
    pub i0: Vec<usize>,
    pub i1: Vec<usize>,
    pub w1: Vec<f64>,
}

pub(crate) fn axis_map(n_in: usize, n_out: usize) -> AxisMap {
    let scale = n_in as f64 / n_out as f64;
    let mut i0 = Vec::with_capacity(n_out);
    let mut i1 = Vec::with_capacity(n_out);
    let mut w1 = Vec::with_capacity(n_out);
    for j in 0..n_out {
        let x = (j as f64 + 0.5) * scale - 0.5;
        let x0 = x.floor();
        let frac = x - x0;
        let a = (x0 as isize).clamp(0, n_in as isize - 1) as usize;
        let b = (x0 as isize + 1).clamp(0, n_in as isize - 1) as usize;
        i0.push(a);
        i1.push(b);
        w1.push(frac);
    }
    AxisMap { i0, i1, w1 }
}

/// Nearest source index per output index under the same half-pixel convention.
pub(crate) fn axis_map_nearest(n_in: usize, n_out: usize) -> Vec<usize> {
    let scale = n_in as f64 / n_out as f64;
    (0..n_out)
        .map(|j| {
            let x = (j as f64 + 0.5) * scale - 0.5;
            (x.round() as isize).clamp(0, n_in as isize - 1) as usize
        })
        .collect()
}

struct TrilinearFn {
    parents: [Tensor; 1],
    in_extents: (usize, usize, usize),
    out_extents: (usize, usize, usize),
}

impl GradFn for TrilinearFn {
    fn parents(&self) -> &[Tensor] {
        &self.parents
    }

    fn backward(&self, g: &[f64]) -> Vec<Option<Vec<f64>>> {
        let (ih, iw, id) = self.in_extents;
        let (oh, ow, od) = self.out_extents;
        let c = self.parents[0].shape()[0];
        let mh = axis_map(ih, oh);
        let mw = axis_map(iw, ow);
        let md = axis_map(id, od);
        let in_sp = ih * iw * id;
        let out_sp = oh * ow * od;
        let mut din = vec![0.0; c * in_sp];
        for ch in 0..c {
            let g_ch = &g[ch * out_sp..(ch + 1) * out_sp];
            let d_ch = &mut din[ch * in_sp..(ch + 1) * in_sp];
            for (jh, (&h0, (&h1, &fh))) in
                mh.i0.iter().zip(mh.i1.iter().zip(mh.w1.iter())).enumerate()
            {
                for (jw, (&w0, (&w1x, &fw))) in
                    mw.i0.iter().zip(mw.i1.iter().zip(mw.w1.iter())).enumerate()
                {
                    for (jd, (&d0, (&d1, &fd))) in
                        md.i0.iter().zip(md.i1.iter().zip(md.w1.iter())).enumerate()
                    {
                        let gv = g_ch[(jh * ow + jw) * od + jd];
                        if gv == 0.0 {
                            continue;
                        }
                        let (ah, bh) = (1.0 - fh, fh);
                        let (aw, bw) = (1.0 - fw, fw);
                        let (ad, bd) = (1.0 - fd, fd);
                        d_ch[(h0 * iw + w0) * id + d0] += gv * ah * aw * ad;
                        d_ch[(h0 * iw + w0) * id + d1] += gv * ah * aw * bd;
                        d_ch[(h0 * iw + w1x) * id + d0] += gv * ah * bw * ad;
                        d_ch[(h0 * iw + w1x) * id + d1] += gv * ah * bw * bd;
                        d_ch[(h1 * iw + w0) * id + d0] += gv * bh * aw * ad;
                        d_ch[(h1 * iw + w0) * id + d1] += gv * bh * aw * bd;
                        d_ch[(h1 * iw + w1x) * id + d0] += gv * bh * bw * ad;
                        d_ch[(h1 * iw + w1x) * id + d1] += gv * bh * bw * bd;
                    }
                }
            }
        }
        vec![Some(din)]
    }
}

impl Tensor {
    /// Resample a [C,H,W,D] volume to the target spatial extents.
    pub fn trilinear_resize(&self, target: (usize, usize, usize)) -> Result<Tensor> {
        let s = self.shape();
        if s.len() != 4 {
            return Err(Error::contract(format!(
                "trilinear_resize: expected [C,H,W,D], got {:?}",
                s
            )));
        }
        if target.0 == 0 || target.1 == 0 || target.2 == 0 {
            return Err(Error::contract("trilinear_resize: zero target extent"));
        }
        let (c, ih, iw, id) = (s[0], s[1], s[2], s[3]);
        let (oh, ow, od) = target;
        let src = self.data();
        let data = if (ih, iw, id) == target {
            src.to_vec()
        } else {
            let mh = axis_map(ih, oh);
            let mw = axis_map(iw, ow);
            let md = axis_map(id, od);
            let in_sp = ih * iw * id;
            let out_sp = oh * ow * od;
            let mut out = vec![0.0; c * out_sp];
            for ch in 0..c {
                let s_ch = &src[ch * in_sp..(ch + 1) * in_sp];
                let o_ch = &mut out[ch * out_sp..(ch + 1) * out_sp];
                for jh in 0..oh {
                    let (h0, h1, fh) = (mh.i0[jh], mh.i1[jh], mh.w1[jh]);
                    for jw in 0..ow {
                        let (w0, w1x, fw) = (mw.i0[jw], mw.i1[jw], mw.w1[jw]);
                        let r00 = &s_ch[(h0 * iw + w0) * id..];
                        let r01 = &s_ch[(h0 * iw + w1x) * id..];
                        let r10 = &s_ch[(h1 * iw + w0) * id..];
                        let r11 = &s_ch[(h1 * iw + w1x) * id..];
                        for jd in 0..od {
                            let (d0, d1, fd) = (md.i0[jd], md.i1[jd], md.w1[jd]);
                            let c00 = r00[d0] * (1.0 - fd) + r00[d1] * fd;
                            let c01 = r01[d0] * (1.0 - fd) + r01[d1] * fd;
                            let c10 = r10[d0] * (1.0 - fd) + r10[d1] * fd;
                            let c11 = r11[d0] * (1.0 - fd) + r11[d1] * fd;
                            let c0 = c00 * (1.0 - fw) + c01 * fw;
                            let c1 = c10 * (1.0 - fw) + c11 * fw;
                            o_ch[(jh * ow + jw) * od + jd] = c0 * (1.0 - fh) + c1 * fh;
                        }
                    }
                }
            }
            out
        };
        Tensor::from_op(
            "trilinear_resize",
            vec![c, oh, ow, od],
            data,
            Box::new(TrilinearFn {
                parents: [self.clone()],
                in_extents: (ih, iw, id),
                out_extents: target,
            }),
        )
    }
}

#[cfg(test)]
mod tests {
    use super::super::grad_check;
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn identity_target_is_bitwise_equal() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let x = Tensor::randn(&[2, 3, 4, 5], 1.0, &mut rng);
        let y = x.trilinear_resize((3, 4, 5)).unwrap();
        assert_eq!(x.data(), y.data());
    }

    #[test]
    fn constant_volume_stays_constant() {
        let x = Tensor::full(&[1, 4, 4, 4], 0.37);
        for target in [(2, 2, 2), (7, 5, 9), (4, 4, 4), (1, 1, 1)] {
            let y = x.trilinear_resize(target).unwrap();
            for v in y.data() {
                assert!((v - 0.37).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn ramp_upsample_matches_halfpixel_formula() {
        // 1-D ramp [0,1] over extent 2 resized to extent 4. Source coords are
        // (j+0.5)*0.5-0.5 = {-0.25, 0.25, 0.75, 1.25}; clamped interpolation
        // gives [0, 0.25, 0.75, 1].
        let x = Tensor::new(&[1, 1, 1, 2], vec![0.0, 1.0]).unwrap();
        let y = x.trilinear_resize((1, 1, 4)).unwrap();
        let expect = [0.0, 0.25, 0.75, 1.0];
        for (a, e) in y.data().iter().zip(expect) {
            assert!((a - e).abs() < 1e-12, "{a} vs {e}");
        }
    }

    #[test]
    fn scalar_reference_agreement_on_random_volume() {
        // Cross-check a full 3-D resize against per-voxel scalar evaluation
        // of the same convention.
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let x = Tensor::randn(&[1, 3, 4, 2], 1.0, &mut rng);
        let (oh, ow, od) = (5, 3, 4);
        let y = x.trilinear_resize((oh, ow, od)).unwrap();
        let sample = |h: f64, w: f64, d: f64| -> f64 {
            let grab = |hh: isize, ww: isize, dd: isize| -> f64 {
                let hh = hh.clamp(0, 2) as usize;
                let ww = ww.clamp(0, 3) as usize;
                let dd = dd.clamp(0, 1) as usize;
                x.data()[(hh * 4 + ww) * 2 + dd]
            };
            let (h0, w0, d0) = (h.floor(), w.floor(), d.floor());
            let (fh, fw, fd) = (h - h0, w - w0, d - d0);
            let mut acc = 0.0;
            for (dh, wh) in [(0, 1.0 - fh), (1, fh)] {
                for (dw, wwt) in [(0, 1.0 - fw), (1, fw)] {
                    for (dd, wd) in [(0, 1.0 - fd), (1, fd)] {
                        acc += wh
                            * wwt
                            * wd
                            * grab(h0 as isize + dh, w0 as isize + dw, d0 as isize + dd);
                    }
                }
            }
            acc
        };
        for jh in 0..oh {
            for jw in 0..ow {
                for jd in 0..od {
                    let h = (jh as f64 + 0.5) * 3.0 / oh as f64 - 0.5;
                    let w = (jw as f64 + 0.5) * 4.0 / ow as f64 - 0.5;
                    let d = (jd as f64 + 0.5) * 2.0 / od as f64 - 0.5;
                    let e = sample(h, w, d);
                    let a = y.data()[(jh * ow + jw) * od + jd];
                    assert!((a - e).abs() < 1e-12, "({jh},{jw},{jd}): {a} vs {e}");
                }
            }
        }
    }

    #[test]
    fn resize_grad_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let x = Tensor::randn(&[2, 3, 3, 3], 1.0, &mut rng);
        let f = |t: &Tensor| {
            let y = t.trilinear_resize((5, 4, 6))?;
            y.mul(&y)?.sum_all()
        };
        assert!(grad_check(f, &x, 1e-5).unwrap() < 1e-4);
        let g = |t: &Tensor| {
            let y = t.trilinear_resize((2, 2, 2))?;
            y.mul(&y)?.sum_all()
        };
        assert!(grad_check(g, &x, 1e-5).unwrap() < 1e-4);
    }

    #[test]
    fn nearest_map_round_trips_integer_scaling() {
        let map = axis_map_nearest(4, 8);
        assert_eq!(map, vec![0, 0, 1, 1, 2, 2, 3, 3]);
    }
}
