//! 3D convolutions: dense, depthwise axial (1-D along one axis), and
//! depthwise full. All use zero ("same") padding, odd kernels, and the
//! cross-correlation convention; output extents are ceil(extent/stride).

use super::{GradFn, Tensor};
use crate::error::{Error, Result};

/// Axis of a 1-D depthwise convolution over a [C, H, W, D] volume.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Axis {
    H,
    W,
    D,
}

#[derive(Clone, Copy)]
struct Vol {
    c: usize,
    h: usize,
    w: usize,
    d: usize,
}

fn vol_of(t: &Tensor, op: &str) -> Result<Vol> {
    let s = t.shape();
    if s.len() != 4 {
        return Err(Error::contract(format!(
            "{op}: expected [C,H,W,D] tensor, got {:?}",
            s
        )));
    }
    Ok(Vol {
        c: s[0],
        h: s[1],
        w: s[2],
        d: s[3],
    })
}

fn check_odd(k: usize, op: &str) -> Result<()> {
    if k % 2 == 0 || k == 0 {
        return Err(Error::config(format!("{op}: kernel extent {k} must be odd")));
    }
    Ok(())
}

fn out_extent(n: usize, stride: usize) -> usize {
    n.div_ceil(stride)
}

/// Valid output range [lo, hi) along one axis for kernel tap `t`:
/// 0 <= o*stride + t - pad < n.
fn tap_range(n_out: usize, n_in: usize, stride: usize, t: usize, pad: usize) -> (usize, usize) {
    let lo = if t >= pad {
        0
    } else {
        (pad - t).div_ceil(stride)
    };
    // o*stride + t - pad <= n_in - 1
    let hi_num = n_in + pad;
    let hi = if hi_num > t {
        ((hi_num - t - 1) / stride + 1).min(n_out)
    } else {
        0
    };
    (lo.min(n_out), hi)
}

// ---------------------------------------------------------------------------
// Dense conv3d
// ---------------------------------------------------------------------------

struct Conv3dFn {
    parents: [Tensor; 3], // input, weight, bias
    stride: usize,
    iv: Vol,
    ov: Vol,
    k: (usize, usize, usize),
}

#[allow(clippy::too_many_arguments)]
fn conv3d_forward(
    input: &[f64],
    weight: &[f64],
    bias: &[f64],
    iv: Vol,
    ov: Vol,
    k: (usize, usize, usize),
    c_in: usize,
    stride: usize,
) -> Vec<f64> {
    let (kh, kw, kd) = k;
    let (ph, pw, pd) = ((kh - 1) / 2, (kw - 1) / 2, (kd - 1) / 2);
    let o_sp = ov.h * ov.w * ov.d;
    let i_plane = iv.w * iv.d;
    let mut out = vec![0.0; ov.c * o_sp];
    for co in 0..ov.c {
        out[co * o_sp..(co + 1) * o_sp].fill(bias[co]);
        for ci in 0..c_in {
            let in_ch = &input[ci * iv.h * i_plane..(ci + 1) * iv.h * i_plane];
            for th in 0..kh {
                let (h0, h1) = tap_range(ov.h, iv.h, stride, th, ph);
                for tw in 0..kw {
                    let (w0, w1) = tap_range(ov.w, iv.w, stride, tw, pw);
                    for td in 0..kd {
                        let wv = weight[(((co * c_in + ci) * kh + th) * kw + tw) * kd + td];
                        if wv == 0.0 {
                            continue;
                        }
                        let (d0, d1) = tap_range(ov.d, iv.d, stride, td, pd);
                        if d0 >= d1 {
                            continue;
                        }
                        for oh in h0..h1 {
                            let ih = oh * stride + th - ph;
                            for ow in w0..w1 {
                                let iw = ow * stride + tw - pw;
                                let in_row = &in_ch[ih * i_plane + iw * iv.d..];
                                let out_row = &mut out
                                    [co * o_sp + (oh * ov.w + ow) * ov.d + d0..co * o_sp + (oh * ov.w + ow) * ov.d + d1];
                                if stride == 1 {
                                    let src = &in_row[d0 + td - pd..d1 + td - pd];
                                    for (o, x) in out_row.iter_mut().zip(src) {
                                        *o += wv * x;
                                    }
                                } else {
                                    for (j, o) in out_row.iter_mut().enumerate() {
                                        let id = (d0 + j) * stride + td - pd;
                                        *o += wv * in_row[id];
                                    }
                                }
                            }
                        }
                    }
                }
            }
        }
    }
    out
}

impl GradFn for Conv3dFn {
    fn parents(&self) -> &[Tensor] {
        &self.parents
    }

    fn backward(&self, g: &[f64]) -> Vec<Option<Vec<f64>>> {
        let input = self.parents[0].data();
        let weight = self.parents[1].data();
        let (iv, ov) = (self.iv, self.ov);
        let (kh, kw, kd) = self.k;
        let (ph, pw, pd) = ((kh - 1) / 2, (kw - 1) / 2, (kd - 1) / 2);
        let stride = self.stride;
        let o_sp = ov.h * ov.w * ov.d;
        let i_plane = iv.w * iv.d;
        let i_sp = iv.h * i_plane;

        let d_input = self.parents[0].requires_grad().then(|| {
            let mut din = vec![0.0; iv.c * i_sp];
            for ci in 0..iv.c {
                let din_ch = &mut din[ci * i_sp..(ci + 1) * i_sp];
                for co in 0..ov.c {
                    let g_ch = &g[co * o_sp..(co + 1) * o_sp];
                    for th in 0..kh {
                        let (h0, h1) = tap_range(ov.h, iv.h, stride, th, ph);
                        for tw in 0..kw {
                            let (w0, w1) = tap_range(ov.w, iv.w, stride, tw, pw);
                            for td in 0..kd {
                                let wv =
                                    weight[(((co * iv.c + ci) * kh + th) * kw + tw) * kd + td];
                                if wv == 0.0 {
                                    continue;
                                }
                                let (d0, d1) = tap_range(ov.d, iv.d, stride, td, pd);
                                for oh in h0..h1 {
                                    let ih = oh * stride + th - ph;
                                    for ow in w0..w1 {
                                        let iw = ow * stride + tw - pw;
                                        let g_row =
                                            &g_ch[(oh * ov.w + ow) * ov.d + d0..(oh * ov.w + ow) * ov.d + d1];
                                        let base = ih * i_plane + iw * iv.d;
                                        if stride == 1 {
                                            let dst =
                                                &mut din_ch[base + d0 + td - pd..base + d1 + td - pd];
                                            for (o, gv) in dst.iter_mut().zip(g_row) {
                                                *o += wv * gv;
                                            }
                                        } else {
                                            for (j, gv) in g_row.iter().enumerate() {
                                                let id = (d0 + j) * stride + td - pd;
                                                din_ch[base + id] += wv * gv;
                                            }
                                        }
                                    }
                                }
                            }
                        }
                    }
                }
            }
            din
        });

        let d_weight = self.parents[1].requires_grad().then(|| {
            let mut dw = vec![0.0; ov.c * iv.c * kh * kw * kd];
            for co in 0..ov.c {
                let g_ch = &g[co * o_sp..(co + 1) * o_sp];
                for ci in 0..iv.c {
                    let in_ch = &input[ci * i_sp..(ci + 1) * i_sp];
                    for th in 0..kh {
                        let (h0, h1) = tap_range(ov.h, iv.h, stride, th, ph);
                        for tw in 0..kw {
                            let (w0, w1) = tap_range(ov.w, iv.w, stride, tw, pw);
                            for td in 0..kd {
                                let (d0, d1) = tap_range(ov.d, iv.d, stride, td, pd);
                                let mut acc = 0.0;
                                for oh in h0..h1 {
                                    let ih = oh * stride + th - ph;
                                    for ow in w0..w1 {
                                        let iw = ow * stride + tw - pw;
                                        let g_row = &g_ch
                                            [(oh * ov.w + ow) * ov.d + d0..(oh * ov.w + ow) * ov.d + d1];
                                        let base = ih * i_plane + iw * iv.d;
                                        if stride == 1 {
                                            let src = &in_ch[base + d0 + td - pd..base + d1 + td - pd];
                                            for (gv, x) in g_row.iter().zip(src) {
                                                acc += gv * x;
                                            }
                                        } else {
                                            for (j, gv) in g_row.iter().enumerate() {
                                                let id = (d0 + j) * stride + td - pd;
                                                acc += gv * in_ch[base + id];
                                            }
                                        }
                                    }
                                }
                                dw[(((co * iv.c + ci) * kh + th) * kw + tw) * kd + td] = acc;
                            }
                        }
                    }
                }
            }
            dw
        });

        let d_bias = self.parents[2].requires_grad().then(|| {
            (0..ov.c)
                .map(|co| g[co * o_sp..(co + 1) * o_sp].iter().sum())
                .collect()
        });

        vec![d_input, d_weight, d_bias]
    }
}

// ---------------------------------------------------------------------------
// Depthwise axial
// ---------------------------------------------------------------------------

struct DepthwiseAxialFn {
    parents: Vec<Tensor>, // input, weight, [bias]
    axis: Axis,
    k: usize,
    v: Vol,
}

fn axial_accumulate(
    dst: &mut [f64],
    src: &[f64],
    weight: &[f64],
    v: Vol,
    axis: Axis,
    k: usize,
    per_channel_w: impl Fn(&[f64], usize, usize) -> f64,
) {
    let pad = (k - 1) / 2;
    let plane = v.w * v.d;
    let sp = v.h * plane;
    for c in 0..v.c {
        let s_ch = &src[c * sp..(c + 1) * sp];
        let d_ch = &mut dst[c * sp..(c + 1) * sp];
        for t in 0..k {
            let wv = per_channel_w(weight, c, t);
            if wv == 0.0 {
                continue;
            }
            match axis {
                Axis::H => {
                    let (h0, h1) = tap_range(v.h, v.h, 1, t, pad);
                    for oh in h0..h1 {
                        let ih = oh + t - pad;
                        let dstp = oh * plane;
                        let srcp = ih * plane;
                        for j in 0..plane {
                            d_ch[dstp + j] += wv * s_ch[srcp + j];
                        }
                    }
                }
                Axis::W => {
                    let (w0, w1) = tap_range(v.w, v.w, 1, t, pad);
                    for h in 0..v.h {
                        for ow in w0..w1 {
                            let iw = ow + t - pad;
                            let dstp = h * plane + ow * v.d;
                            let srcp = h * plane + iw * v.d;
                            for j in 0..v.d {
                                d_ch[dstp + j] += wv * s_ch[srcp + j];
                            }
                        }
                    }
                }
                Axis::D => {
                    let (d0, d1) = tap_range(v.d, v.d, 1, t, pad);
                    for h in 0..v.h {
                        for w in 0..v.w {
                            let base = h * plane + w * v.d;
                            for od in d0..d1 {
                                d_ch[base + od] += wv * s_ch[base + od + t - pad];
                            }
                        }
                    }
                }
            }
        }
    }
}

impl GradFn for DepthwiseAxialFn {
    fn parents(&self) -> &[Tensor] {
        &self.parents
    }

    fn backward(&self, g: &[f64]) -> Vec<Option<Vec<f64>>> {
        let input = self.parents[0].data();
        let weight = self.parents[1].data();
        let v = self.v;
        let k = self.k;
        let pad = (k - 1) / 2;
        let plane = v.w * v.d;
        let sp = v.h * plane;

        let d_input = self.parents[0].requires_grad().then(|| {
            let mut din = vec![0.0; input.len()];
            // Transposed correlation: flip taps (t -> k-1-t gives the adjoint
            // for centered same padding).
            axial_accumulate(&mut din, g, weight, v, self.axis, k, |w, c, t| {
                w[c * k + (k - 1 - t)]
            });
            din
        });

        let d_weight = self.parents[1].requires_grad().then(|| {
            let mut dw = vec![0.0; v.c * k];
            for c in 0..v.c {
                let in_ch = &input[c * sp..(c + 1) * sp];
                let g_ch = &g[c * sp..(c + 1) * sp];
                for t in 0..k {
                    let mut acc = 0.0;
                    match self.axis {
                        Axis::H => {
                            let (h0, h1) = tap_range(v.h, v.h, 1, t, pad);
                            for oh in h0..h1 {
                                let ih = oh + t - pad;
                                let a = &g_ch[oh * plane..(oh + 1) * plane];
                                let b = &in_ch[ih * plane..(ih + 1) * plane];
                                for (x, y) in a.iter().zip(b) {
                                    acc += x * y;
                                }
                            }
                        }
                        Axis::W => {
                            let (w0, w1) = tap_range(v.w, v.w, 1, t, pad);
                            for h in 0..v.h {
                                for ow in w0..w1 {
                                    let iw = ow + t - pad;
                                    let a = &g_ch[h * plane + ow * v.d..h * plane + (ow + 1) * v.d];
                                    let b = &in_ch[h * plane + iw * v.d..h * plane + (iw + 1) * v.d];
                                    for (x, y) in a.iter().zip(b) {
                                        acc += x * y;
                                    }
                                }
                            }
                        }
                        Axis::D => {
                            let (d0, d1) = tap_range(v.d, v.d, 1, t, pad);
                            for h in 0..v.h {
                                for w in 0..v.w {
                                    let base = h * plane + w * v.d;
                                    for od in d0..d1 {
                                        acc += g_ch[base + od] * in_ch[base + od + t - pad];
                                    }
                                }
                            }
                        }
                    }
                    dw[c * k + t] = acc;
                }
            }
            dw
        });

        let mut grads = vec![d_input, d_weight];
        if self.parents.len() == 3 {
            let d_bias = self.parents[2].requires_grad().then(|| {
                (0..v.c)
                    .map(|c| g[c * sp..(c + 1) * sp].iter().sum())
                    .collect()
            });
            grads.push(d_bias);
        }
        grads
    }
}

// ---------------------------------------------------------------------------
// Depthwise full
// ---------------------------------------------------------------------------

struct DepthwiseFullFn {
    parents: Vec<Tensor>, // input, weight, [bias]
    k: (usize, usize, usize),
    v: Vol,
}

fn depthwise_full_accumulate(
    dst: &mut [f64],
    src: &[f64],
    weight: &[f64],
    v: Vol,
    k: (usize, usize, usize),
    flip: bool,
) {
    let (kh, kw, kd) = k;
    let (ph, pw, pd) = ((kh - 1) / 2, (kw - 1) / 2, (kd - 1) / 2);
    let plane = v.w * v.d;
    let sp = v.h * plane;
    for c in 0..v.c {
        let s_ch = &src[c * sp..(c + 1) * sp];
        let d_ch = &mut dst[c * sp..(c + 1) * sp];
        for th in 0..kh {
            let (h0, h1) = tap_range(v.h, v.h, 1, th, ph);
            for tw in 0..kw {
                let (w0, w1) = tap_range(v.w, v.w, 1, tw, pw);
                for td in 0..kd {
                    let idx = if flip {
                        ((c * kh + (kh - 1 - th)) * kw + (kw - 1 - tw)) * kd + (kd - 1 - td)
                    } else {
                        ((c * kh + th) * kw + tw) * kd + td
                    };
                    let wv = weight[idx];
                    if wv == 0.0 {
                        continue;
                    }
                    let (d0, d1) = tap_range(v.d, v.d, 1, td, pd);
                    if d0 >= d1 {
                        continue;
                    }
                    for oh in h0..h1 {
                        let ih = oh + th - ph;
                        for ow in w0..w1 {
                            let iw = ow + tw - pw;
                            let dstp = (oh * v.w + ow) * v.d;
                            let srcp = (ih * v.w + iw) * v.d;
                            let a = &mut d_ch[dstp + d0..dstp + d1];
                            let b = &s_ch[srcp + d0 + td - pd..srcp + d1 + td - pd];
                            for (o, x) in a.iter_mut().zip(b) {
                                *o += wv * x;
                            }
                        }
                    }
                }
            }
        }
    }
}

impl GradFn for DepthwiseFullFn {
    fn parents(&self) -> &[Tensor] {
        &self.parents
    }

    fn backward(&self, g: &[f64]) -> Vec<Option<Vec<f64>>> {
        let input = self.parents[0].data();
        let weight = self.parents[1].data();
        let v = self.v;
        let (kh, kw, kd) = self.k;
        let (ph, pw, pd) = ((kh - 1) / 2, (kw - 1) / 2, (kd - 1) / 2);
        let plane = v.w * v.d;
        let sp = v.h * plane;

        let d_input = self.parents[0].requires_grad().then(|| {
            let mut din = vec![0.0; input.len()];
            depthwise_full_accumulate(&mut din, g, weight, v, self.k, true);
            din
        });

        let d_weight = self.parents[1].requires_grad().then(|| {
            let mut dw = vec![0.0; v.c * kh * kw * kd];
            for c in 0..v.c {
                let in_ch = &input[c * sp..(c + 1) * sp];
                let g_ch = &g[c * sp..(c + 1) * sp];
                for th in 0..kh {
                    let (h0, h1) = tap_range(v.h, v.h, 1, th, ph);
                    for tw in 0..kw {
                        let (w0, w1) = tap_range(v.w, v.w, 1, tw, pw);
                        for td in 0..kd {
                            let (d0, d1) = tap_range(v.d, v.d, 1, td, pd);
                            let mut acc = 0.0;
                            for oh in h0..h1 {
                                let ih = oh + th - ph;
                                for ow in w0..w1 {
                                    let iw = ow + tw - pw;
                                    let a = &g_ch[(oh * v.w + ow) * v.d + d0..(oh * v.w + ow) * v.d + d1];
                                    let b = &in_ch[(ih * v.w + iw) * v.d + d0 + td - pd
                                        ..(ih * v.w + iw) * v.d + d1 + td - pd];
                                    for (x, y) in a.iter().zip(b) {
                                        acc += x * y;
                                    }
                                }
                            }
                            dw[((c * kh + th) * kw + tw) * kd + td] = acc;
                        }
                    }
                }
            }
            dw
        });

        let mut grads = vec![d_input, d_weight];
        if self.parents.len() == 3 {
            let d_bias = self.parents[2].requires_grad().then(|| {
                (0..v.c)
                    .map(|c| g[c * sp..(c + 1) * sp].iter().sum())
                    .collect()
            });
            grads.push(d_bias);
        }
        grads
    }
}

// ---------------------------------------------------------------------------
// Public surface
// ---------------------------------------------------------------------------

impl Tensor {
    /// Dense 3D convolution with zero same-padding.
    ///
    /// input [C_in,H,W,D], weight [C_out,C_in,kh,kw,kd], bias [C_out],
    /// stride 1 or 2; output extents are ceil(extent/stride).
    pub fn conv3d(&self, weight: &Tensor, bias: &Tensor, stride: usize) -> Result<Tensor> {
        let iv = vol_of(self, "conv3d")?;
        let ws = weight.shape();
        if ws.len() != 5 {
            return Err(Error::contract(format!(
                "conv3d: weight must be [C_out,C_in,kh,kw,kd], got {:?}",
                ws
            )));
        }
        let (c_out, c_in, kh, kw, kd) = (ws[0], ws[1], ws[2], ws[3], ws[4]);
        if c_in != iv.c {
            return Err(Error::contract(format!(
                "conv3d: input channels {} vs weight {}",
                iv.c, c_in
            )));
        }
        if bias.shape() != [c_out] {
            return Err(Error::contract("conv3d: bias must be [C_out]"));
        }
        check_odd(kh, "conv3d")?;
        check_odd(kw, "conv3d")?;
        check_odd(kd, "conv3d")?;
        if stride != 1 && stride != 2 {
            return Err(Error::config(format!("conv3d: stride {stride} not in {{1,2}}")));
        }
        let ov = Vol {
            c: c_out,
            h: out_extent(iv.h, stride),
            w: out_extent(iv.w, stride),
            d: out_extent(iv.d, stride),
        };
        let data = conv3d_forward(
            self.data(),
            weight.data(),
            bias.data(),
            iv,
            ov,
            (kh, kw, kd),
            c_in,
            stride,
        );
        Tensor::from_op(
            "conv3d",
            vec![ov.c, ov.h, ov.w, ov.d],
            data,
            Box::new(Conv3dFn {
                parents: [self.clone(), weight.clone(), bias.clone()],
                stride,
                iv,
                ov,
                k: (kh, kw, kd),
            }),
        )
    }

    /// Per-channel 1-D convolution along a single axis, stride 1, same padding.
    ///
    /// weight [C, k]; bias [C] optional.
    pub fn depthwise_axial_conv3d(
        &self,
        axis: Axis,
        weight: &Tensor,
        bias: Option<&Tensor>,
    ) -> Result<Tensor> {
        let v = vol_of(self, "depthwise_axial_conv3d")?;
        let ws = weight.shape();
        if ws.len() != 2 || ws[0] != v.c {
            return Err(Error::contract(format!(
                "depthwise_axial_conv3d: weight must be [C={}, k], got {:?}",
                v.c, ws
            )));
        }
        let k = ws[1];
        check_odd(k, "depthwise_axial_conv3d")?;
        let extent = match axis {
            Axis::H => v.h,
            Axis::W => v.w,
            Axis::D => v.d,
        };
        if k > 2 * extent + 1 {
            return Err(Error::config(format!(
                "depthwise_axial_conv3d: kernel {k} exceeds 2*extent+1 = {}",
                2 * extent + 1
            )));
        }
        if let Some(b) = bias {
            if b.shape() != [v.c] {
                return Err(Error::contract("depthwise_axial_conv3d: bias must be [C]"));
            }
        }
        let sp = v.h * v.w * v.d;
        let mut data = vec![0.0; v.c * sp];
        if let Some(b) = bias {
            for (c, bv) in b.data().iter().enumerate() {
                data[c * sp..(c + 1) * sp].fill(*bv);
            }
        }
        axial_accumulate(&mut data, self.data(), weight.data(), v, axis, k, |w, c, t| {
            w[c * k + t]
        });
        let mut parents = vec![self.clone(), weight.clone()];
        if let Some(b) = bias {
            parents.push(b.clone());
        }
        Tensor::from_op(
            "depthwise_axial_conv3d",
            self.shape().to_vec(),
            data,
            Box::new(DepthwiseAxialFn {
                parents,
                axis,
                k,
                v,
            }),
        )
    }

    /// Per-channel full 3D convolution, stride 1, same padding.
    ///
    /// weight [C, kh, kw, kd]; bias [C] optional.
    pub fn depthwise_full_conv3d(&self, weight: &Tensor, bias: Option<&Tensor>) -> Result<Tensor> {
        let v = vol_of(self, "depthwise_full_conv3d")?;
        let ws = weight.shape();
        if ws.len() != 4 || ws[0] != v.c {
            return Err(Error::contract(format!(
                "depthwise_full_conv3d: weight must be [C={}, kh, kw, kd], got {:?}",
                v.c, ws
            )));
        }
        let (kh, kw, kd) = (ws[1], ws[2], ws[3]);
        check_odd(kh, "depthwise_full_conv3d")?;
        check_odd(kw, "depthwise_full_conv3d")?;
        check_odd(kd, "depthwise_full_conv3d")?;
        if let Some(b) = bias {
            if b.shape() != [v.c] {
                return Err(Error::contract("depthwise_full_conv3d: bias must be [C]"));
            }
        }
        let sp = v.h * v.w * v.d;
        let mut data = vec![0.0; v.c * sp];
        if let Some(b) = bias {
            for (c, bv) in b.data().iter().enumerate() {
                data[c * sp..(c + 1) * sp].fill(*bv);
            }
        }
        depthwise_full_accumulate(&mut data, self.data(), weight.data(), v, (kh, kw, kd), false);
        let mut parents = vec![self.clone(), weight.clone()];
        if let Some(b) = bias {
            parents.push(b.clone());
        }
        Tensor::from_op(
            "depthwise_full_conv3d",
            self.shape().to_vec(),
            data,
            Box::new(DepthwiseFullFn {
                parents,
                k: (kh, kw, kd),
                v,
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

    fn rng(seed: u64) -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(seed)
    }

    fn counting_volume(c: usize, h: usize, w: usize, d: usize) -> Tensor {
        let n = c * h * w * d;
        Tensor::new(&[c, h, w, d], (0..n).map(|i| i as f64).collect()).unwrap()
    }

    #[test]
    fn identity_kernel_is_identity() {
        // 1x1x1 kernel, identity across channels, zero bias.
        let x = Tensor::randn(&[3, 4, 4, 4], 1.0, &mut rng(1));
        let mut w = vec![0.0; 3 * 3];
        for c in 0..3 {
            w[c * 3 + c] = 1.0;
        }
        let weight = Tensor::new(&[3, 3, 1, 1, 1], w).unwrap();
        let bias = Tensor::zeros(&[3]);
        let y = x.conv3d(&weight, &bias, 1).unwrap();
        assert_eq!(x.data(), y.data());
    }

    #[test]
    fn all_ones_3x3x3_counts_neighborhood() {
        // All-ones kernel over an all-ones 3x3x3 single-channel volume:
        // center sees the full 27-cell neighborhood, a corner sees 2x2x2 = 8.
        let x = Tensor::full(&[1, 3, 3, 3], 1.0);
        let weight = Tensor::full(&[1, 1, 3, 3, 3], 1.0);
        let bias = Tensor::zeros(&[1]);
        let y = x.conv3d(&weight, &bias, 1).unwrap();
        let at = |h: usize, w: usize, d: usize| y.data()[(h * 3 + w) * 3 + d];
        assert_eq!(at(1, 1, 1), 27.0);
        assert_eq!(at(0, 0, 0), 8.0);
        assert_eq!(at(0, 1, 1), 18.0);
    }

    #[test]
    fn even_kernel_rejected() {
        let x = Tensor::zeros(&[1, 4, 4, 4]);
        let weight = Tensor::zeros(&[1, 1, 2, 2, 2]);
        let bias = Tensor::zeros(&[1]);
        assert!(matches!(
            x.conv3d(&weight, &bias, 1),
            Err(crate::error::Error::Config(_))
        ));
    }

    #[test]
    fn channel_mismatch_rejected() {
        let x = Tensor::zeros(&[2, 4, 4, 4]);
        let weight = Tensor::zeros(&[1, 3, 1, 1, 1]);
        let bias = Tensor::zeros(&[1]);
        assert!(matches!(
            x.conv3d(&weight, &bias, 1),
            Err(crate::error::Error::Contract(_))
        ));
    }

    #[test]
    fn stride_two_halves_extents_rounding_up() {
        let x = Tensor::randn(&[1, 5, 6, 7], 1.0, &mut rng(2));
        let weight = Tensor::randn(&[2, 1, 3, 3, 3], 0.2, &mut rng(3));
        let bias = Tensor::zeros(&[2]);
        let y = x.conv3d(&weight, &bias, 2).unwrap();
        assert_eq!(y.shape(), &[2, 3, 3, 4]);
    }

    #[test]
    fn conv3d_grad_matches_finite_differences() {
        // Gradient of sum(output) with respect to the weight on a random
        // 2-channel 4^3 input, against central differences.
        let x = Tensor::randn(&[2, 4, 4, 4], 1.0, &mut rng(4));
        let w0 = Tensor::randn(&[3, 2, 3, 3, 3], 0.3, &mut rng(5));
        let bias = Tensor::randn(&[3], 0.1, &mut rng(6));
        let f = |w: &Tensor| x.conv3d(w, &bias, 1)?.sum_all();
        let err = grad_check(f, &w0, 1e-5).unwrap();
        assert!(err < 1e-4, "weight grad error {err}");

        // Quadratic loss exercises the input gradient too.
        let w_fixed = w0.detach();
        let g = |t: &Tensor| {
            let y = t.conv3d(&w_fixed, &bias, 1)?;
            y.mul(&y)?.sum_all()
        };
        let err = grad_check(g, &x, 1e-5).unwrap();
        assert!(err < 1e-4, "input grad error {err}");

        // And stride 2.
        let h = |w: &Tensor| {
            let y = x.conv3d(w, &bias, 2)?;
            y.mul(&y)?.sum_all()
        };
        let err = grad_check(h, &w0, 1e-5).unwrap();
        assert!(err < 1e-4, "stride-2 grad error {err}");
    }

    #[test]
    fn axial_identity_with_k1() {
        let x = Tensor::randn(&[2, 3, 3, 3], 1.0, &mut rng(7));
        let weight = Tensor::full(&[2, 1], 1.0);
        for axis in [Axis::H, Axis::W, Axis::D] {
            let y = x.depthwise_axial_conv3d(axis, &weight, None).unwrap();
            assert_eq!(x.data(), y.data());
        }
    }

    #[test]
    fn axial_shift_by_one_voxel() {
        // weight [0,0,1] along h: out[h] = in[h+1], zero fill at the far edge.
        let x = counting_volume(1, 3, 3, 3);
        let weight = Tensor::new(&[1, 3], vec![0.0, 0.0, 1.0]).unwrap();
        let y = x.depthwise_axial_conv3d(Axis::H, &weight, None).unwrap();
        let plane = 9;
        for h in 0..3 {
            for j in 0..plane {
                let expect = if h + 1 < 3 { x.data()[(h + 1) * plane + j] } else { 0.0 };
                assert_eq!(y.data()[h * plane + j], expect, "h={h} j={j}");
            }
        }
    }

    #[test]
    fn axial_matches_dense_conv_oracle() {
        // depthwise_axial(axis=h, k) == conv3d with a (k,1,1) kernel that is
        // zero off-diagonal across channels.
        let c = 3;
        let k = 5;
        let x = Tensor::randn(&[c, 6, 5, 4], 1.0, &mut rng(8));
        let wx = Tensor::randn(&[c, k], 0.5, &mut rng(9));
        let axial = x.depthwise_axial_conv3d(Axis::H, &wx, None).unwrap();

        let mut dense = vec![0.0; c * c * k];
        for ch in 0..c {
            for t in 0..k {
                dense[(ch * c + ch) * k + t] = wx.data()[ch * k + t];
            }
        }
        let wd = Tensor::new(&[c, c, k, 1, 1], dense).unwrap();
        let bias = Tensor::zeros(&[c]);
        let reference = x.conv3d(&wd, &bias, 1).unwrap();
        for (a, b) in axial.data().iter().zip(reference.data()) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn axial_oversized_kernel_rejected() {
        let x = Tensor::zeros(&[1, 3, 3, 3]);
        let weight = Tensor::zeros(&[1, 9]); // 9 > 2*3+1
        assert!(matches!(
            x.depthwise_axial_conv3d(Axis::H, &weight, None),
            Err(crate::error::Error::Config(_))
        ));
    }

    #[test]
    fn axial_grads() {
        let x = Tensor::randn(&[2, 4, 4, 4], 1.0, &mut rng(10));
        let w = Tensor::randn(&[2, 3], 0.5, &mut rng(11));
        let b = Tensor::randn(&[2], 0.1, &mut rng(12));
        for axis in [Axis::H, Axis::W, Axis::D] {
            let f = |t: &Tensor| {
                let y = t.depthwise_axial_conv3d(axis, &w, Some(&b))?;
                y.mul(&y)?.sum_all()
            };
            assert!(grad_check(f, &x, 1e-5).unwrap() < 1e-4);
            let g = |t: &Tensor| {
                let y = x.depthwise_axial_conv3d(axis, t, Some(&b))?;
                y.mul(&y)?.sum_all()
            };
            assert!(grad_check(g, &w, 1e-5).unwrap() < 1e-4);
        }
    }

    #[test]
    fn depthwise_full_matches_dense_conv_oracle() {
        let c = 2;
        let x = Tensor::randn(&[c, 4, 4, 4], 1.0, &mut rng(13));
        let w = Tensor::randn(&[c, 3, 3, 3], 0.4, &mut rng(14));
        let b = Tensor::randn(&[c], 0.2, &mut rng(15));
        let y = x.depthwise_full_conv3d(&w, Some(&b)).unwrap();

        let mut dense = vec![0.0; c * c * 27];
        for ch in 0..c {
            for t in 0..27 {
                dense[(ch * c + ch) * 27 + t] = w.data()[ch * 27 + t];
            }
        }
        let wd = Tensor::new(&[c, c, 3, 3, 3], dense).unwrap();
        let reference = x.conv3d(&wd, &b, 1).unwrap();
        for (a, r) in y.data().iter().zip(reference.data()) {
            assert!((a - r).abs() < 1e-12);
        }
    }

    #[test]
    fn depthwise_full_grads() {
        let x = Tensor::randn(&[2, 4, 4, 4], 1.0, &mut rng(16));
        let w = Tensor::randn(&[2, 3, 3, 3], 0.3, &mut rng(17));
        let f = |t: &Tensor| {
            let y = x.depthwise_full_conv3d(t, None)?;
            y.mul(&y)?.sum_all()
        };
        assert!(grad_check(f, &w, 1e-5).unwrap() < 1e-4);
        let g = |t: &Tensor| {
            let y = t.depthwise_full_conv3d(&w, None)?;
            y.mul(&y)?.sum_all()
        };
        assert!(grad_check(g, &x, 1e-5).unwrap() < 1e-4);
    }
}
