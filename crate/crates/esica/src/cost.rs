//! Analytic parameter and FLOP accounting, checked against an instrumented
//! reference executor that counts multiply-accumulates while actually
//! running each layer.
//!
//! Conventions: one multiply-accumulate is two FLOPs; convolutions are
//! counted as if the zero-padded frame were real input (the usual closed-form
//! accounting); exponentials, divisions, and bias adds are not MACs.

use serde::Serialize;

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum LayerKind {
    DenseConv3d,
    DepthwiseAxialConv3d,
    DepthwiseFullConv3d,
    Linear,
    Attention,
    Norm,
    Resize,
}

/// One accountable layer of the architecture.
#[derive(Debug, Clone, Serialize)]
pub struct LayerSpec {
    pub name: String,
    pub kind: LayerKind,
    pub in_channels: usize,
    pub out_channels: usize,
    /// (kh, kw, kd); all 1 for non-convolution kinds.
    pub kernel: (usize, usize, usize),
    /// Spatial extents of the input (token count = product for linear/attention).
    pub input_extent: (usize, usize, usize),
    /// Dense conv only; 1 elsewhere.
    pub stride: usize,
    /// Attention only.
    pub query_heads: usize,
    /// Attention only.
    pub kv_heads: usize,
    /// Resize only.
    pub output_extent: Option<(usize, usize, usize)>,
    /// Attention only: key/value token grid when it differs from the query
    /// grid (cross-attention). Self-attention leaves this unset.
    pub kv_extent: Option<(usize, usize, usize)>,
}

impl LayerSpec {
    fn base(name: &str, kind: LayerKind) -> Self {
        LayerSpec {
            name: name.to_string(),
            kind,
            in_channels: 1,
            out_channels: 1,
            kernel: (1, 1, 1),
            input_extent: (1, 1, 1),
            stride: 1,
            query_heads: 1,
            kv_heads: 1,
            output_extent: None,
            kv_extent: None,
        }
    }

    pub fn dense_conv3d(
        name: &str,
        in_channels: usize,
        out_channels: usize,
        kernel: (usize, usize, usize),
        input_extent: (usize, usize, usize),
        stride: usize,
    ) -> Self {
        LayerSpec {
            in_channels,
            out_channels,
            kernel,
            input_extent,
            stride,
            ..Self::base(name, LayerKind::DenseConv3d)
        }
    }

    pub fn depthwise_axial(
        name: &str,
        channels: usize,
        kernel: (usize, usize, usize),
        input_extent: (usize, usize, usize),
    ) -> Self {
        LayerSpec {
            in_channels: channels,
            out_channels: channels,
            kernel,
            input_extent,
            ..Self::base(name, LayerKind::DepthwiseAxialConv3d)
        }
    }

    pub fn depthwise_full(
        name: &str,
        channels: usize,
        kernel: (usize, usize, usize),
        input_extent: (usize, usize, usize),
    ) -> Self {
        LayerSpec {
            in_channels: channels,
            out_channels: channels,
            kernel,
            input_extent,
            ..Self::base(name, LayerKind::DepthwiseFullConv3d)
        }
    }

    pub fn linear(
        name: &str,
        in_features: usize,
        out_features: usize,
        tokens: (usize, usize, usize),
    ) -> Self {
        LayerSpec {
            in_channels: in_features,
            out_channels: out_features,
            input_extent: tokens,
            ..Self::base(name, LayerKind::Linear)
        }
    }

    pub fn attention(
        name: &str,
        d_model: usize,
        query_heads: usize,
        kv_heads: usize,
        tokens: (usize, usize, usize),
    ) -> Self {
        LayerSpec {
            in_channels: d_model,
            out_channels: d_model,
            input_extent: tokens,
            query_heads,
            kv_heads,
            ..Self::base(name, LayerKind::Attention)
        }
    }

    /// Cross-attention: queries on one token grid, keys/values on another.
    pub fn cross_attention(
        name: &str,
        d_model: usize,
        query_heads: usize,
        kv_heads: usize,
        q_tokens: (usize, usize, usize),
        kv_tokens: (usize, usize, usize),
    ) -> Self {
        LayerSpec {
            in_channels: d_model,
            out_channels: d_model,
            input_extent: q_tokens,
            query_heads,
            kv_heads,
            kv_extent: Some(kv_tokens),
            ..Self::base(name, LayerKind::Attention)
        }
    }

    pub fn norm(name: &str, channels: usize, input_extent: (usize, usize, usize)) -> Self {
        LayerSpec {
            in_channels: channels,
            out_channels: channels,
            input_extent,
            ..Self::base(name, LayerKind::Norm)
        }
    }

    pub fn resize(
        name: &str,
        channels: usize,
        input_extent: (usize, usize, usize),
        output_extent: (usize, usize, usize),
    ) -> Self {
        LayerSpec {
            in_channels: channels,
            out_channels: channels,
            input_extent,
            output_extent: Some(output_extent),
            ..Self::base(name, LayerKind::Resize)
        }
    }

    fn validate(&self) -> Result<()> {
        let (kh, kw, kd) = self.kernel;
        for k in [kh, kw, kd] {
            if k == 0 || k % 2 == 0 {
                return Err(Error::config(format!(
                    "layer `{}`: kernel extents must be odd and >= 1, got {:?}",
                    self.name, self.kernel
                )));
            }
        }
        match self.kind {
            LayerKind::DepthwiseAxialConv3d => {
                if self.in_channels != self.out_channels {
                    return Err(Error::config(format!(
                        "layer `{}`: depthwise requires in_channels == out_channels",
                        self.name
                    )));
                }
                let non_unit = [kh, kw, kd].iter().filter(|&&k| k > 1).count();
                if non_unit > 1 {
                    return Err(Error::config(format!(
                        "layer `{}`: axial kernel must be 1-D, got {:?}",
                        self.name, self.kernel
                    )));
                }
            }
            LayerKind::DepthwiseFullConv3d => {
                if self.in_channels != self.out_channels {
                    return Err(Error::config(format!(
                        "layer `{}`: depthwise requires in_channels == out_channels",
                        self.name
                    )));
                }
            }
            LayerKind::DenseConv3d => {
                if self.stride != 1 && self.stride != 2 {
                    return Err(Error::config(format!(
                        "layer `{}`: stride must be 1 or 2",
                        self.name
                    )));
                }
            }
            LayerKind::Attention => {
                let d = self.in_channels;
                if self.query_heads == 0
                    || self.kv_heads == 0
                    || d % self.query_heads != 0
                    || self.query_heads % self.kv_heads != 0
                {
                    return Err(Error::config(format!(
                        "layer `{}`: invalid attention heads ({} query, {} kv, width {})",
                        self.name, self.query_heads, self.kv_heads, d
                    )));
                }
            }
            LayerKind::Resize => {
                if self.output_extent.is_none() {
                    return Err(Error::config(format!(
                        "layer `{}`: resize requires an output extent",
                        self.name
                    )));
                }
            }
            LayerKind::Linear | LayerKind::Norm => {}
        }
        Ok(())
    }
}

fn voxels(e: (usize, usize, usize)) -> u64 {
    e.0 as u64 * e.1 as u64 * e.2 as u64
}

fn out_extent(e: (usize, usize, usize), stride: usize) -> (usize, usize, usize) {
    (
        e.0.div_ceil(stride),
        e.1.div_ceil(stride),
        e.2.div_ceil(stride),
    )
}

/// Exact parameter and multiply-accumulate counts of a layer.
pub fn count_macs(spec: &LayerSpec) -> Result<(u64, u64)> {
    spec.validate()?;
    let (kh, kw, kd) = spec.kernel;
    let kvol = (kh * kw * kd) as u64;
    let c_in = spec.in_channels as u64;
    let c_out = spec.out_channels as u64;
    let (params, macs) = match spec.kind {
        LayerKind::DenseConv3d => {
            let ov = voxels(out_extent(spec.input_extent, spec.stride));
            (c_out * c_in * kvol + c_out, c_out * c_in * kvol * ov)
        }
        LayerKind::DepthwiseAxialConv3d => {
            let k = (kh * kw * kd) as u64; // only one non-unit extent
            let v = voxels(spec.input_extent);
            (c_in * k + c_in, c_in * k * v)
        }
        LayerKind::DepthwiseFullConv3d => {
            let v = voxels(spec.input_extent);
            (c_in * kvol + c_in, c_in * kvol * v)
        }
        LayerKind::Linear => {
            let n = voxels(spec.input_extent);
            (c_in * c_out + c_out, n * c_in * c_out)
        }
        LayerKind::Attention => {
            let d = c_in;
            let hq = spec.query_heads as u64;
            let dh = d / hq;
            let kvd = spec.kv_heads as u64 * dh;
            let n_q = voxels(spec.input_extent);
            let n_kv = voxels(spec.kv_extent.unwrap_or(spec.input_extent));
            let params = (d * d + d) + 2 * (d * kvd + kvd) + (d * d + d);
            let macs = n_q * d * d        // Q projection
                + 2 * n_kv * d * kvd      // K and V projections
                + hq * n_q * n_kv * dh    // attention scores
                + hq * n_q * n_kv * dh    // weighted value sum
                + n_q * d * d; // output projection
            (params, macs)
        }
        LayerKind::Norm => {
            let v = voxels(spec.input_extent);
            (2 * c_in, 3 * c_in * v)
        }
        LayerKind::Resize => {
            let ov = voxels(spec.output_extent.unwrap());
            // 7 linear interpolations of 2 multiplies each, per voxel per channel.
            (0, 14 * c_in * ov)
        }
    };
    Ok((params, macs))
}

/// Exact parameter and FLOP counts (one MAC = two FLOPs).
pub fn count_cost(spec: &LayerSpec) -> Result<(u64, u64)> {
    let (params, macs) = count_macs(spec)?;
    Ok((params, 2 * macs))
}

/// Aggregated per-layer cost accounting.
#[derive(Debug, Clone, Serialize)]
pub struct CostReport {
    pub params: u64,
    pub flops: u64,
    pub per_layer: Vec<LayerCost>,
}

#[derive(Debug, Clone, Serialize)]
pub struct LayerCost {
    pub spec: LayerSpec,
    pub params: u64,
    pub flops: u64,
}

impl CostReport {
    pub fn from_layers(layers: &[LayerSpec]) -> Result<CostReport> {
        let mut per_layer = Vec::with_capacity(layers.len());
        let mut params = 0u64;
        let mut flops = 0u64;
        for spec in layers {
            let (p, f) = count_cost(spec)?;
            params += p;
            flops += f;
            per_layer.push(LayerCost {
                spec: spec.clone(),
                params: p,
                flops: f,
            });
        }
        Ok(CostReport {
            params,
            flops,
            per_layer,
        })
    }
}

// ---------------------------------------------------------------------------
// Instrumented reference execution
// ---------------------------------------------------------------------------

/// Runs a layer forward on pseudo-random data through naive loops,
/// incrementing a counter at every multiply-accumulate site. Padded taps read
/// an explicit zero, matching the closed-form accounting.
pub fn measure_macs(spec: &LayerSpec) -> Result<u64> {
    spec.validate()?;
    let mut macs: u64 = 0;
    let (h, w, d) = spec.input_extent;
    let (kh, kw, kd) = spec.kernel;
    // Deterministic filler; the values are irrelevant to the count.
    let fill = |n: usize| -> Vec<f64> { (0..n).map(|i| ((i % 17) as f64) * 0.1 - 0.8).collect() };

    match spec.kind {
        LayerKind::DenseConv3d => {
            let (c_in, c_out, s) = (spec.in_channels, spec.out_channels, spec.stride);
            let input = fill(c_in * h * w * d);
            let weight = fill(c_out * c_in * kh * kw * kd);
            let (oh, ow, od) = out_extent(spec.input_extent, s);
            let (ph, pw, pd) = ((kh - 1) / 2, (kw - 1) / 2, (kd - 1) / 2);
            let mut out = vec![0.0f64; c_out * oh * ow * od];
            let at = |buf: &[f64], c: usize, y: usize, x: usize, z: usize| buf[((c * h + y) * w + x) * d + z];
            for co in 0..c_out {
                for q in 0..oh {
                    for r in 0..ow {
                        for t in 0..od {
                            let mut acc = 0.0;
                            for ci in 0..c_in {
                                for a in 0..kh {
                                    for b in 0..kw {
                                        for c2 in 0..kd {
                                            let ih = (q * s + a) as isize - ph as isize;
                                            let iw = (r * s + b) as isize - pw as isize;
                                            let id = (t * s + c2) as isize - pd as isize;
                                            let x = if ih >= 0
                                                && iw >= 0
                                                && id >= 0
                                                && (ih as usize) < h
                                                && (iw as usize) < w
                                                && (id as usize) < d
                                            {
                                                at(&input, ci, ih as usize, iw as usize, id as usize)
                                            } else {
                                                0.0
                                            };
                                            let wv = weight
                                                [(((co * c_in + ci) * kh + a) * kw + b) * kd + c2];
                                            acc += wv * x;
                                            macs += 1;
                                        }
                                    }
                                }
                            }
                            out[((co * oh + q) * ow + r) * od + t] = acc;
                        }
                    }
                }
            }
        }
        LayerKind::DepthwiseAxialConv3d | LayerKind::DepthwiseFullConv3d => {
            let c = spec.in_channels;
            let input = fill(c * h * w * d);
            let weight = fill(c * kh * kw * kd);
            let (ph, pw, pd) = ((kh - 1) / 2, (kw - 1) / 2, (kd - 1) / 2);
            let mut out = vec![0.0f64; c * h * w * d];
            for ch in 0..c {
                for q in 0..h {
                    for r in 0..w {
                        for t in 0..d {
                            let mut acc = 0.0;
                            for a in 0..kh {
                                for b in 0..kw {
                                    for c2 in 0..kd {
                                        let ih = (q + a) as isize - ph as isize;
                                        let iw = (r + b) as isize - pw as isize;
                                        let id = (t + c2) as isize - pd as isize;
                                        let x = if ih >= 0
                                            && iw >= 0
                                            && id >= 0
                                            && (ih as usize) < h
                                            && (iw as usize) < w
                                            && (id as usize) < d
                                        {
                                            input[((ch * h + ih as usize) * w + iw as usize) * d
                                                + id as usize]
                                        } else {
                                            0.0
                                        };
                                        acc += weight[((ch * kh + a) * kw + b) * kd + c2] * x;
                                        macs += 1;
                                    }
                                }
                            }
                            out[((ch * h + q) * w + r) * d + t] = acc;
                        }
                    }
                }
            }
        }
        LayerKind::Linear => {
            let n = h * w * d;
            let (fi, fo) = (spec.in_channels, spec.out_channels);
            let x = fill(n * fi);
            let wt = fill(fi * fo);
            let mut out = vec![0.0f64; n * fo];
            for i in 0..n {
                for j in 0..fo {
                    let mut acc = 0.0;
                    for k in 0..fi {
                        acc += x[i * fi + k] * wt[k * fo + j];
                        macs += 1;
                    }
                    out[i * fo + j] = acc;
                }
            }
        }
        LayerKind::Attention => {
            let n = h * w * d;
            let (kh2, kw2, kd2) = spec.kv_extent.unwrap_or(spec.input_extent);
            let n_kv = kh2 * kw2 * kd2;
            let dm = spec.in_channels;
            let hq = spec.query_heads;
            let dh = dm / hq;
            let kvd = spec.kv_heads * dh;
            let x = fill(n * dm);
            let x_kv = fill(n_kv * dm);
            let wq = fill(dm * dm);
            let wk = fill(dm * kvd);
            let wv = fill(dm * kvd);
            let wo = fill(dm * dm);
            fn project(
                src: &[f64],
                wt: &[f64],
                n: usize,
                dm: usize,
                cols: usize,
                macs: &mut u64,
            ) -> Vec<f64> {
                let mut out = vec![0.0f64; n * cols];
                for i in 0..n {
                    for j in 0..cols {
                        let mut acc = 0.0;
                        for k in 0..dm {
                            acc += src[i * dm + k] * wt[k * cols + j];
                            *macs += 1;
                        }
                        out[i * cols + j] = acc;
                    }
                }
                out
            }
            let q = project(&x, &wq, n, dm, dm, &mut macs);
            let k = project(&x_kv, &wk, n_kv, dm, kvd, &mut macs);
            let v = project(&x_kv, &wv, n_kv, dm, kvd, &mut macs);
            let group = hq / spec.kv_heads;
            let mut ctx = vec![0.0f64; n * dm];
            for head in 0..hq {
                let kvh = head / group;
                let scale = 1.0 / (dh as f64).sqrt();
                for i in 0..n {
                    let mut scores = vec![0.0f64; n_kv];
                    for j in 0..n_kv {
                        let mut acc = 0.0;
                        for e in 0..dh {
                            acc += q[i * dm + head * dh + e] * k[j * kvd + kvh * dh + e];
                            macs += 1;
                        }
                        scores[j] = acc * scale;
                    }
                    let max = scores.iter().fold(f64::NEG_INFINITY, |a, b| a.max(*b));
                    let mut sum = 0.0;
                    for sc in scores.iter_mut() {
                        *sc = (*sc - max).exp();
                        sum += *sc;
                    }
                    for sc in scores.iter_mut() {
                        *sc /= sum;
                    }
                    for e in 0..dh {
                        let mut acc = 0.0;
                        for j in 0..n_kv {
                            acc += scores[j] * v[j * kvd + kvh * dh + e];
                            macs += 1;
                        }
                        ctx[i * dm + head * dh + e] = acc;
                    }
                }
            }
            let _ = project(&ctx, &wo, n, dm, dm, &mut macs);
        }
        LayerKind::Norm => {
            let c = spec.in_channels;
            let sp = h * w * d;
            let x = fill(c * sp);
            let gamma = fill(c);
            let beta = fill(c);
            let mut out = vec![0.0f64; c * sp];
            for loc in 0..sp {
                let mut mean = 0.0;
                for ch in 0..c {
                    mean += x[ch * sp + loc];
                }
                mean /= c as f64;
                let mut var = 0.0;
                for ch in 0..c {
                    let v = x[ch * sp + loc] - mean;
                    var += v * v;
                    macs += 1;
                }
                var /= c as f64;
                let inv = 1.0 / (var + 1e-6).sqrt();
                for ch in 0..c {
                    let xh = (x[ch * sp + loc] - mean) * inv;
                    macs += 1;
                    out[ch * sp + loc] = gamma[ch] * xh + beta[ch];
                    macs += 1;
                }
            }
        }
        LayerKind::Resize => {
            let c = spec.in_channels;
            let (oh, ow, od) = spec.output_extent.unwrap();
            let x = fill(c * h * w * d);
            let mut out = vec![0.0f64; c * oh * ow * od];
            let coord = |j: usize, n_out: usize, n_in: usize| -> (usize, usize, f64) {
                let s = n_in as f64 / n_out as f64;
                let p = (j as f64 + 0.5) * s - 0.5;
                let p0 = p.floor();
                let frac = p - p0;
                let a = (p0 as isize).clamp(0, n_in as isize - 1) as usize;
                let b = (p0 as isize + 1).clamp(0, n_in as isize - 1) as usize;
                (a, b, frac)
            };
            for ch in 0..c {
                for jh in 0..oh {
                    let (h0, h1, fh) = coord(jh, oh, h);
                    for jw in 0..ow {
                        let (w0, w1, fw) = coord(jw, ow, w);
                        for jd in 0..od {
                            let (d0, d1, fd) = coord(jd, od, d);
                            let grab = |hh: usize, ww: usize, dd: usize| {
                                x[((ch * h + hh) * w + ww) * d + dd]
                            };
                            let mut lerp = |a: f64, b: f64, f: f64| -> f64 {
                                macs += 2;
                                a * (1.0 - f) + b * f
                            };
                            let c00 = lerp(grab(h0, w0, d0), grab(h0, w0, d1), fd);
                            let c01 = lerp(grab(h0, w1, d0), grab(h0, w1, d1), fd);
                            let c10 = lerp(grab(h1, w0, d0), grab(h1, w0, d1), fd);
                            let c11 = lerp(grab(h1, w1, d0), grab(h1, w1, d1), fd);
                            let c0 = lerp(c00, c01, fw);
                            let c1 = lerp(c10, c11, fw);
                            out[((ch * oh + jh) * ow + jw) * od + jd] = lerp(c0, c1, fh);
                        }
                    }
                }
            }
        }
    }
    Ok(macs)
}
