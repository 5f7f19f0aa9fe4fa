//! Elementwise, matrix, normalization, and shape ops with backward rules.

use super::{GradFn, Tensor};
use crate::error::{Error, Result};

fn same_shape(a: &Tensor, b: &Tensor, op: &str) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(Error::contract(format!(
            "{op}: shape mismatch {:?} vs {:?}",
            a.shape(),
            b.shape()
        )));
    }
    Ok(())
}

// ---------------------------------------------------------------------------
// Binary elementwise
// ---------------------------------------------------------------------------

struct AddFn {
    parents: [Tensor; 2],
}

impl GradFn for AddFn {
    fn parents(&self) -> &[Tensor] {
        &self.parents
    }
    fn backward(&self, g: &[f64]) -> Vec<Option<Vec<f64>>> {
        vec![Some(g.to_vec()), Some(g.to_vec())]
    }
}

struct SubFn {
    parents: [Tensor; 2],
}

impl GradFn for SubFn {
    fn parents(&self) -> &[Tensor] {
        &self.parents
    }
    fn backward(&self, g: &[f64]) -> Vec<Option<Vec<f64>>> {
        vec![Some(g.to_vec()), Some(g.iter().map(|v| -v).collect())]
    }
}

struct MulFn {
    parents: [Tensor; 2],
}

impl GradFn for MulFn {
    fn parents(&self) -> &[Tensor] {
        &self.parents
    }
    fn backward(&self, g: &[f64]) -> Vec<Option<Vec<f64>>> {
        let a = self.parents[0].data();
        let b = self.parents[1].data();
        let da = g.iter().zip(b).map(|(g, b)| g * b).collect();
        let db = g.iter().zip(a).map(|(g, a)| g * a).collect();
        vec![Some(da), Some(db)]
    }
}

struct DivFn {
    parents: [Tensor; 2],
}

impl GradFn for DivFn {
    fn parents(&self) -> &[Tensor] {
        &self.parents
    }
    fn backward(&self, g: &[f64]) -> Vec<Option<Vec<f64>>> {
        let a = self.parents[0].data();
        let b = self.parents[1].data();
        let da = g.iter().zip(b).map(|(g, b)| g / b).collect();
        let db = g
            .iter()
            .zip(a.iter().zip(b))
            .map(|(g, (a, b))| -g * a / (b * b))
            .collect();
        vec![Some(da), Some(db)]
    }
}

// ---------------------------------------------------------------------------
// Unary elementwise
// ---------------------------------------------------------------------------

/// y = a*x + b
struct AffineFn {
    parents: [Tensor; 1],
    a: f64,
}

impl GradFn for AffineFn {
    fn parents(&self) -> &[Tensor] {
        &self.parents
    }
    fn backward(&self, g: &[f64]) -> Vec<Option<Vec<f64>>> {
        vec![Some(g.iter().map(|v| v * self.a).collect())]
    }
}

struct ReluFn {
    parents: [Tensor; 1],
}

impl GradFn for ReluFn {
    fn parents(&self) -> &[Tensor] {
        &self.parents
    }
    fn backward(&self, g: &[f64]) -> Vec<Option<Vec<f64>>> {
        let x = self.parents[0].data();
        vec![Some(
            g.iter()
                .zip(x)
                .map(|(g, x)| if *x > 0.0 { *g } else { 0.0 })
                .collect(),
        )]
    }
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_A: f64 = 0.044_715;

fn gelu_val(x: f64) -> f64 {
    0.5 * x * (1.0 + (GELU_C * (x + GELU_A * x * x * x)).tanh())
}

fn gelu_grad(x: f64) -> f64 {
    let u = GELU_C * (x + GELU_A * x * x * x);
    let t = u.tanh();
    let sech2 = 1.0 - t * t;
    0.5 * (1.0 + t) + 0.5 * x * sech2 * GELU_C * (1.0 + 3.0 * GELU_A * x * x)
}

struct GeluFn {
    parents: [Tensor; 1],
}

impl GradFn for GeluFn {
    fn parents(&self) -> &[Tensor] {
        &self.parents
    }
    fn backward(&self, g: &[f64]) -> Vec<Option<Vec<f64>>> {
        let x = self.parents[0].data();
        vec![Some(g.iter().zip(x).map(|(g, x)| g * gelu_grad(*x)).collect())]
    }
}

/// Saves the forward output; d/dx sigmoid = y(1-y).
struct SigmoidFn {
    parents: [Tensor; 1],
    out: Vec<f64>,
}

impl GradFn for SigmoidFn {
    fn parents(&self) -> &[Tensor] {
        &self.parents
    }
    fn backward(&self, g: &[f64]) -> Vec<Option<Vec<f64>>> {
        vec![Some(
            g.iter()
                .zip(&self.out)
                .map(|(g, y)| g * y * (1.0 - y))
                .collect(),
        )]
    }
}

struct LnFn {
    parents: [Tensor; 1],
}

impl GradFn for LnFn {
    fn parents(&self) -> &[Tensor] {
        &self.parents
    }
    fn backward(&self, g: &[f64]) -> Vec<Option<Vec<f64>>> {
        let x = self.parents[0].data();
        vec![Some(g.iter().zip(x).map(|(g, x)| g / x).collect())]
    }
}

struct PowScalarFn {
    parents: [Tensor; 1],
    exponent: f64,
}

impl GradFn for PowScalarFn {
    fn parents(&self) -> &[Tensor] {
        &self.parents
    }
    fn backward(&self, g: &[f64]) -> Vec<Option<Vec<f64>>> {
        let x = self.parents[0].data();
        let e = self.exponent;
        vec![Some(
            g.iter()
                .zip(x)
                .map(|(g, x)| g * e * x.powf(e - 1.0))
                .collect(),
        )]
    }
}

// ---------------------------------------------------------------------------
// Reductions
// ---------------------------------------------------------------------------

struct SumAllFn {
    parents: [Tensor; 1],
}

impl GradFn for SumAllFn {
    fn parents(&self) -> &[Tensor] {
        &self.parents
    }
    fn backward(&self, g: &[f64]) -> Vec<Option<Vec<f64>>> {
        vec![Some(vec![g[0]; self.parents[0].numel()])]
    }
}

struct MeanAllFn {
    parents: [Tensor; 1],
}

impl GradFn for MeanAllFn {
    fn parents(&self) -> &[Tensor] {
        &self.parents
    }
    fn backward(&self, g: &[f64]) -> Vec<Option<Vec<f64>>> {
        let n = self.parents[0].numel() as f64;
        vec![Some(vec![g[0] / n; self.parents[0].numel()])]
    }
}

// ---------------------------------------------------------------------------
// Matrix ops
// ---------------------------------------------------------------------------

/// out[m,n] += a[m,k] * b[k,n], plain ikj loop with contiguous inner axis.
pub(crate) fn matmul_nn(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        let out_row = &mut out[i * n..(i + 1) * n];
        for p in 0..k {
            let av = a[i * k + p];
            if av == 0.0 {
                continue;
            }
            let b_row = &b[p * n..(p + 1) * n];
            for (o, bv) in out_row.iter_mut().zip(b_row) {
                *o += av * bv;
            }
        }
    }
    out
}

/// out[m,n] = a[m,k] * b[n,k]^T
pub(crate) fn matmul_nt(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        let a_row = &a[i * k..(i + 1) * k];
        for j in 0..n {
            let b_row = &b[j * k..(j + 1) * k];
            let mut acc = 0.0;
            for (x, y) in a_row.iter().zip(b_row) {
                acc += x * y;
            }
            out[i * n + j] = acc;
        }
    }
    out
}

/// out[k,n] = a[m,k]^T * b[m,n]
pub(crate) fn matmul_tn(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut out = vec![0.0; k * n];
    for i in 0..m {
        let a_row = &a[i * k..(i + 1) * k];
        let b_row = &b[i * n..(i + 1) * n];
        for (p, av) in a_row.iter().enumerate() {
            if *av == 0.0 {
                continue;
            }
            let out_row = &mut out[p * n..(p + 1) * n];
            for (o, bv) in out_row.iter_mut().zip(b_row) {
                *o += av * bv;
            }
        }
    }
    out
}

struct MatmulFn {
    parents: [Tensor; 2],
    m: usize,
    k: usize,
    n: usize,
}

impl GradFn for MatmulFn {
    fn parents(&self) -> &[Tensor] {
        &self.parents
    }
    fn backward(&self, g: &[f64]) -> Vec<Option<Vec<f64>>> {
        let a = self.parents[0].data();
        let b = self.parents[1].data();
        // dA = g · B^T ; dB = A^T · g
        let da = matmul_nt(g, b, self.m, self.n, self.k);
        let db = matmul_tn(a, g, self.m, self.k, self.n);
        vec![Some(da), Some(db)]
    }
}

struct Transpose2dFn {
    parents: [Tensor; 1],
    rows: usize,
    cols: usize,
}

impl GradFn for Transpose2dFn {
    fn parents(&self) -> &[Tensor] {
        &self.parents
    }
    fn backward(&self, g: &[f64]) -> Vec<Option<Vec<f64>>> {
        // g has shape [cols, rows]; transpose back.
        let mut out = vec![0.0; self.rows * self.cols];
        for i in 0..self.cols {
            for j in 0..self.rows {
                out[j * self.cols + i] = g[i * self.rows + j];
            }
        }
        vec![Some(out)]
    }
}

// ---------------------------------------------------------------------------
// Softmax / normalization
// ---------------------------------------------------------------------------

struct SoftmaxRowsFn {
    parents: [Tensor; 1],
    out: Vec<f64>,
    cols: usize,
}

impl GradFn for SoftmaxRowsFn {
    fn parents(&self) -> &[Tensor] {
        &self.parents
    }
    fn backward(&self, g: &[f64]) -> Vec<Option<Vec<f64>>> {
        let mut dx = vec![0.0; g.len()];
        for r in 0..g.len() / self.cols {
            let s = r * self.cols;
            let y = &self.out[s..s + self.cols];
            let gr = &g[s..s + self.cols];
            let dot: f64 = y.iter().zip(gr).map(|(y, g)| y * g).sum();
            for c in 0..self.cols {
                dx[s + c] = y[c] * (gr[c] - dot);
            }
        }
        vec![Some(dx)]
    }
}

/// Layer normalization over groups of `group` contiguous or strided elements.
///
/// `rows` variant: normalize each row of an [n, d] matrix (stride 1).
/// `channels` variant: normalize across channels of a [C, spatial...] volume
/// (stride = spatial size), one group per spatial location.
struct LayerNormFn {
    parents: [Tensor; 3], // x, gamma, beta
    group: usize,
    stride: usize,
    n_groups: usize,
    // per element: normalized value; per group: 1/sigma
    xhat: Vec<f64>,
    inv_sigma: Vec<f64>,
}

impl LayerNormFn {
    fn group_base(&self, gi: usize) -> usize {
        if self.stride == 1 {
            gi * self.group
        } else {
            // channels layout: group gi is the set {gi + c*stride}
            gi
        }
    }

    fn idx(&self, base: usize, c: usize) -> usize {
        base + c * self.stride
    }
}

impl GradFn for LayerNormFn {
    fn parents(&self) -> &[Tensor] {
        &self.parents
    }
    fn backward(&self, g: &[f64]) -> Vec<Option<Vec<f64>>> {
        let gamma = self.parents[1].data();
        let d = self.group as f64;
        let mut dx = vec![0.0; g.len()];
        let mut dgamma = vec![0.0; self.group];
        let mut dbeta = vec![0.0; self.group];
        if self.stride == 1 {
            for gi in 0..self.n_groups {
                let base = self.group_base(gi);
                let inv_s = self.inv_sigma[gi];
                let mut mean_gg = 0.0; // mean of g*gamma
                let mut mean_ggx = 0.0; // mean of g*gamma*xhat
                for c in 0..self.group {
                    let i = self.idx(base, c);
                    let gg = g[i] * gamma[c];
                    mean_gg += gg;
                    mean_ggx += gg * self.xhat[i];
                }
                mean_gg /= d;
                mean_ggx /= d;
                for c in 0..self.group {
                    let i = self.idx(base, c);
                    let gg = g[i] * gamma[c];
                    dx[i] = inv_s * (gg - mean_gg - self.xhat[i] * mean_ggx);
                    dgamma[c] += g[i] * self.xhat[i];
                    dbeta[c] += g[i];
                }
            }
        } else {
            // Channel variant: contiguous plane sweeps.
            let stride = self.stride;
            let mut mean_gg = vec![0.0f64; stride];
            let mut mean_ggx = vec![0.0f64; stride];
            for c in 0..self.group {
                let base = c * stride;
                let gc = gamma[c];
                let mut acc_dg = 0.0;
                let mut acc_db = 0.0;
                for i in 0..stride {
                    let gv = g[base + i];
                    let gg = gv * gc;
                    mean_gg[i] += gg;
                    mean_ggx[i] += gg * self.xhat[base + i];
                    acc_dg += gv * self.xhat[base + i];
                    acc_db += gv;
                }
                dgamma[c] = acc_dg;
                dbeta[c] = acc_db;
            }
            for i in 0..stride {
                mean_gg[i] /= d;
                mean_ggx[i] /= d;
            }
            for c in 0..self.group {
                let base = c * stride;
                let gc = gamma[c];
                for i in 0..stride {
                    dx[base + i] = self.inv_sigma[i]
                        * (g[base + i] * gc - mean_gg[i] - self.xhat[base + i] * mean_ggx[i]);
                }
            }
        }
        vec![Some(dx), Some(dgamma), Some(dbeta)]
    }
}

// ---------------------------------------------------------------------------
// Shape / concat / slice / broadcast
// ---------------------------------------------------------------------------

struct ReshapeFn {
    parents: [Tensor; 1],
}

impl GradFn for ReshapeFn {
    fn parents(&self) -> &[Tensor] {
        &self.parents
    }
    fn backward(&self, g: &[f64]) -> Vec<Option<Vec<f64>>> {
        vec![Some(g.to_vec())]
    }
}

struct ConcatRowsFn {
    parents: Vec<Tensor>,
}

impl GradFn for ConcatRowsFn {
    fn parents(&self) -> &[Tensor] {
        &self.parents
    }
    fn backward(&self, g: &[f64]) -> Vec<Option<Vec<f64>>> {
        let mut offset = 0;
        self.parents
            .iter()
            .map(|p| {
                let n = p.numel();
                let out = g[offset..offset + n].to_vec();
                offset += n;
                Some(out)
            })
            .collect()
    }
}

struct ConcatColsFn {
    parents: Vec<Tensor>,
    rows: usize,
    widths: Vec<usize>,
    total: usize,
}

impl GradFn for ConcatColsFn {
    fn parents(&self) -> &[Tensor] {
        &self.parents
    }
    fn backward(&self, g: &[f64]) -> Vec<Option<Vec<f64>>> {
        let mut outs: Vec<Option<Vec<f64>>> = Vec::with_capacity(self.parents.len());
        let mut offset = 0;
        for &w in &self.widths {
            let mut buf = vec![0.0; self.rows * w];
            for r in 0..self.rows {
                buf[r * w..(r + 1) * w]
                    .copy_from_slice(&g[r * self.total + offset..r * self.total + offset + w]);
            }
            outs.push(Some(buf));
            offset += w;
        }
        outs
    }
}

struct SliceRowsFn {
    parents: [Tensor; 1],
    start: usize,
    len: usize,
    row_size: usize,
}

impl GradFn for SliceRowsFn {
    fn parents(&self) -> &[Tensor] {
        &self.parents
    }
    fn backward(&self, g: &[f64]) -> Vec<Option<Vec<f64>>> {
        let mut out = vec![0.0; self.parents[0].numel()];
        let a = self.start * self.row_size;
        out[a..a + self.len * self.row_size].copy_from_slice(g);
        vec![Some(out)]
    }
}

struct SliceColsFn {
    parents: [Tensor; 1],
    start: usize,
    len: usize,
    rows: usize,
    cols: usize,
}

impl GradFn for SliceColsFn {
    fn parents(&self) -> &[Tensor] {
        &self.parents
    }
    fn backward(&self, g: &[f64]) -> Vec<Option<Vec<f64>>> {
        let mut out = vec![0.0; self.rows * self.cols];
        for r in 0..self.rows {
            out[r * self.cols + self.start..r * self.cols + self.start + self.len]
                .copy_from_slice(&g[r * self.len..(r + 1) * self.len]);
        }
        vec![Some(out)]
    }
}

struct AddBiasRowsFn {
    parents: [Tensor; 2],
    rows: usize,
    cols: usize,
}

impl GradFn for AddBiasRowsFn {
    fn parents(&self) -> &[Tensor] {
        &self.parents
    }
    fn backward(&self, g: &[f64]) -> Vec<Option<Vec<f64>>> {
        let mut db = vec![0.0; self.cols];
        for r in 0..self.rows {
            for c in 0..self.cols {
                db[c] += g[r * self.cols + c];
            }
        }
        vec![Some(g.to_vec()), Some(db)]
    }
}

struct BroadcastChannelsFn {
    parents: [Tensor; 1],
    channels: usize,
    spatial: usize,
}

impl GradFn for BroadcastChannelsFn {
    fn parents(&self) -> &[Tensor] {
        &self.parents
    }
    fn backward(&self, g: &[f64]) -> Vec<Option<Vec<f64>>> {
        let mut out = vec![0.0; self.channels];
        for c in 0..self.channels {
            out[c] = g[c * self.spatial..(c + 1) * self.spatial].iter().sum();
        }
        vec![Some(out)]
    }
}

/// Rotates feature pairs of each row by position-dependent angles.
struct RopeFn {
    parents: [Tensor; 1],
    angles: Vec<f64>, // per element pair, flattened [n, d/2]
    half: usize,
}

impl GradFn for RopeFn {
    fn parents(&self) -> &[Tensor] {
        &self.parents
    }
    fn backward(&self, g: &[f64]) -> Vec<Option<Vec<f64>>> {
        // Inverse rotation applied to the gradient.
        let mut out = vec![0.0; g.len()];
        let d = self.half * 2;
        for r in 0..g.len() / d {
            for i in 0..self.half {
                let a = self.angles[r * self.half + i];
                let (sin, cos) = a.sin_cos();
                let g0 = g[r * d + 2 * i];
                let g1 = g[r * d + 2 * i + 1];
                out[r * d + 2 * i] = cos * g0 + sin * g1;
                out[r * d + 2 * i + 1] = -sin * g0 + cos * g1;
            }
        }
        vec![Some(out)]
    }
}

// ---------------------------------------------------------------------------
// Public op surface
// ---------------------------------------------------------------------------

impl Tensor {
    pub fn add(&self, other: &Tensor) -> Result<Tensor> {
        same_shape(self, other, "add")?;
        let data = self
            .data()
            .iter()
            .zip(other.data())
            .map(|(a, b)| a + b)
            .collect();
        Tensor::from_op(
            "add",
            self.shape().to_vec(),
            data,
            Box::new(AddFn {
                parents: [self.clone(), other.clone()],
            }),
        )
    }

    pub fn sub(&self, other: &Tensor) -> Result<Tensor> {
        same_shape(self, other, "sub")?;
        let data = self
            .data()
            .iter()
            .zip(other.data())
            .map(|(a, b)| a - b)
            .collect();
        Tensor::from_op(
            "sub",
            self.shape().to_vec(),
            data,
            Box::new(SubFn {
                parents: [self.clone(), other.clone()],
            }),
        )
    }

    pub fn mul(&self, other: &Tensor) -> Result<Tensor> {
        same_shape(self, other, "mul")?;
        let data = self
            .data()
            .iter()
            .zip(other.data())
            .map(|(a, b)| a * b)
            .collect();
        Tensor::from_op(
            "mul",
            self.shape().to_vec(),
            data,
            Box::new(MulFn {
                parents: [self.clone(), other.clone()],
            }),
        )
    }

    pub fn div(&self, other: &Tensor) -> Result<Tensor> {
        same_shape(self, other, "div")?;
        let data = self
            .data()
            .iter()
            .zip(other.data())
            .map(|(a, b)| a / b)
            .collect();
        Tensor::from_op(
            "div",
            self.shape().to_vec(),
            data,
            Box::new(DivFn {
                parents: [self.clone(), other.clone()],
            }),
        )
    }

    /// y = a*x + b, elementwise with scalar a and b.
    pub fn affine(&self, a: f64, b: f64) -> Result<Tensor> {
        let data = self.data().iter().map(|x| a * x + b).collect();
        Tensor::from_op(
            "affine",
            self.shape().to_vec(),
            data,
            Box::new(AffineFn {
                parents: [self.clone()],
                a,
            }),
        )
    }

    pub fn scale(&self, a: f64) -> Result<Tensor> {
        self.affine(a, 0.0)
    }

    pub fn relu(&self) -> Result<Tensor> {
        let data = self.data().iter().map(|x| x.max(0.0)).collect();
        Tensor::from_op(
            "relu",
            self.shape().to_vec(),
            data,
            Box::new(ReluFn {
                parents: [self.clone()],
            }),
        )
    }

    /// Tanh-approximation GELU.
    pub fn gelu(&self) -> Result<Tensor> {
        let data = self.data().iter().map(|x| gelu_val(*x)).collect();
        Tensor::from_op(
            "gelu",
            self.shape().to_vec(),
            data,
            Box::new(GeluFn {
                parents: [self.clone()],
            }),
        )
    }

    pub fn sigmoid(&self) -> Result<Tensor> {
        let data: Vec<f64> = self
            .data()
            .iter()
            .map(|x| {
                if *x >= 0.0 {
                    1.0 / (1.0 + (-x).exp())
                } else {
                    let e = x.exp();
                    e / (1.0 + e)
                }
            })
            .collect();
        Tensor::from_op(
            "sigmoid",
            self.shape().to_vec(),
            data.clone(),
            Box::new(SigmoidFn {
                parents: [self.clone()],
                out: data,
            }),
        )
    }

    pub fn ln(&self) -> Result<Tensor> {
        if self.data().iter().any(|x| *x <= 0.0) {
            return Err(Error::contract("ln: non-positive input"));
        }
        let data = self.data().iter().map(|x| x.ln()).collect();
        Tensor::from_op(
            "ln",
            self.shape().to_vec(),
            data,
            Box::new(LnFn {
                parents: [self.clone()],
            }),
        )
    }

    /// x^e elementwise; requires x >= 0.
    pub fn pow_scalar(&self, e: f64) -> Result<Tensor> {
        if self.data().iter().any(|x| *x < 0.0) {
            return Err(Error::contract("pow_scalar: negative input"));
        }
        let data = self.data().iter().map(|x| x.powf(e)).collect();
        Tensor::from_op(
            "pow_scalar",
            self.shape().to_vec(),
            data,
            Box::new(PowScalarFn {
                parents: [self.clone()],
                exponent: e,
            }),
        )
    }

    pub fn sum_all(&self) -> Result<Tensor> {
        let s: f64 = self.data().iter().sum();
        Tensor::from_op(
            "sum_all",
            vec![1],
            vec![s],
            Box::new(SumAllFn {
                parents: [self.clone()],
            }),
        )
    }

    pub fn mean_all(&self) -> Result<Tensor> {
        let s: f64 = self.data().iter().sum();
        let n = self.numel() as f64;
        Tensor::from_op(
            "mean_all",
            vec![1],
            vec![s / n],
            Box::new(MeanAllFn {
                parents: [self.clone()],
            }),
        )
    }

    /// [m,k] x [k,n] -> [m,n]
    pub fn matmul(&self, other: &Tensor) -> Result<Tensor> {
        let (m, k) = as_2d(self, "matmul lhs")?;
        let (k2, n) = as_2d(other, "matmul rhs")?;
        if k != k2 {
            return Err(Error::contract(format!(
                "matmul: inner dims {k} vs {k2}"
            )));
        }
        let data = matmul_nn(self.data(), other.data(), m, k, n);
        Tensor::from_op(
            "matmul",
            vec![m, n],
            data,
            Box::new(MatmulFn {
                parents: [self.clone(), other.clone()],
                m,
                k,
                n,
            }),
        )
    }

    pub fn transpose2d(&self) -> Result<Tensor> {
        let (rows, cols) = as_2d(self, "transpose2d")?;
        let src = self.data();
        let mut data = vec![0.0; rows * cols];
        for i in 0..rows {
            for j in 0..cols {
                data[j * rows + i] = src[i * cols + j];
            }
        }
        Tensor::from_op(
            "transpose2d",
            vec![cols, rows],
            data,
            Box::new(Transpose2dFn {
                parents: [self.clone()],
                rows,
                cols,
            }),
        )
    }

    /// Row-wise softmax of an [n, d] matrix.
    pub fn softmax_rows(&self) -> Result<Tensor> {
        let (_, cols) = as_2d(self, "softmax_rows")?;
        let src = self.data();
        let mut data = vec![0.0; src.len()];
        for r in 0..src.len() / cols {
            let row = &src[r * cols..(r + 1) * cols];
            let max = row.iter().fold(f64::NEG_INFINITY, |a, b| a.max(*b));
            let mut sum = 0.0;
            for (o, x) in data[r * cols..(r + 1) * cols].iter_mut().zip(row) {
                *o = (x - max).exp();
                sum += *o;
            }
            for o in data[r * cols..(r + 1) * cols].iter_mut() {
                *o /= sum;
            }
        }
        Tensor::from_op(
            "softmax_rows",
            self.shape().to_vec(),
            data.clone(),
            Box::new(SoftmaxRowsFn {
                parents: [self.clone()],
                out: data,
                cols,
            }),
        )
    }

    /// Normalize each row of an [n, d] matrix, then scale/shift by gamma/beta of shape [d].
    pub fn layer_norm_rows(&self, gamma: &Tensor, beta: &Tensor, eps: f64) -> Result<Tensor> {
        let (rows, cols) = as_2d(self, "layer_norm_rows")?;
        if gamma.numel() != cols || beta.numel() != cols {
            return Err(Error::contract("layer_norm_rows: gamma/beta size"));
        }
        layer_norm_impl(self, gamma, beta, eps, cols, 1, rows, "layer_norm_rows")
    }

    /// Normalize across channels at every spatial location of a [C, ...] volume.
    pub fn layer_norm_channels(&self, gamma: &Tensor, beta: &Tensor, eps: f64) -> Result<Tensor> {
        if self.shape().is_empty() {
            return Err(Error::contract("layer_norm_channels: scalar input"));
        }
        let channels = self.shape()[0];
        let spatial = self.numel() / channels;
        if gamma.numel() != channels || beta.numel() != channels {
            return Err(Error::contract("layer_norm_channels: gamma/beta size"));
        }
        layer_norm_impl(
            self,
            gamma,
            beta,
            eps,
            channels,
            spatial,
            spatial,
            "layer_norm_channels",
        )
    }

    pub fn reshape(&self, shape: &[usize]) -> Result<Tensor> {
        let numel: usize = shape.iter().product();
        if numel != self.numel() {
            return Err(Error::contract(format!(
                "reshape: {:?} -> {:?}",
                self.shape(),
                shape
            )));
        }
        Tensor::from_op(
            "reshape",
            shape.to_vec(),
            self.data().to_vec(),
            Box::new(ReshapeFn {
                parents: [self.clone()],
            }),
        )
    }

    /// Concatenate along the first axis; trailing dims must match.
    pub fn concat_rows(tensors: &[Tensor]) -> Result<Tensor> {
        if tensors.is_empty() {
            return Err(Error::contract("concat_rows: empty input"));
        }
        let tail = &tensors[0].shape()[1..];
        let mut rows = 0;
        let mut data = Vec::new();
        for t in tensors {
            if &t.shape()[1..] != tail {
                return Err(Error::contract("concat_rows: trailing dims differ"));
            }
            rows += t.shape()[0];
            data.extend_from_slice(t.data());
        }
        let mut shape = vec![rows];
        shape.extend_from_slice(tail);
        Tensor::from_op(
            "concat_rows",
            shape,
            data,
            Box::new(ConcatRowsFn {
                parents: tensors.to_vec(),
            }),
        )
    }

    /// Concatenate [n, d_i] matrices along columns.
    pub fn concat_cols(tensors: &[Tensor]) -> Result<Tensor> {
        if tensors.is_empty() {
            return Err(Error::contract("concat_cols: empty input"));
        }
        let rows = tensors[0].shape()[0];
        let mut widths = Vec::with_capacity(tensors.len());
        for t in tensors {
            let (r, c) = as_2d(t, "concat_cols")?;
            if r != rows {
                return Err(Error::contract("concat_cols: row counts differ"));
            }
            widths.push(c);
        }
        let total: usize = widths.iter().sum();
        let mut data = vec![0.0; rows * total];
        let mut offset = 0;
        for (t, &w) in tensors.iter().zip(&widths) {
            for r in 0..rows {
                data[r * total + offset..r * total + offset + w]
                    .copy_from_slice(&t.data()[r * w..(r + 1) * w]);
            }
            offset += w;
        }
        Tensor::from_op(
            "concat_cols",
            vec![rows, total],
            data,
            Box::new(ConcatColsFn {
                parents: tensors.to_vec(),
                rows,
                widths,
                total,
            }),
        )
    }

    /// Rows [start, start+len) of the first axis.
    pub fn slice_rows(&self, start: usize, len: usize) -> Result<Tensor> {
        if self.shape().is_empty() || start + len > self.shape()[0] {
            return Err(Error::contract(format!(
                "slice_rows: [{start}, {}) of {:?}",
                start + len,
                self.shape()
            )));
        }
        let row_size = self.numel() / self.shape()[0];
        let data = self.data()[start * row_size..(start + len) * row_size].to_vec();
        let mut shape = self.shape().to_vec();
        shape[0] = len;
        Tensor::from_op(
            "slice_rows",
            shape,
            data,
            Box::new(SliceRowsFn {
                parents: [self.clone()],
                start,
                len,
                row_size,
            }),
        )
    }

    /// Columns [start, start+len) of an [n, d] matrix.
    pub fn slice_cols(&self, start: usize, len: usize) -> Result<Tensor> {
        let (rows, cols) = as_2d(self, "slice_cols")?;
        if start + len > cols {
            return Err(Error::contract(format!(
                "slice_cols: [{start}, {}) of width {cols}",
                start + len
            )));
        }
        let mut data = vec![0.0; rows * len];
        for r in 0..rows {
            data[r * len..(r + 1) * len]
                .copy_from_slice(&self.data()[r * cols + start..r * cols + start + len]);
        }
        Tensor::from_op(
            "slice_cols",
            vec![rows, len],
            data,
            Box::new(SliceColsFn {
                parents: [self.clone()],
                start,
                len,
                rows,
                cols,
            }),
        )
    }

    /// Add a [d] bias to every row of an [n, d] matrix.
    pub fn add_bias_rows(&self, bias: &Tensor) -> Result<Tensor> {
        let (rows, cols) = as_2d(self, "add_bias_rows")?;
        if bias.numel() != cols {
            return Err(Error::contract("add_bias_rows: bias size"));
        }
        let b = bias.data();
        let mut data = self.data().to_vec();
        for r in 0..rows {
            for c in 0..cols {
                data[r * cols + c] += b[c];
            }
        }
        Tensor::from_op(
            "add_bias_rows",
            self.shape().to_vec(),
            data,
            Box::new(AddBiasRowsFn {
                parents: [self.clone(), bias.clone()],
                rows,
                cols,
            }),
        )
    }

    /// Broadcast a [C] vector to a [C, H, W, D] volume.
    pub fn broadcast_channels(&self, extents: (usize, usize, usize)) -> Result<Tensor> {
        if self.shape().len() != 1 {
            return Err(Error::contract("broadcast_channels: expected 1-D input"));
        }
        let channels = self.numel();
        let spatial = extents.0 * extents.1 * extents.2;
        let mut data = vec![0.0; channels * spatial];
        for (c, v) in self.data().iter().enumerate() {
            data[c * spatial..(c + 1) * spatial].fill(*v);
        }
        Tensor::from_op(
            "broadcast_channels",
            vec![channels, extents.0, extents.1, extents.2],
            data,
            Box::new(BroadcastChannelsFn {
                parents: [self.clone()],
                channels,
                spatial,
            }),
        )
    }

    /// Rotary position embedding over the rows of an [n, d] matrix.
    ///
    /// Pair (x_{2i}, x_{2i+1}) of row r is rotated by angle m_r * theta_i with
    /// theta_i = 10000^(-2i/d).
    pub fn rope_apply(&self, positions: &[usize]) -> Result<Tensor> {
        let (rows, cols) = as_2d(self, "rope_apply")?;
        if cols % 2 != 0 {
            return Err(Error::config(format!(
                "rope_apply: head dim {cols} must be even"
            )));
        }
        if positions.len() != rows {
            return Err(Error::contract("rope_apply: positions length"));
        }
        let half = cols / 2;
        let thetas: Vec<f64> = (0..half)
            .map(|i| 10000f64.powf(-2.0 * i as f64 / cols as f64))
            .collect();
        let src = self.data();
        let mut data = vec![0.0; src.len()];
        let mut angles = vec![0.0; rows * half];
        for r in 0..rows {
            let m = positions[r] as f64;
            for i in 0..half {
                let a = m * thetas[i];
                angles[r * half + i] = a;
                let (sin, cos) = a.sin_cos();
                let x0 = src[r * cols + 2 * i];
                let x1 = src[r * cols + 2 * i + 1];
                data[r * cols + 2 * i] = cos * x0 - sin * x1;
                data[r * cols + 2 * i + 1] = sin * x0 + cos * x1;
            }
        }
        Tensor::from_op(
            "rope_apply",
            self.shape().to_vec(),
            data,
            Box::new(RopeFn {
                parents: [self.clone()],
                angles,
                half,
            }),
        )
    }
}

fn as_2d(t: &Tensor, op: &str) -> Result<(usize, usize)> {
    if t.shape().len() != 2 {
        return Err(Error::contract(format!(
            "{op}: expected 2-D tensor, got {:?}",
            t.shape()
        )));
    }
    Ok((t.shape()[0], t.shape()[1]))
}

#[allow(clippy::too_many_arguments)]
fn layer_norm_impl(
    x: &Tensor,
    gamma: &Tensor,
    beta: &Tensor,
    eps: f64,
    group: usize,
    stride: usize,
    n_groups: usize,
    op: &'static str,
) -> Result<Tensor> {
    let src = x.data();
    let gm = gamma.data();
    let bt = beta.data();
    let mut data = vec![0.0; src.len()];
    let mut xhat = vec![0.0; src.len()];
    let mut inv_sigma = vec![0.0; n_groups];
    let d = group as f64;
    if stride == 1 {
        for gi in 0..n_groups {
            let base = gi * group;
            let row = &src[base..base + group];
            let mean = row.iter().sum::<f64>() / d;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d;
            let inv_s = 1.0 / (var + eps).sqrt();
            inv_sigma[gi] = inv_s;
            for c in 0..group {
                let xh = (row[c] - mean) * inv_s;
                xhat[base + c] = xh;
                data[base + c] = gm[c] * xh + bt[c];
            }
        }
    } else {
        // Channel variant: accumulate over channels with contiguous sweeps
        // per channel plane instead of strided per-voxel loops.
        let mut mean = vec![0.0f64; n_groups];
        for c in 0..group {
            let plane = &src[c * stride..(c + 1) * stride];
            for (m, v) in mean.iter_mut().zip(plane) {
                *m += v;
            }
        }
        for m in mean.iter_mut() {
            *m /= d;
        }
        let mut var = vec![0.0f64; n_groups];
        for c in 0..group {
            let plane = &src[c * stride..(c + 1) * stride];
            for ((vv, v), m) in var.iter_mut().zip(plane).zip(&mean) {
                let t = v - m;
                *vv += t * t;
            }
        }
        for (gi, vv) in var.iter().enumerate() {
            inv_sigma[gi] = 1.0 / (vv / d + eps).sqrt();
        }
        for c in 0..group {
            let base = c * stride;
            let (g, b) = (gm[c], bt[c]);
            for i in 0..stride {
                let xh = (src[base + i] - mean[i]) * inv_sigma[i];
                xhat[base + i] = xh;
                data[base + i] = g * xh + b;
            }
        }
    }
    Tensor::from_op(
        op,
        x.shape().to_vec(),
        data,
        Box::new(LayerNormFn {
            parents: [x.clone(), gamma.clone(), beta.clone()],
            group,
            stride,
            n_groups,
            xhat,
            inv_sigma,
        }),
    )
}
