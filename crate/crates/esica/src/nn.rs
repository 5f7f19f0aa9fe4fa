//! Shared building blocks: the parameter store, linear/conv layers, norms,
//! and grouped-query attention.

use rand_chacha::ChaCha20Rng;

use crate::error::{Error, Result};
use crate::tensor::{Gradients, Tensor};

pub const NORM_EPS: f64 = 1e-6;

/// Flat registry of named parameters. Modules hold [`ParamId`] handles and
/// read values at forward time; the optimizer and checkpoint code iterate
/// the registry directly.
#[derive(Debug, Clone, Default)]
pub struct ParamStore {
    entries: Vec<(String, Tensor)>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ParamId(usize);

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: impl Into<String>, init: Tensor) -> ParamId {
        let name = name.into();
        debug_assert!(
            !self.entries.iter().any(|(n, _)| *n == name),
            "duplicate parameter name {name}"
        );
        self.entries.push((name, init.as_param()));
        ParamId(self.entries.len() - 1)
    }

    pub fn get(&self, id: ParamId) -> &Tensor {
        &self.entries[id.0].1
    }

    pub fn set(&mut self, id: ParamId, value: Tensor) {
        self.entries[id.0].1 = value;
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.entries.iter().map(|(n, t)| (n.as_str(), t))
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.entries.len()).map(ParamId)
    }

    pub fn name_of(&self, id: ParamId) -> &str {
        &self.entries[id.0].0
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.entries.iter().position(|(n, _)| n == name).map(ParamId)
    }

    /// Total scalar parameter count.
    pub fn param_count(&self) -> u64 {
        self.entries.iter().map(|(_, t)| t.numel() as u64).sum()
    }

    /// Sum of gradient magnitudes per parameter (None where absent).
    pub fn grad_norms(&self, grads: &Gradients) -> Vec<(String, Option<f64>)> {
        self.entries
            .iter()
            .map(|(n, t)| {
                let norm = grads
                    .get(t)
                    .map(|g| g.iter().map(|v| v * v).sum::<f64>().sqrt());
                (n.clone(), norm)
            })
            .collect()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    Gelu,
    Relu,
}

impl Activation {
    pub fn apply(&self, x: &Tensor) -> Result<Tensor> {
        match self {
            Activation::Gelu => x.gelu(),
            Activation::Relu => x.relu(),
        }
    }
}

fn he_std(fan_in: usize) -> f64 {
    (1.0 / fan_in as f64).sqrt()
}

/// Fully connected layer over token rows; weight is stored [in, out].
#[derive(Debug, Clone)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: ParamId,
    pub in_features: usize,
    pub out_features: usize,
}

impl Linear {
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        in_features: usize,
        out_features: usize,
        rng: &mut ChaCha20Rng,
    ) -> Self {
        let weight = store.add(
            format!("{name}.weight"),
            Tensor::randn(&[in_features, out_features], he_std(in_features), rng),
        );
        let bias = store.add(format!("{name}.bias"), Tensor::zeros(&[out_features]));
        Linear {
            weight,
            bias,
            in_features,
            out_features,
        }
    }

    /// x: [n, in] -> [n, out]
    pub fn forward(&self, store: &ParamStore, x: &Tensor) -> Result<Tensor> {
        x.matmul(store.get(self.weight))?
            .add_bias_rows(store.get(self.bias))
    }
}

/// Dense 3D convolution layer.
#[derive(Debug, Clone)]
pub struct Conv3dLayer {
    pub weight: ParamId,
    pub bias: ParamId,
    pub stride: usize,
}

impl Conv3dLayer {
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        in_channels: usize,
        out_channels: usize,
        kernel: (usize, usize, usize),
        stride: usize,
        rng: &mut ChaCha20Rng,
    ) -> Self {
        let fan_in = in_channels * kernel.0 * kernel.1 * kernel.2;
        let weight = store.add(
            format!("{name}.weight"),
            Tensor::randn(
                &[out_channels, in_channels, kernel.0, kernel.1, kernel.2],
                he_std(fan_in),
                rng,
            ),
        );
        let bias = store.add(format!("{name}.bias"), Tensor::zeros(&[out_channels]));
        Conv3dLayer {
            weight,
            bias,
            stride,
        }
    }

    pub fn forward(&self, store: &ParamStore, x: &Tensor) -> Result<Tensor> {
        x.conv3d(store.get(self.weight), store.get(self.bias), self.stride)
    }
}

/// Learnable affine layer norm; `rows` normalizes the last axis of [n, d]
/// matrices, `channels` normalizes across the channel axis of volumes.
#[derive(Debug, Clone)]
pub struct NormLayer {
    pub gamma: ParamId,
    pub beta: ParamId,
}

impl NormLayer {
    pub fn new(store: &mut ParamStore, name: &str, width: usize) -> Self {
        let gamma = store.add(format!("{name}.gamma"), Tensor::full(&[width], 1.0));
        let beta = store.add(format!("{name}.beta"), Tensor::zeros(&[width]));
        NormLayer { gamma, beta }
    }

    pub fn rows(&self, store: &ParamStore, x: &Tensor) -> Result<Tensor> {
        x.layer_norm_rows(store.get(self.gamma), store.get(self.beta), NORM_EPS)
    }

    pub fn channels(&self, store: &ParamStore, x: &Tensor) -> Result<Tensor> {
        x.layer_norm_channels(store.get(self.gamma), store.get(self.beta), NORM_EPS)
    }
}

/// Per-head attention weights captured for inspection.
#[derive(Debug, Clone, serde::Serialize)]
pub struct AttentionMap {
    pub label: String,
    pub head: usize,
    pub rows: usize,
    pub cols: usize,
    pub weights: Vec<f64>,
}

/// Collects attention maps when attached to a forward pass.
#[derive(Debug, Default)]
pub struct AttnTrace {
    pub maps: Vec<AttentionMap>,
}

/// Scaled dot-product attention with grouped query heads and optional rotary
/// position embeddings on queries and keys.
///
/// `query_heads` are partitioned into `query_heads / kv_heads` groups; each
/// group shares one key/value head, so the K and V projections are
/// [d_model, kv_heads * d_head].
#[derive(Debug, Clone)]
pub struct GqaAttention {
    pub wq: Linear,
    pub wk: Linear,
    pub wv: Linear,
    pub wo: Linear,
    pub d_model: usize,
    pub query_heads: usize,
    pub kv_heads: usize,
}

impl GqaAttention {
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        d_model: usize,
        query_heads: usize,
        kv_heads: usize,
        rng: &mut ChaCha20Rng,
    ) -> Result<Self> {
        if query_heads == 0 || kv_heads == 0 {
            return Err(Error::config(format!("{name}: head counts must be positive")));
        }
        if d_model % query_heads != 0 {
            return Err(Error::config(format!(
                "{name}: d_model {d_model} not divisible by {query_heads} query heads"
            )));
        }
        if query_heads % kv_heads != 0 {
            return Err(Error::config(format!(
                "{name}: query heads {query_heads} not divisible by kv heads {kv_heads}"
            )));
        }
        let d_head = d_model / query_heads;
        let kv_dim = kv_heads * d_head;
        Ok(GqaAttention {
            wq: Linear::new(store, &format!("{name}.wq"), d_model, d_model, rng),
            wk: Linear::new(store, &format!("{name}.wk"), d_model, kv_dim, rng),
            wv: Linear::new(store, &format!("{name}.wv"), d_model, kv_dim, rng),
            wo: Linear::new(store, &format!("{name}.wo"), d_model, d_model, rng),
            d_model,
            query_heads,
            kv_heads,
        })
    }

    pub fn d_head(&self) -> usize {
        self.d_model / self.query_heads
    }

    /// q: [n_q, d_model], kv: [n_kv, d_model] -> [n_q, d_model].
    ///
    /// Positions, when given, are applied as rotary embeddings to the query
    /// and key head slices before the dot product.
    #[allow(clippy::too_many_arguments)]
    pub fn forward(
        &self,
        store: &ParamStore,
        q_in: &Tensor,
        kv_in: &Tensor,
        q_pos: Option<&[usize]>,
        kv_pos: Option<&[usize]>,
        label: &str,
        trace: Option<&mut AttnTrace>,
    ) -> Result<Tensor> {
        let d_head = self.d_head();
        let group = self.query_heads / self.kv_heads;
        let q = self.wq.forward(store, q_in)?;
        let k = self.wk.forward(store, kv_in)?;
        let v = self.wv.forward(store, kv_in)?;
        let scale = 1.0 / (d_head as f64).sqrt();

        let mut heads = Vec::with_capacity(self.query_heads);
        let mut collected: Vec<AttentionMap> = Vec::new();
        for h in 0..self.query_heads {
            let g = h / group;
            let mut qh = q.slice_cols(h * d_head, d_head)?;
            let mut kg = k.slice_cols(g * d_head, d_head)?;
            if let Some(pos) = q_pos {
                qh = qh.rope_apply(pos)?;
            }
            if let Some(pos) = kv_pos {
                kg = kg.rope_apply(pos)?;
            }
            let vg = v.slice_cols(g * d_head, d_head)?;
            let scores = qh.matmul(&kg.transpose2d()?)?.scale(scale)?;
            let attn = scores.softmax_rows()?;
            if trace.is_some() {
                collected.push(AttentionMap {
                    label: label.to_string(),
                    head: h,
                    rows: attn.shape()[0],
                    cols: attn.shape()[1],
                    weights: attn.data().to_vec(),
                });
            }
            heads.push(attn.matmul(&vg)?);
        }
        if let Some(t) = trace {
            t.maps.extend(collected);
        }
        let ctx = Tensor::concat_cols(&heads)?;
        self.wo.forward(store, &ctx)
    }
}

/// Two-layer MLP with an activation between.
#[derive(Debug, Clone)]
pub struct Mlp {
    pub lin1: Linear,
    pub lin2: Linear,
    pub activation: Activation,
}

impl Mlp {
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        width: usize,
        hidden: usize,
        activation: Activation,
        rng: &mut ChaCha20Rng,
    ) -> Self {
        Mlp {
            lin1: Linear::new(store, &format!("{name}.lin1"), width, hidden, rng),
            lin2: Linear::new(store, &format!("{name}.lin2"), hidden, width, rng),
            activation,
        }
    }

    pub fn forward(&self, store: &ParamStore, x: &Tensor) -> Result<Tensor> {
        let h = self.activation.apply(&self.lin1.forward(store, x)?)?;
        self.lin2.forward(store, &h)
    }
}

/// [C,H,W,D] -> [H*W*D, C] token matrix.
pub fn to_tokens(x: &Tensor) -> Result<Tensor> {
    let s = x.shape();
    if s.len() != 4 {
        return Err(Error::contract(format!("to_tokens: expected volume, got {s:?}")));
    }
    let spatial = s[1] * s[2] * s[3];
    x.reshape(&[s[0], spatial])?.transpose2d()
}

/// [H*W*D, C] token matrix back to [C,H,W,D].
pub fn from_tokens(x: &Tensor, grid: (usize, usize, usize)) -> Result<Tensor> {
    let s = x.shape();
    if s.len() != 2 || s[0] != grid.0 * grid.1 * grid.2 {
        return Err(Error::contract(format!(
            "from_tokens: {s:?} does not match grid {grid:?}"
        )));
    }
    x.transpose2d()?.reshape(&[s[1], grid.0, grid.1, grid.2])
}

/// Row-major linearized voxel index per token: ((h*W)+w)*D + d.
pub fn linear_positions(grid: (usize, usize, usize)) -> Vec<usize> {
    (0..grid.0 * grid.1 * grid.2).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::grad_check;
    use rand::SeedableRng;

    fn rng(seed: u64) -> ChaCha20Rng {
        ChaCha20Rng::seed_from_u64(seed)
    }

    #[test]
    fn token_round_trip() {
        let mut r = rng(1);
        let x = Tensor::randn(&[3, 2, 2, 2], 1.0, &mut r);
        let t = to_tokens(&x).unwrap();
        assert_eq!(t.shape(), &[8, 3]);
        let back = from_tokens(&t, (2, 2, 2)).unwrap();
        assert_eq!(back.data(), x.data());
    }

    #[test]
    fn linear_layer_shapes_and_grads() {
        let mut r = rng(2);
        let mut store = ParamStore::new();
        let lin = Linear::new(&mut store, "lin", 4, 3, &mut r);
        let x = Tensor::randn(&[5, 4], 1.0, &mut r);
        let y = lin.forward(&store, &x).unwrap();
        assert_eq!(y.shape(), &[5, 3]);

        let f = |t: &Tensor| {
            let y = lin.forward(&store, t)?;
            y.mul(&y)?.sum_all()
        };
        assert!(grad_check(f, &x, 1e-5).unwrap() < 1e-6);
    }

    #[test]
    fn gqa_single_kv_token_ignores_query_content() {
        let mut r = rng(3);
        let mut store = ParamStore::new();
        let attn = GqaAttention::new(&mut store, "a", 8, 2, 1, &mut r).unwrap();
        let kv = Tensor::randn(&[1, 8], 1.0, &mut r);
        let q1 = Tensor::randn(&[3, 8], 1.0, &mut r);
        let q2 = Tensor::randn(&[3, 8], 1.0, &mut r);
        let y1 = attn.forward(&store, &q1, &kv, None, None, "t", None).unwrap();
        let y2 = attn.forward(&store, &q2, &kv, None, None, "t", None).unwrap();
        for (a, b) in y1.data().iter().zip(y2.data()) {
            assert!((a - b).abs() < 1e-12);
        }
        // All rows equal the projected single value vector.
        for row in 1..3 {
            for c in 0..8 {
                assert!((y1.data()[c] - y1.data()[row * 8 + c]).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn gqa_grads_through_everything() {
        let mut r = rng(4);
        let mut store = ParamStore::new();
        let attn = GqaAttention::new(&mut store, "a", 8, 4, 2, &mut r).unwrap();
        let q = Tensor::randn(&[3, 8], 1.0, &mut r);
        let kv = Tensor::randn(&[5, 8], 1.0, &mut r);
        let pos: Vec<usize> = (0..5).collect();

        let f = |t: &Tensor| {
            let y = attn.forward(&store, t, &kv, Some(&[0, 0, 0]), Some(&pos), "t", None)?;
            y.mul(&y)?.sum_all()
        };
        assert!(grad_check(f, &q, 1e-5).unwrap() < 1e-4);

        let g = |t: &Tensor| {
            let y = attn.forward(&store, &q, t, Some(&[0, 0, 0]), Some(&pos), "t", None)?;
            y.mul(&y)?.sum_all()
        };
        assert!(grad_check(g, &kv, 1e-5).unwrap() < 1e-4);

        // Through a projection weight: swap the tensor in a cloned store.
        let wq = attn.wq.weight;
        let base = store.get(wq).detach();
        let h = |t: &Tensor| {
            let mut s2 = store.clone();
            s2.set(wq, t.clone());
            let y = attn.forward(&s2, &q, &kv, None, Some(&pos), "t", None)?;
            y.mul(&y)?.sum_all()
        };
        assert!(grad_check(h, &base, 1e-5).unwrap() < 1e-4);
    }

    #[test]
    fn attention_rows_sum_to_one_via_trace() {
        let mut r = rng(5);
        let mut store = ParamStore::new();
        let attn = GqaAttention::new(&mut store, "a", 12, 3, 1, &mut r).unwrap();
        let q = Tensor::randn(&[4, 12], 1.0, &mut r);
        let kv = Tensor::randn(&[7, 12], 1.0, &mut r);
        let mut trace = AttnTrace::default();
        attn.forward(&store, &q, &kv, None, None, "probe", Some(&mut trace))
            .unwrap();
        assert_eq!(trace.maps.len(), 3);
        for map in &trace.maps {
            assert_eq!((map.rows, map.cols), (4, 7));
            for row in map.weights.chunks(map.cols) {
                let s: f64 = row.iter().sum();
                assert!((s - 1.0).abs() < 1e-6);
            }
        }
    }

    #[test]
    fn param_store_freeze_lookup_by_name() {
        let mut r = rng(6);
        let mut store = ParamStore::new();
        let _ = Linear::new(&mut store, "text_proj", 4, 8, &mut r);
        let _ = Linear::new(&mut store, "other", 4, 8, &mut r);
        let frozen: Vec<&str> = store
            .iter()
            .map(|(n, _)| n)
            .filter(|n| n.starts_with("text_proj"))
            .collect();
        assert_eq!(frozen, vec!["text_proj.weight", "text_proj.bias"]);
    }
}
