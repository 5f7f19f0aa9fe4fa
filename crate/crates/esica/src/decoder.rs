//! Upsampling decoder with decomposed-convolution adapters on the skip
//! connections, and the similarity-matrix mask head.
//!
//! Fused image tokens are reshaped onto the coarsest grid, merged with the
//! coarsest adapter output, then repeatedly upsampled (trilinear x2),
//! refined with a 3x3x3 convolution, concatenated with the next finer
//! adapter output, and mixed by a pointwise fusion convolution. The result
//! is a dense feature embedding; mask logits come from a dot product with
//! an MLP-projected text vector (or, under the text-independent ablation,
//! from a pointwise convolution head).

use rand_chacha::ChaCha20Rng;
use serde::{Deserialize, Serialize};

use crate::encoder::{DecomposedBlock, FeaturePyramid};
use crate::error::{Error, Result};
use crate::nn::{from_tokens, Activation, Conv3dLayer, Linear, ParamStore};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DecoderConfig {
    /// Unified adapter/decoder width.
    pub hidden_dim: usize,
    /// Axial kernel per pyramid level, finest first; odd, non-increasing.
    pub adapter_kernels: Vec<usize>,
}

impl Default for DecoderConfig {
    fn default() -> Self {
        DecoderConfig {
            hidden_dim: 32,
            adapter_kernels: vec![7, 5, 3],
        }
    }
}

impl DecoderConfig {
    pub fn validate(&self, pyramid_levels: usize) -> Result<()> {
        if self.hidden_dim == 0 {
            return Err(Error::config("decoder: hidden_dim must be positive"));
        }
        if self.adapter_kernels.len() != pyramid_levels {
            return Err(Error::config(format!(
                "decoder: {} adapter kernels for {} pyramid levels",
                self.adapter_kernels.len(),
                pyramid_levels
            )));
        }
        for pair in self.adapter_kernels.windows(2) {
            if pair[0] < pair[1] {
                return Err(Error::config(
                    "decoder: adapter kernels must be non-increasing from fine to coarse",
                ));
            }
        }
        for &k in &self.adapter_kernels {
            if k % 2 == 0 || k < 3 {
                return Err(Error::config(format!(
                    "decoder: adapter kernel {k} mustind odd and >= 3"
                )));
            }
        }
        Ok(())
    }
}

/// Skip-connection adapter: pointwise projection to the unified width, then
/// one decomposed block at the level's axial kernel.
#[derive(Clone)]
pub struct Adapter {
    proj: Conv3dLayer,
    block: DecomposedBlock,
}

impl Adapter {
    fn new(
        store: &mut ParamStore,
        name: &str,
        in_channels: usize,
        hidden: usize,
        kernel: usize,
        rng: &mut ChaCha20Rng,
    ) -> Self {
        Adapter {
            proj: Conv3dLayer::new(store, &format!("{name}.proj"), in_channels, hidden, (1, 1, 1), 1, rng),
            block: DecomposedBlock::new(
                store,
                &format!("{name}.block"),
                hidden,
                (kernel, kernel, kernel),
                Activation::Gelu,
                true,
                true,
                rng,
            ),
        }
    }

    pub fn forward(&self, store: &ParamStore, level_features: &Tensor) -> Result<Tensor> {
        let projected = self.proj.forward(store, level_features)?;
        self.block.forward(store, &projected)
    }
}

#[derive(Clone)]
struct UpStage {
    refine: Conv3dLayer,
    fuse: Conv3dLayer,
}

/// Which mask head produces the logits.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MaskHeadKind {
    /// Dot product between the MLP-projected text vector and each voxel
    /// feature (text-conditioned).
    Similarity,
    /// Pointwise convolution over decoder features; sees no text at all.
    ConvHead,
}

/// The decoder.
#[derive(Clone)]
pub struct Decoder {
    pub cfg: DecoderConfig,
    adapters: Vec<Adapter>,
    input_proj: Conv3dLayer,
    coarse_fuse: Conv3dLayer,
    stages: Vec<UpStage>,
    mask_mlp1: Linear,
    mask_mlp2: Linear,
    conv_head: Conv3dLayer,
    d_model: usize,
}

impl Decoder {
    pub fn new(
        store: &mut ParamStore,
        cfg: &DecoderConfig,
        level_channels: &[usize],
        d_model: usize,
        rng: &mut ChaCha20Rng,
    ) -> Result<Self> {
        cfg.validate(level_channels.len())?;
        let h = cfg.hidden_dim;
        let adapters = level_channels
            .iter()
            .enumerate()
            .map(|(level, &c)| {
                Adapter::new(
                    store,
                    &format!("decoder.adapter{level}"),
                    c,
                    h,
                    cfg.adapter_kernels[level],
                    rng,
                )
            })
            .collect();
        let input_proj =
            Conv3dLayer::new(store, "decoder.input_proj", d_model, h, (1, 1, 1), 1, rng);
        let coarse_fuse =
            Conv3dLayer::new(store, "decoder.coarse_fuse", 2 * h, h, (1, 1, 1), 1, rng);
        let stages = (0..level_channels.len() - 1)
            .map(|level| UpStage {
                refine: Conv3dLayer::new(
                    store,
                    &format!("decoder.up{level}.refine"),
                    h,
                    h,
                    (3, 3, 3),
                    1,
                    rng,
                ),
                fuse: Conv3dLayer::new(
                    store,
                    &format!("decoder.up{level}.fuse"),
                    2 * h,
                    h,
                    (1, 1, 1),
                    1,
                    rng,
                ),
            })
            .collect();
        let mask_mlp1 = Linear::new(store, "decoder.mask_mlp1", d_model, h, rng);
        let mask_mlp2 = Linear::new(store, "decoder.mask_mlp2", h, h, rng);
        let conv_head = Conv3dLayer::new(store, "decoder.conv_head", h, 1, (1, 1, 1), 1, rng);
        Ok(Decoder {
            cfg: cfg.clone(),
            adapters,
            input_proj,
            coarse_fuse,
            stages,
            mask_mlp1,
            mask_mlp2,
            conv_head,
            d_model,
        })
    }

    /// Apply the adapter of one pyramid level.
    pub fn adapter_apply(
        &self,
        store: &ParamStore,
        level_features: &Tensor,
        level_index: usize,
    ) -> Result<Tensor> {
        let adapter = self.adapters.get(level_index).ok_or_else(|| {
            Error::contract(format!("adapter_apply: level {level_index} out of range"))
        })?;
        adapter.forward(store, level_features)
    }

    /// Decode fused image tokens against the pyramid into a dense
    /// [hidden_dim, H, W, D] embedding at full patch resolution.
    pub fn decode(
        &self,
        store: &ParamStore,
        pyramid: &FeaturePyramid,
        fused_image_tokens: &Tensor,
    ) -> Result<Tensor> {
        let levels = pyramid.levels.len();
        if levels != self.adapters.len() {
            return Err(Error::contract(format!(
                "decode: pyramid has {levels} levels, decoder built for {}",
                self.adapters.len()
            )));
        }
        let grid = pyramid.grid();
        let n_tok = grid.0 * grid.1 * grid.2;
        if fused_image_tokens.shape() != [n_tok, self.d_model] {
            return Err(Error::contract(format!(
                "decode: fused tokens {:?} do not reshape to grid {grid:?}",
                fused_image_tokens.shape()
            )));
        }
        let volume = from_tokens(fused_image_tokens, grid)?;
        let mut x = self.input_proj.forward(store, &volume)?;
        let skip = self.adapter_apply(store, pyramid.coarsest(), levels - 1)?;
        x = self
            .coarse_fuse
            .forward(store, &Tensor::concat_rows(&[x, skip])?)?;
        for level in (0..levels - 1).rev() {
            let target = pyramid.levels[level].shape();
            let stage = &self.stages[level];
            x = x.trilinear_resize((target[1], target[2], target[3]))?;
            x = stage.refine.forward(store, &x)?;
            let skip = self.adapter_apply(store, &pyramid.levels[level], level)?;
            x = stage
                .fuse
                .forward(store, &Tensor::concat_rows(&[x, skip])?)?;
        }
        Ok(x)
    }

    /// Mask logits as the voxel-wise dot product between the MLP-projected
    /// text vector and the image embedding.
    pub fn similarity_mask(
        &self,
        store: &ParamStore,
        image_embedding: &Tensor,
        text_vector: &Tensor,
    ) -> Result<Tensor> {
        let s = image_embedding.shape();
        if s.len() != 4 || s[0] != self.cfg.hidden_dim {
            return Err(Error::contract(format!(
                "similarity_mask: embedding shape {s:?}"
            )));
        }
        if text_vector.numel() != self.d_model {
            return Err(Error::contract(format!(
                "similarity_mask: text vector has {} values, expected {}",
                text_vector.numel(),
                self.d_model
            )));
        }
        let row = text_vector.reshape(&[1, self.d_model])?;
        let projected = self
            .mask_mlp2
            .forward(store, &self.mask_mlp1.forward(store, &row)?.gelu()?)?;
        let spatial = s[1] * s[2] * s[3];
        let flat = image_embedding.reshape(&[self.cfg.hidden_dim, spatial])?;
        projected.matmul(&flat)?.reshape(&[1, s[1], s[2], s[3]])
    }

    /// Text-independent ablation head: pointwise convolution to one channel.
    pub fn conv_head_mask(&self, store: &ParamStore, image_embedding: &Tensor) -> Result<Tensor> {
        self.conv_head.forward(store, image_embedding)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::encoder::{Encoder, EncoderConfig};
    use crate::tensor::grad_check;
    use rand::SeedableRng;

    fn rng(seed: u64) -> ChaCha20Rng {
        ChaCha20Rng::seed_from_u64(seed)
    }

    fn tiny_setup(seed: u64) -> (ParamStore, Encoder, Decoder) {
        let mut r = rng(seed);
        let mut store = ParamStore::new();
        let enc_cfg = EncoderConfig {
            stem_channels: 2,
            stage_channels: vec![2, 4],
            stage_depths: vec![1, 1],
            axial_kernels: (3, 3, 3),
            attn_heads: 2,
            ..EncoderConfig::default()
        };
        let encoder = Encoder::new(&mut store, &enc_cfg, &mut r).unwrap();
        let dec_cfg = DecoderConfig {
            hidden_dim: 4,
            adapter_kernels: vec![3, 3],
        };
        let decoder = Decoder::new(&mut store, &dec_cfg, &[2, 4], 8, &mut r).unwrap();
        (store, encoder, decoder)
    }

    #[test]
    fn adapter_projects_every_level_to_hidden_dim() {
        let (store, encoder, decoder) = tiny_setup(1);
        let mut r = rng(2);
        let x = Tensor::randn(&[1, 4, 4, 4], 1.0, &mut r);
        let pyr = encoder.encode(&store, &x).unwrap();
        for (level, feat) in pyr.levels.iter().enumerate() {
            let out = decoder.adapter_apply(&store, feat, level).unwrap();
            assert_eq!(out.shape()[0], 4);
            assert_eq!(&out.shape()[1..], &feat.shape()[1..]);
        }
    }

    #[test]
    fn adapter_identity_configuration_passes_input_through() {
        // hidden_dim == C with an identity projection and zeroed block
        // weights (and no norm) reproduces the input exactly.
        let mut r = rng(3);
        let mut store = ParamStore::new();
        let c = 3;
        let adapter = Adapter {
            proj: Conv3dLayer::new(&mut store, "a.proj", c, c, (1, 1, 1), 1, &mut r),
            block: DecomposedBlock::new(
                &mut store,
                "a.block",
                c,
                (3, 3, 3),
                Activation::Gelu,
                true,
                false,
                &mut r,
            ),
        };
        // Identity pointwise projection.
        let mut ident = vec![0.0; c * c];
        for i in 0..c {
            ident[i * c + i] = 1.0;
        }
        store.set(
            adapter.proj.weight,
            Tensor::new(&[c, c, 1, 1, 1], ident).unwrap().as_param(),
        );
        store.set(adapter.proj.bias, Tensor::zeros(&[c]).as_param());
        // Zero the block.
        let names: Vec<String> = store
            .iter()
            .filter(|(n, _)| n.starts_with("a.block"))
            .map(|(n, _)| n.to_string())
            .collect();
        for n in names {
            let id = store.find(&n).unwrap();
            let shape = store.get(id).shape().to_vec();
            store.set(id, Tensor::zeros(&shape).as_param());
        }
        let x = Tensor::randn(&[c, 4, 4, 4], 1.0, &mut r);
        let y = adapter.forward(&store, &x).unwrap();
        assert_eq!(x.data(), y.data());
    }

    #[test]
    fn decode_restores_full_resolution() {
        let (store, encoder, decoder) = tiny_setup(4);
        let mut r = rng(5);
        let x = Tensor::randn(&[1, 8, 8, 8], 1.0, &mut r);
        let pyr = encoder.encode(&store, &x).unwrap();
        let fused = Tensor::randn(&[4 * 4 * 4, 8], 1.0, &mut r);
        let out = decoder.decode(&store, &pyr, &fused).unwrap();
        assert_eq!(out.shape(), &[4, 8, 8, 8]);
        // Deterministic across calls.
        let again = decoder.decode(&store, &pyr, &fused).unwrap();
        assert_eq!(out.data(), again.data());
    }

    #[test]
    fn zeroing_a_skip_connection_changes_the_output() {
        let (store, encoder, decoder) = tiny_setup(6);
        let mut r = rng(7);
        let x = Tensor::randn(&[1, 8, 8, 8], 1.0, &mut r);
        let pyr = encoder.encode(&store, &x).unwrap();
        let fused = Tensor::randn(&[64, 8], 1.0, &mut r);
        let base = decoder.decode(&store, &pyr, &fused).unwrap();
        let mut zeroed = pyr.clone();
        zeroed.levels[0] = Tensor::zeros(&[2, 8, 8, 8]);
        let without = decoder.decode(&store, &zeroed, &fused).unwrap();
        let max_diff = base
            .data()
            .iter()
            .zip(without.data())
            .map(|(a, b)| (a - b).abs())
            .fold(0.0f64, f64::max);
        assert!(max_diff > 0.0);
    }

    #[test]
    fn similarity_mask_orthogonal_text_gives_zero_logits() {
        let (mut store, _, decoder) = tiny_setup(8);
        // Make the MLP the identity on the first hidden_dim coordinates:
        // set lin1 = [I; 0], bias 0, lin2 = I, bias 0, and feed through gelu
        // by using a positive scale... simpler: drive the MLP directly and
        // plant orthogonality on its *output* via the conv-free dot product.
        // Easier: set both layers so projected == first 4 coords of text.
        let h = 4usize;
        let d = 8usize;
        let mut w1 = vec![0.0; d * h];
        for i in 0..h {
            w1[i * h + i] = 1.0; // picks text[i]
        }
        store.set(
            decoder.mask_mlp1.weight,
            Tensor::new(&[d, h], w1).unwrap().as_param(),
        );
        store.set(decoder.mask_mlp1.bias, Tensor::zeros(&[h]).as_param());
        let mut w2 = vec![0.0; h * h];
        for i in 0..h {
            w2[i * h + i] = 1.0;
        }
        store.set(
            decoder.mask_mlp2.weight,
            Tensor::new(&[h, h], w2).unwrap().as_param(),
        );
        store.set(decoder.mask_mlp2.bias, Tensor::zeros(&[h]).as_param());

        // gelu(x) for x>=0 scales positively; use a one-hot positive text so
        // projected = [gelu(2), 0, 0, 0] along channel 0.
        let mut text = vec![0.0; d];
        text[0] = 2.0;
        let text = Tensor::new(&[d], text).unwrap();
        // Image embedding orthogonal to channel 0 everywhere.
        let mut emb = vec![0.0; h * 27];
        for v in emb.iter_mut().skip(27) {
            *v = 0.7;
        }
        let emb = Tensor::new(&[h, 3, 3, 3], emb).unwrap();
        let logits = decoder.similarity_mask(&store, &emb, &text).unwrap();
        assert!(logits.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn similarity_mask_constant_features_give_constant_logits() {
        let (store, _, decoder) = tiny_setup(9);
        let mut r = rng(10);
        let text = Tensor::randn(&[8], 1.0, &mut r);
        let emb = Tensor::full(&[4, 3, 3, 3], 0.4);
        let logits = decoder.similarity_mask(&store, &emb, &text).unwrap();
        let first = logits.data()[0];
        assert!(logits.data().iter().all(|&v| (v - first).abs() < 1e-12));
    }

    #[test]
    fn similarity_mask_is_linear_in_the_image_embedding() {
        let (store, _, decoder) = tiny_setup(11);
        let mut r = rng(12);
        let text = Tensor::randn(&[8], 1.0, &mut r);
        let emb = Tensor::randn(&[4, 3, 3, 3], 1.0, &mut r);
        let a = 2.75;
        let scaled = emb.scale(a).unwrap();
        let base = decoder.similarity_mask(&store, &emb, &text).unwrap();
        let big = decoder.similarity_mask(&store, &scaled, &text).unwrap();
        for (x, y) in base.data().iter().zip(big.data()) {
            assert!((a * x - y).abs() < 1e-6 * (1.0 + y.abs()));
        }
    }

    #[test]
    fn similarity_mask_argmax_finds_a_planted_feature() {
        // Plant the projected text vector at one voxel and random vectors
        // orthogonalized against it elsewhere; the argmax of the logits must
        // be the planted voxel.
        let (store, _, decoder) = tiny_setup(13);
        let mut r = rng(14);
        let text = Tensor::randn(&[8], 1.0, &mut r);
        // Compute the projected vector by probing with a basis... the MLP is
        // fixed; just read it off through the public head on basis volumes.
        let h = 4;
        let mut projected = vec![0.0; h];
        for c in 0..h {
            let mut e = vec![0.0; h * 8];
            e[c * 8] = 1.0; // voxel 0 of channel c
            let vol = Tensor::new(&[h, 2, 2, 2], e).unwrap();
            projected[c] = decoder.similarity_mask(&store, &vol, &text).unwrap().data()[0];
        }
        let norm2: f64 = projected.iter().map(|v| v * v).sum();
        assert!(norm2 > 1e-12);

        let n = 27;
        let planted = 13usize;
        let mut emb = vec![0.0; h * n];
        for vox in 0..n {
            if vox == planted {
                for c in 0..h {
                    emb[c * n + vox] = projected[c];
                }
            } else {
                // Random vector Gram-Schmidt-orthogonalized against the
                // projected text direction, then shrunk.
                let raw: Vec<f64> = (0..h).map(|_| {
                    use rand::Rng;
                    r.gen::<f64>() * 2.0 - 1.0
                }).collect();
                let dot: f64 = raw.iter().zip(&projected).map(|(a, b)| a * b).sum();
                for c in 0..h {
                    emb[c * n + vox] = 0.5 * (raw[c] - dot / norm2 * projected[c]);
                }
            }
        }
        let vol = Tensor::new(&[h, 3, 3, 3], emb).unwrap();
        let logits = decoder.similarity_mask(&store, &vol, &text).unwrap();
        let argmax = logits
            .data()
            .iter()
            .enumerate()
            .max_by(|a, b| a.1.partial_cmp(b.1).unwrap())
            .unwrap()
            .0;
        assert_eq!(argmax, planted);
    }

    #[test]
    fn prompt_reaches_the_mask_only_through_the_text_vector() {
        // With a fixed image embedding, swapping prompts changes the
        // similarity output but never the conv-head output.
        let (store, _, decoder) = tiny_setup(15);
        let mut r = rng(16);
        let emb = Tensor::randn(&[4, 3, 3, 3], 1.0, &mut r);
        let t1 = Tensor::randn(&[8], 1.0, &mut r);
        let t2 = Tensor::randn(&[8], 1.0, &mut r);
        let s1 = decoder.similarity_mask(&store, &emb, &t1).unwrap();
        let s2 = decoder.similarity_mask(&store, &emb, &t2).unwrap();
        assert_ne!(s1.data(), s2.data());
        let c1 = decoder.conv_head_mask(&store, &emb).unwrap();
        let c2 = decoder.conv_head_mask(&store, &emb).unwrap();
        assert_eq!(c1.data(), c2.data());
    }

    #[test]
    fn decode_and_similarity_gradcheck() {
        let (store, encoder, decoder) = tiny_setup(17);
        let mut r = rng(18);
        let x = Tensor::randn(&[1, 4, 4, 4], 0.5, &mut r);
        let pyr = encoder.encode(&store, &x).unwrap();
        let text = Tensor::randn(&[8], 0.5, &mut r);
        let fused0 = Tensor::randn(&[8, 8], 0.5, &mut r);
        let f = |t: &Tensor| {
            let emb = decoder.decode(&store, &pyr, t)?;
            let logits = decoder.similarity_mask(&store, &emb, &text)?;
            logits.mul(&logits)?.sum_all()
        };
        let err = grad_check(f, &fused0, 1e-5).unwrap();
        assert!(err < 1e-4, "fused grad error {err}");

        let g = |t: &Tensor| {
            let emb = decoder.decode(&store, &pyr, &fused0)?;
            let logits = decoder.similarity_mask(&store, &emb, t)?;
            logits.mul(&logits)?.sum_all()
        };
        let err = grad_check(g, &text, 1e-5).unwrap();
        assert!(err < 1e-4, "text grad error {err}");
    }
}
