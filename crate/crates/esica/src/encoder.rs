//! Volumetric image encoder built from decomposed-convolution blocks.
//!
//! Each block runs three depthwise 1-D branches (along h, w, d) plus a
//! depthwise 3x3x3 local branch, sums them, applies the activation, mixes
//! channels with a pointwise convolution, and adds the residual. The stem
//! keeps full resolution; later stages downsample by 2; the coarsest stage
//! is followed by one standard self-attention + MLP transformer layer over
//! flattened voxels.

use rand_chacha::ChaCha20Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{
    from_tokens, to_tokens, Activation, AttnTrace, Conv3dLayer, GqaAttention, Mlp, NormLayer,
    ParamId, ParamStore,
};
use crate::tensor::Axis;
use crate::tensor::Tensor;

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EncoderConfig {
    pub stem_channels: usize,
    pub stage_channels: Vec<usize>,
    pub stage_depths: Vec<usize>,
    /// Axial kernel extents (k_h, k_w, k_d); odd, at least 3.
    pub axial_kernels: (usize, usize, usize),
    pub activation: Activation,
    /// Heads of the trailing transformer layer.
    pub attn_heads: usize,
    /// Include the depthwise 3x3x3 local branch in every block.
    pub local_branch: bool,
    /// Layer norms after each residual; disabled only by tests that need
    /// exact identities.
    pub norms: bool,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        EncoderConfig {
            stem_channels: 32,
            stage_channels: vec![32, 64, 128],
            stage_depths: vec![1, 1, 1],
            axial_kernels: (7, 7, 7),
            activation: Activation::Gelu,
            attn_heads: 2,
            local_branch: true,
            norms: true,
        }
    }
}

impl EncoderConfig {
    pub fn validate(&self) -> Result<()> {
        if self.stage_channels.len() != self.stage_depths.len() || self.stage_channels.len() < 2 {
            return Err(Error::config(format!(
                "encoder: need matching stage_channels/stage_depths of length >= 2, got {} and {}",
                self.stage_channels.len(),
                self.stage_depths.len()
            )));
        }
        let (kh, kw, kd) = self.axial_kernels;
        for k in [kh, kw, kd] {
            if k % 2 == 0 || k < 3 {
                return Err(Error::config(format!(
                    "encoder: axial kernels must be odd and >= 3, got {:?}",
                    self.axial_kernels
                )));
            }
        }
        if self.stem_channels == 0 || self.stage_channels.iter().any(|&c| c == 0) {
            return Err(Error::config("encoder: channel counts must be positive"));
        }
        let c_last = *self.stage_channels.last().unwrap();
        if self.attn_heads == 0 || c_last % self.attn_heads != 0 {
            return Err(Error::config(format!(
                "encoder: attn_heads {} must divide the final stage width {c_last}",
                self.attn_heads
            )));
        }
        Ok(())
    }

    pub fn levels(&self) -> usize {
        self.stage_channels.len()
    }

    /// 2^(levels-1); input extents must be divisible by this.
    pub fn downsample_factor(&self) -> usize {
        1 << (self.levels() - 1)
    }
}

/// Multi-resolution encoder outputs, finest first. Level 0 has the input
/// spatial extent; each later level halves the extents.
#[derive(Debug, Clone)]
pub struct FeaturePyramid {
    pub levels: Vec<Tensor>,
}

impl FeaturePyramid {
    pub fn coarsest(&self) -> &Tensor {
        self.levels.last().expect("pyramid has at least two levels")
    }

    pub fn grid(&self) -> (usize, usize, usize) {
        let s = self.coarsest().shape();
        (s[1], s[2], s[3])
    }
}

/// One decomposed-convolution block; spatial extents are preserved.
#[derive(Debug, Clone)]
pub struct DecomposedBlock {
    dw_h: ParamId,
    dw_h_bias: ParamId,
    dw_w: ParamId,
    dw_w_bias: ParamId,
    dw_d: ParamId,
    dw_d_bias: ParamId,
    local: Option<(ParamId, ParamId)>,
    pointwise: Conv3dLayer,
    norm: Option<NormLayer>,
    activation: Activation,
    pub channels: usize,
}

impl DecomposedBlock {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        channels: usize,
        axial_kernels: (usize, usize, usize),
        activation: Activation,
        local_branch: bool,
        norms: bool,
        rng: &mut ChaCha20Rng,
    ) -> Self {
        let (kh, kw, kd) = axial_kernels;
        let dw = |store: &mut ParamStore, axis: &str, k: usize, rng: &mut ChaCha20Rng| {
            let w = store.add(
                format!("{name}.dw_{axis}.weight"),
                Tensor::randn(&[channels, k], (1.0 / k as f64).sqrt(), rng),
            );
            let b = store.add(format!("{name}.dw_{axis}.bias"), Tensor::zeros(&[channels]));
            (w, b)
        };
        let (dw_h, dw_h_bias) = dw(store, "h", kh, rng);
        let (dw_w, dw_w_bias) = dw(store, "w", kw, rng);
        let (dw_d, dw_d_bias) = dw(store, "d", kd, rng);
        let local = local_branch.then(|| {
            let w = store.add(
                format!("{name}.local.weight"),
                Tensor::randn(&[channels, 3, 3, 3], (1.0 / 27.0f64).sqrt(), rng),
            );
            let b = store.add(format!("{name}.local.bias"), Tensor::zeros(&[channels]));
            (w, b)
        });
        let pointwise = Conv3dLayer::new(
            store,
            &format!("{name}.pointwise"),
            channels,
            channels,
            (1, 1, 1),
            1,
            rng,
        );
        let norm = norms.then(|| NormLayer::new(store, &format!("{name}.norm"), channels));
        DecomposedBlock {
            dw_h,
            dw_h_bias,
            dw_w,
            dw_w_bias,
            dw_d,
            dw_d_bias,
            local,
            pointwise,
            norm,
            activation,
            channels,
        }
    }

    /// Branch sum -> activation -> pointwise mix -> residual -> norm.
    pub fn forward(&self, store: &ParamStore, x: &Tensor) -> Result<Tensor> {
        if x.shape()[0] != self.channels {
            return Err(Error::contract(format!(
                "decomposed block: {} channels expected, got {}",
                self.channels,
                x.shape()[0]
            )));
        }
        let h = x.depthwise_axial_conv3d(Axis::H, store.get(self.dw_h), Some(store.get(self.dw_h_bias)))?;
        let w = x.depthwise_axial_conv3d(Axis::W, store.get(self.dw_w), Some(store.get(self.dw_w_bias)))?;
        let d = x.depthwise_axial_conv3d(Axis::D, store.get(self.dw_d), Some(store.get(self.dw_d_bias)))?;
        let mut sum = h.add(&w)?.add(&d)?;
        if let Some((lw, lb)) = &self.local {
            let local = x.depthwise_full_conv3d(store.get(*lw), Some(store.get(*lb)))?;
            sum = sum.add(&local)?;
        }
        let mixed = self.pointwise.forward(store, &self.activation.apply(&sum)?)?;
        let out = x.add(&mixed)?;
        match &self.norm {
            Some(n) => n.channels(store, &out),
            None => Ok(out),
        }
    }
}

/// Trailing transformer layer: self-attention + MLP over flattened voxels.
#[derive(Debug, Clone)]
struct TransformerLayer {
    attn: GqaAttention,
    norm1: Option<NormLayer>,
    mlp: Mlp,
    norm2: Option<NormLayer>,
}

impl TransformerLayer {
    fn forward(
        &self,
        store: &ParamStore,
        x: &Tensor,
        trace: Option<&mut AttnTrace>,
    ) -> Result<Tensor> {
        let grid = (x.shape()[1], x.shape()[2], x.shape()[3]);
        let tokens = to_tokens(x)?;
        let attended = self
            .attn
            .forward(store, &tokens, &tokens, None, None, "encoder.attn", trace)?;
        let mut t = tokens.add(&attended)?;
        if let Some(n) = &self.norm1 {
            t = n.rows(store, &t)?;
        }
        let mut t2 = t.add(&self.mlp.forward(store, &t)?)?;
        if let Some(n) = &self.norm2 {
            t2 = n.rows(store, &t2)?;
        }
        from_tokens(&t2, grid)
    }
}

#[derive(Clone)]
struct Stage {
    downsample: Option<Conv3dLayer>,
    proj: Option<Conv3dLayer>,
    blocks: Vec<DecomposedBlock>,
}

/// The full image encoder.
#[derive(Clone)]
pub struct Encoder {
    input_proj: Conv3dLayer,
    stem_block: DecomposedBlock,
    stages: Vec<Stage>,
    transformer: TransformerLayer,
    pub cfg: EncoderConfig,
}

impl Encoder {
    pub fn new(store: &mut ParamStore, cfg: &EncoderConfig, rng: &mut ChaCha20Rng) -> Result<Self> {
        cfg.validate()?;
        let input_proj = Conv3dLayer::new(
            store,
            "encoder.input_proj",
            1,
            cfg.stem_channels,
            (3, 3, 3),
            1,
            rng,
        );
        let stem_block = DecomposedBlock::new(
            store,
            "encoder.stem",
            cfg.stem_channels,
            cfg.axial_kernels,
            cfg.activation,
            cfg.local_branch,
            cfg.norms,
            rng,
        );
        let mut stages = Vec::with_capacity(cfg.levels());
        let mut prev = cfg.stem_channels;
        for (level, (&channels, &depth)) in cfg
            .stage_channels
            .iter()
            .zip(&cfg.stage_depths)
            .enumerate()
        {
            // Stage 0 stays at full resolution (channel projection only,
            // when widths differ); later stages downsample by 2.
            let (downsample, proj) = if level == 0 {
                let proj = (prev != channels).then(|| {
                    Conv3dLayer::new(
                        store,
                        &format!("encoder.stage{level}.proj"),
                        prev,
                        channels,
                        (1, 1, 1),
                        1,
                        rng,
                    )
                });
                (None, proj)
            } else {
                let down = Conv3dLayer::new(
                    store,
                    &format!("encoder.stage{level}.down"),
                    prev,
                    channels,
                    (3, 3, 3),
                    2,
                    rng,
                );
                (Some(down), None)
            };
            let blocks = (0..depth)
                .map(|b| {
                    DecomposedBlock::new(
                        store,
                        &format!("encoder.stage{level}.block{b}"),
                        channels,
                        cfg.axial_kernels,
                        cfg.activation,
                        cfg.local_branch,
                        cfg.norms,
                        rng,
                    )
                })
                .collect();
            stages.push(Stage {
                downsample,
                proj,
                blocks,
            });
            prev = channels;
        }
        let c_last = *cfg.stage_channels.last().unwrap();
        let transformer = TransformerLayer {
            attn: GqaAttention::new(
                store,
                "encoder.attn",
                c_last,
                cfg.attn_heads,
                cfg.attn_heads,
                rng,
            )?,
            norm1: cfg.norms.then(|| NormLayer::new(store, "encoder.attn_norm1", c_last)),
            mlp: Mlp::new(
                store,
                "encoder.attn_mlp",
                c_last,
                2 * c_last,
                cfg.activation,
                rng,
            ),
            norm2: cfg.norms.then(|| NormLayer::new(store, "encoder.attn_norm2", c_last)),
        };
        Ok(Encoder {
            input_proj,
            stem_block,
            stages,
            transformer,
            cfg: cfg.clone(),
        })
    }

    /// Encode a [1,H,W,D] volume into the feature pyramid.
    pub fn encode(&self, store: &ParamStore, volume: &Tensor) -> Result<FeaturePyramid> {
        self.encode_traced(store, volume, None)
    }

    pub fn encode_traced(
        &self,
        store: &ParamStore,
        volume: &Tensor,
        mut trace: Option<&mut AttnTrace>,
    ) -> Result<FeaturePyramid> {
        let s = volume.shape();
        if s.len() != 4 || s[0] != 1 {
            return Err(Error::contract(format!(
                "encode: expected [1,H,W,D] volume, got {s:?}"
            )));
        }
        let factor = self.cfg.downsample_factor();
        for extent in [s[1], s[2], s[3]] {
            if extent % factor != 0 || extent == 0 {
                return Err(Error::config(format!(
                    "encode: extent {extent} not divisible by the pyramid factor {factor}"
                )));
            }
        }
        let mut x = self.stem_block.forward(store, &self.input_proj.forward(store, volume)?)?;
        let mut levels = Vec::with_capacity(self.stages.len());
        for (i, stage) in self.stages.iter().enumerate() {
            if let Some(proj) = &stage.proj {
                x = proj.forward(store, &x)?;
            }
            if let Some(down) = &stage.downsample {
                x = down.forward(store, &x)?;
            }
            for block in &stage.blocks {
                x = block.forward(store, &x)?;
            }
            if i + 1 == self.stages.len() {
                x = self.transformer.forward(store, &x, trace.take())?;
            }
            levels.push(x.clone());
        }
        Ok(FeaturePyramid { levels })
    }
}
