//! Full model assembly and the iterative-refinement forward pass.

use rand::SeedableRng;
use rand_chacha::ChaCha20Rng;
use serde::{Deserialize, Serialize};

use crate::decoder::{Decoder, DecoderConfig, MaskHeadKind};
use crate::encoder::{Encoder, EncoderConfig, FeaturePyramid};
use crate::error::{Error, Result};
use crate::fusion::{FusionConfig, FusionModule};
use crate::nn::{to_tokens, AttnTrace, Linear, ParamId, ParamStore};
use crate::prompt::PromptEncoder;
use crate::tensor::Tensor;
use crate::text::PromptEmbedding;

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    pub encoder: EncoderConfig,
    pub fusion: FusionConfig,
    pub decoder: DecoderConfig,
    pub d_text: usize,
    pub mask_head: MaskHeadKind,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            encoder: EncoderConfig::default(),
            fusion: FusionConfig::default(),
            decoder: DecoderConfig::default(),
            d_text: 64,
            mask_head: MaskHeadKind::Similarity,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        self.encoder.validate()?;
        self.fusion.validate()?;
        self.decoder.validate(self.encoder.levels())?;
        if self.d_text == 0 {
            return Err(Error::config("model: d_text must be positive"));
        }
        Ok(())
    }

    /// A small configuration that trains in seconds; used by examples and
    /// the verification suites.
    pub fn toy() -> Self {
        ModelConfig {
            encoder: EncoderConfig {
                stem_channels: 4,
                stage_channels: vec![4, 8, 16, 32],
                stage_depths: vec![1, 1, 1, 1],
                axial_kernels: (5, 5, 5),
                attn_heads: 2,
                ..EncoderConfig::default()
            },
            fusion: FusionConfig {
                d_model: 32,
                n_layers: 2,
                query_heads: 4,
                kv_heads: 2,
                n_mask_tokens: 1,
                mlp_ratio: 2,
            },
            decoder: DecoderConfig {
                hidden_dim: 6,
                adapter_kernels: vec![5, 3, 3, 3],
            },
            d_text: 32,
            mask_head: MaskHeadKind::Similarity,
        }
    }

    /// A minimal configuration for gradient checks.
    pub fn micro() -> Self {
        ModelConfig {
            encoder: EncoderConfig {
                stem_channels: 2,
                stage_channels: vec![2, 4],
                stage_depths: vec![1, 1],
                axial_kernels: (3, 3, 3),
                attn_heads: 2,
                ..EncoderConfig::default()
            },
            fusion: FusionConfig {
                d_model: 8,
                n_layers: 1,
                query_heads: 2,
                kv_heads: 1,
                n_mask_tokens: 1,
                mlp_ratio: 2,
            },
            decoder: DecoderConfig {
                hidden_dim: 4,
                adapter_kernels: vec![3, 3],
            },
            d_text: 16,
            mask_head: MaskHeadKind::Similarity,
        }
    }
}

/// Logits and mask tokens from every refinement pass.
pub struct RefineOutput {
    /// [1,H,W,D] logits per pass, first to last.
    pub per_pass: Vec<Tensor>,
    /// Fusion mask token per pass.
    pub mask_tokens: Vec<Tensor>,
}

impl RefineOutput {
    pub fn final_logits(&self) -> &Tensor {
        self.per_pass.last().expect("at least one pass")
    }
}

/// Encoder, prompt encoder, fusion transformer, and decoder over one
/// parameter store.
#[derive(Clone)]
pub struct Model {
    pub store: ParamStore,
    pub encoder: Encoder,
    pub prompt: PromptEncoder,
    pub fusion: FusionModule,
    pub decoder: Decoder,
    image_proj: Linear,
    /// Stands in for the projected text token under the text-independent
    /// ablation head.
    static_token: ParamId,
    pub cfg: ModelConfig,
}

impl Model {
    pub fn new(cfg: &ModelConfig, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let mut rng = ChaCha20Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let encoder = Encoder::new(&mut store, &cfg.encoder, &mut rng)?;
        let prompt = PromptEncoder::new(
            &mut store,
            cfg.d_text,
            cfg.fusion.d_model,
            cfg.encoder.levels(),
            &mut rng,
        )?;
        let fusion = FusionModule::new(&mut store, &cfg.fusion, &mut rng)?;
        let c_last = *cfg.encoder.stage_channels.last().unwrap();
        let image_proj = Linear::new(&mut store, "image_proj", c_last, cfg.fusion.d_model, &mut rng);
        let decoder = Decoder::new(
            &mut store,
            &cfg.decoder,
            &cfg.encoder.stage_channels,
            cfg.fusion.d_model,
            &mut rng,
        )?;
        let static_token = store.add(
            "static_token",
            Tensor::randn(&[cfg.fusion.d_model], 0.02, &mut rng),
        );
        Ok(Model {
            store,
            encoder,
            prompt,
            fusion,
            decoder,
            image_proj,
            static_token,
            cfg: cfg.clone(),
        })
    }

    /// The token that conditions the mask: the projected prompt embedding,
    /// or a learned constant under the text-independent ablation.
    pub fn text_token(&self, text: &PromptEmbedding) -> Result<Tensor> {
        match self.cfg.mask_head {
            MaskHeadKind::Similarity => self.prompt.project_text(&self.store, text),
            MaskHeadKind::ConvHead => self
                .store
                .get(self.static_token)
                .reshape(&[1, self.cfg.fusion.d_model]),
        }
    }

    pub fn forward_refine(
        &self,
        patch: &Tensor,
        text: &PromptEmbedding,
        n_passes: usize,
    ) -> Result<RefineOutput> {
        self.forward_refine_traced(patch, text, n_passes, None)
    }

    /// Run `n_passes` through the model; pass 1 starts from the learnable
    /// dense template, later passes feed back the previous logits and mask
    /// token. The encoder runs once; both passes share its pyramid.
    pub fn forward_refine_traced(
        &self,
        patch: &Tensor,
        text: &PromptEmbedding,
        n_passes: usize,
        mut trace: Option<&mut AttnTrace>,
    ) -> Result<RefineOutput> {
        if n_passes == 0 {
            return Err(Error::contract("forward_refine: n_passes must be >= 1"));
        }
        let store = &self.store;
        let pyramid = self
            .encoder
            .encode_traced(store, patch, trace.as_deref_mut())?;
        let grid = pyramid.grid();
        let image_tokens = self
            .image_proj
            .forward(store, &to_tokens(pyramid.coarsest())?)?;
        let text_token = self.text_token(text)?;

        let mut per_pass: Vec<Tensor> = Vec::with_capacity(n_passes);
        let mut mask_tokens: Vec<Tensor> = Vec::with_capacity(n_passes);
        for pass in 1..=n_passes {
            let state = if pass == 1 {
                self.prompt
                    .build_initial_from_token(store, &text_token, grid)?
            } else {
                self.prompt.build_refined_from_token(
                    store,
                    &text_token,
                    per_pass.last().unwrap(),
                    mask_tokens.last().unwrap(),
                    pass,
                )?
            };
            let dense_tokens = to_tokens(&state.dense)?;
            let tokens =
                self.fusion
                    .build_tokens(store, &state.sparse, &image_tokens, &dense_tokens, grid)?;
            let fused = self.fusion.fuse(store, tokens, trace.as_deref_mut())?;
            let embedding = self.decoder.decode(store, &pyramid, &fused.image_tokens)?;
            let logits = match self.cfg.mask_head {
                MaskHeadKind::Similarity => {
                    let vec = text_token.reshape(&[self.cfg.fusion.d_model])?;
                    self.decoder.similarity_mask(store, &embedding, &vec)?
                }
                MaskHeadKind::ConvHead => self.decoder.conv_head_mask(store, &embedding)?,
            };
            per_pass.push(logits);
            mask_tokens.push(fused.mask_token);
        }
        Ok(RefineOutput {
            per_pass,
            mask_tokens,
        })
    }

    /// Encode only (shared by analysis tooling).
    pub fn encode(&self, patch: &Tensor) -> Result<FeaturePyramid> {
        self.encoder.encode(&self.store, patch)
    }

    pub fn param_count(&self) -> u64 {
        self.store.param_count()
    }

    /// Replace one parameter by name (gradient checks, surgery in tests).
    pub fn set_param_by_name(&mut self, name: &str, value: Tensor) -> Result<()> {
        let id = self
            .store
            .find(name)
            .ok_or_else(|| Error::contract(format!("no parameter named {name}")))?;
        if self.store.get(id).shape() != value.shape() {
            return Err(Error::contract(format!(
                "parameter {name}: shape {:?} vs {:?}",
                self.store.get(id).shape(),
                value.shape()
            )));
        }
        self.store.set(id, value.as_param());
        Ok(())
    }

    /// Parameter names whose gradients are frozen in the balanced stage.
    pub fn is_text_side(name: &str) -> bool {
        name.starts_with("text_proj")
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::text::embed_toy;

    fn patch(seed: u64, n: usize) -> Tensor {
        let mut rng = ChaCha20Rng::seed_from_u64(seed);
        Tensor::randn(&[1, n, n, n], 0.5, &mut rng)
    }

    #[test]
    fn one_pass_produces_one_logit_volume() {
        let model = Model::new(&ModelConfig::micro(), 1).unwrap();
        let text = embed_toy("bright sphere", 16).unwrap();
        let out = model.forward_refine(&patch(2, 4), &text, 1).unwrap();
        assert_eq!(out.per_pass.len(), 1);
        assert_eq!(out.final_logits().shape(), &[1, 4, 4, 4]);
    }

    #[test]
    fn two_pass_shapes_and_finiteness_with_random_weights() {
        let model = Model::new(&ModelConfig::micro(), 3).unwrap();
        let text = embed_toy("dark cube", 16).unwrap();
        let out = model.forward_refine(&patch(4, 4), &text, 2).unwrap();
        assert_eq!(out.per_pass.len(), 2);
        for logits in &out.per_pass {
            assert_eq!(logits.shape(), &[1, 4, 4, 4]);
            assert!(logits.data().iter().all(|v| v.is_finite()));
        }
        // Pass 2 differs from pass 1 (the feedback path is live).
        assert_ne!(out.per_pass[0].data(), out.per_pass[1].data());
    }

    #[test]
    fn forward_is_deterministic() {
        let model = Model::new(&ModelConfig::micro(), 5).unwrap();
        let text = embed_toy("hollow shell", 16).unwrap();
        let p = patch(6, 4);
        let a = model.forward_refine(&p, &text, 2).unwrap();
        let b = model.forward_refine(&p, &text, 2).unwrap();
        assert_eq!(a.final_logits().data(), b.final_logits().data());
    }

    #[test]
    fn conv_head_output_ignores_the_prompt_entirely() {
        let mut cfg = ModelConfig::micro();
        cfg.mask_head = MaskHeadKind::ConvHead;
        let model = Model::new(&cfg, 7).unwrap();
        let p = patch(8, 4);
        let a = model
            .forward_refine(&p, &embed_toy("bright sphere", 16).unwrap(), 2)
            .unwrap();
        let b = model
            .forward_refine(&p, &embed_toy("dark cube", 16).unwrap(), 2)
            .unwrap();
        assert_eq!(a.final_logits().data(), b.final_logits().data());
    }

    #[test]
    fn similarity_head_output_depends_on_the_prompt() {
        let model = Model::new(&ModelConfig::micro(), 9).unwrap();
        let p = patch(10, 4);
        let a = model
            .forward_refine(&p, &embed_toy("bright sphere", 16).unwrap(), 1)
            .unwrap();
        let b = model
            .forward_refine(&p, &embed_toy("dark cube", 16).unwrap(), 1)
            .unwrap();
        assert_ne!(a.final_logits().data(), b.final_logits().data());
    }

    #[test]
    fn gradients_reach_the_encoder_through_the_feedback_path() {
        // Loss on pass-2 logits only: encoder weights still get gradients,
        // and so does the mask-feedback extractor.
        let model = Model::new(&ModelConfig::micro(), 11).unwrap();
        let text = embed_toy("bright sphere", 16).unwrap();
        let out = model.forward_refine(&patch(12, 4), &text, 2).unwrap();
        let loss = out.per_pass[1].mul(&out.per_pass[1]).unwrap().sum_all().unwrap();
        let grads = loss.backward().unwrap();
        let norm_of = |prefix: &str| -> f64 {
            model
                .store
                .iter()
                .filter(|(n, _)| n.starts_with(prefix))
                .filter_map(|(_, t)| grads.get(t))
                .map(|g| g.iter().map(|v| v * v).sum::<f64>())
                .sum::<f64>()
                .sqrt()
        };
        assert!(norm_of("encoder.stem") > 0.0);
        assert!(norm_of("prompt.extractor") > 0.0, "feedback path carries gradient");
        assert!(norm_of("fusion.block0") > 0.0);
        assert!(norm_of("decoder.up0") > 0.0);
    }

    #[test]
    fn param_count_matches_store() {
        let model = Model::new(&ModelConfig::micro(), 13).unwrap();
        let by_iter: u64 = model.store.iter().map(|(_, t)| t.numel() as u64).sum();
        assert_eq!(model.param_count(), by_iter);
    }
}
