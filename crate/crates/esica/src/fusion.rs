//! The fusion transformer: a stack of two-way attention blocks with
//! grouped-query attention and rotary position embeddings, closed by a final
//! query-to-image cross-attention.
//!
//! Queries are the learnable mask tokens concatenated with the sparse prompt
//! tokens; keys and values are the flattened coarsest image features plus
//! the dense prompt embedding. Image tokens carry their linearized 3D voxel
//! index as the rotary position; query tokens sit at position 0.

use rand_chacha::ChaCha20Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{linear_positions, Activation, AttnTrace, GqaAttention, Mlp, NormLayer, ParamId, ParamStore};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct FusionConfig {
    pub d_model: usize,
    pub n_layers: usize,
    pub query_heads: usize,
    pub kv_heads: usize,
    pub n_mask_tokens: usize,
    /// Hidden width multiplier of the per-block query MLP.
    pub mlp_ratio: usize,
}

impl Default for FusionConfig {
    fn default() -> Self {
        // 12 query heads need a width divisible by 12; 192 gives d_head 16.
        FusionConfig {
            d_model: 192,
            n_layers: 6,
            query_heads: 12,
            kv_heads: 4,
            n_mask_tokens: 1,
            mlp_ratio: 2,
        }
    }
}

impl FusionConfig {
    pub fn validate(&self) -> Result<()> {
        if self.query_heads == 0 || self.kv_heads == 0 {
            return Err(Error::config("fusion: head counts must be positive"));
        }
        if self.query_heads % self.kv_heads != 0 {
            return Err(Error::config(format!(
                "fusion: query_heads {} must be a multiple of kv_heads {}",
                self.query_heads, self.kv_heads
            )));
        }
        if self.d_model % self.query_heads != 0 {
            return Err(Error::config(format!(
                "fusion: d_model {} must be divisible by query_heads {}",
                self.d_model, self.query_heads
            )));
        }
        if (self.d_model / self.query_heads) % 2 != 0 {
            return Err(Error::config(format!(
                "fusion: head dim {} must be even for rotary embeddings",
                self.d_model / self.query_heads
            )));
        }
        if self.n_mask_tokens == 0 {
            return Err(Error::config("fusion: need at least one mask token"));
        }
        if self.mlp_ratio == 0 {
            return Err(Error::config("fusion: mlp_ratio must be positive"));
        }
        Ok(())
    }
}

/// Query and image token streams entering the two-way stack.
#[derive(Debug, Clone)]
pub struct TokenSet {
    /// [n_q, d_model]: mask tokens then sparse prompt tokens.
    pub queries: Tensor,
    /// [n_tok, d_model]: flattened image features + dense prompt embedding.
    pub image_kv: Tensor,
    pub token_grid: (usize, usize, usize),
}

impl TokenSet {
    pub fn positions(&self) -> Vec<usize> {
        linear_positions(self.token_grid)
    }

    pub fn query_positions(&self) -> Vec<usize> {
        vec![0; self.queries.shape()[0]]
    }
}

/// One two-way attention block: query self-attention, query-to-image
/// cross-attention, query MLP, then image-to-query cross-attention, each
/// followed by a residual add and layer norm.
#[derive(Clone)]
pub struct TwoWayBlock {
    self_attn: GqaAttention,
    norm1: NormLayer,
    cross_q_to_img: GqaAttention,
    norm2: NormLayer,
    mlp: Mlp,
    norm3: NormLayer,
    cross_img_to_q: GqaAttention,
    norm4: NormLayer,
}

impl TwoWayBlock {
    fn new(
        store: &mut ParamStore,
        name: &str,
        cfg: &FusionConfig,
        rng: &mut ChaCha20Rng,
    ) -> Result<Self> {
        Ok(TwoWayBlock {
            self_attn: GqaAttention::new(
                store,
                &format!("{name}.self_attn"),
                cfg.d_model,
                cfg.query_heads,
                cfg.kv_heads,
                rng,
            )?,
            norm1: NormLayer::new(store, &format!("{name}.norm1"), cfg.d_model),
            cross_q_to_img: GqaAttention::new(
                store,
                &format!("{name}.cross_qi"),
                cfg.d_model,
                cfg.query_heads,
                cfg.kv_heads,
                rng,
            )?,
            norm2: NormLayer::new(store, &format!("{name}.norm2"), cfg.d_model),
            mlp: Mlp::new(
                store,
                &format!("{name}.mlp"),
                cfg.d_model,
                cfg.d_model * cfg.mlp_ratio,
                Activation::Gelu,
                rng,
            ),
            norm3: NormLayer::new(store, &format!("{name}.norm3"), cfg.d_model),
            cross_img_to_q: GqaAttention::new(
                store,
                &format!("{name}.cross_iq"),
                cfg.d_model,
                cfg.query_heads,
                cfg.kv_heads,
                rng,
            )?,
            norm4: NormLayer::new(store, &format!("{name}.norm4"), cfg.d_model),
        })
    }

    pub fn forward(
        &self,
        store: &ParamStore,
        tokens: &TokenSet,
        label: &str,
        mut trace: Option<&mut AttnTrace>,
    ) -> Result<TokenSet> {
        let img_pos = tokens.positions();
        let q_pos = tokens.query_positions();

        // (1) Self-attention over query tokens. Every query sits at rotary
        // position 0, which makes the rotation an identity; skip it.
        let q = &tokens.queries;
        let attended = self.self_attn.forward(
            store,
            q,
            q,
            None,
            None,
            &format!("{label}.self"),
            trace.as_deref_mut(),
        )?;
        let q = self.norm1.rows(store, &q.add(&attended)?)?;

        // (2) Queries attend to image tokens.
        let attended = self.cross_q_to_img.forward(
            store,
            &q,
            &tokens.image_kv,
            Some(&q_pos),
            Some(&img_pos),
            &format!("{label}.q_to_img"),
            trace.as_deref_mut(),
        )?;
        let q = self.norm2.rows(store, &q.add(&attended)?)?;

        // (3) MLP on the query stream.
        let q = self.norm3.rows(store, &q.add(&self.mlp.forward(store, &q)?)?)?;

        // (4) Image tokens attend back to the updated queries.
        let attended = self.cross_img_to_q.forward(
            store,
            &tokens.image_kv,
            &q,
            Some(&img_pos),
            Some(&q_pos),
            &format!("{label}.img_to_q"),
            trace,
        )?;
        let image_kv = self
            .norm4
            .rows(store, &tokens.image_kv.add(&attended)?)?;

        Ok(TokenSet {
            queries: q,
            image_kv,
            token_grid: tokens.token_grid,
        })
    }
}

/// The full transformer module.
#[derive(Clone)]
pub struct FusionModule {
    pub cfg: FusionConfig,
    mask_tokens: ParamId,
    blocks: Vec<TwoWayBlock>,
    final_attn: GqaAttention,
    final_norm: NormLayer,
}

/// Outputs of the fusion stack.
pub struct FusionOutput {
    /// [d_model] mask token, for prompt feedback.
    pub mask_token: Tensor,
    /// [n_tok, d_model] updated image tokens, for the decoder.
    pub image_tokens: Tensor,
}

impl FusionModule {
    pub fn new(store: &mut ParamStore, cfg: &FusionConfig, rng: &mut ChaCha20Rng) -> Result<Self> {
        cfg.validate()?;
        let mask_tokens = store.add(
            "fusion.mask_tokens",
            Tensor::randn(&[cfg.n_mask_tokens, cfg.d_model], 0.02, rng),
        );
        let blocks = (0..cfg.n_layers)
            .map(|i| TwoWayBlock::new(store, &format!("fusion.block{i}"), cfg, rng))
            .collect::<Result<Vec<_>>>()?;
        let final_attn = GqaAttention::new(
            store,
            "fusion.final_attn",
            cfg.d_model,
            cfg.query_heads,
            cfg.kv_heads,
            rng,
        )?;
        let final_norm = NormLayer::new(store, "fusion.final_norm", cfg.d_model);
        Ok(FusionModule {
            cfg: cfg.clone(),
            mask_tokens,
            blocks,
            final_attn,
            final_norm,
        })
    }

    /// Prepend the learnable mask tokens to the sparse prompts and pair the
    /// image tokens (plus dense prompt) into a [`TokenSet`].
    pub fn build_tokens(
        &self,
        store: &ParamStore,
        sparse: &Tensor,
        image_tokens: &Tensor,
        dense_tokens: &Tensor,
        token_grid: (usize, usize, usize),
    ) -> Result<TokenSet> {
        let n_tok = token_grid.0 * token_grid.1 * token_grid.2;
        if image_tokens.shape() != [n_tok, self.cfg.d_model] {
            return Err(Error::contract(format!(
                "build_tokens: image tokens {:?} vs grid {token_grid:?}",
                image_tokens.shape()
            )));
        }
        let queries = Tensor::concat_rows(&[store.get(self.mask_tokens).clone(), sparse.clone()])?;
        let image_kv = image_tokens.add(dense_tokens)?;
        Ok(TokenSet {
            queries,
            image_kv,
            token_grid,
        })
    }

    /// Run the two-way stack and the final query-to-image cross-attention.
    pub fn fuse(
        &self,
        store: &ParamStore,
        tokens: TokenSet,
        mut trace: Option<&mut AttnTrace>,
    ) -> Result<FusionOutput> {
        let mut t = tokens;
        for (i, block) in self.blocks.iter().enumerate() {
            t = block.forward(store, &t, &format!("fusion.block{i}"), trace.as_deref_mut())?;
        }
        let img_pos = t.positions();
        let q_pos = t.query_positions();
        let attended = self.final_attn.forward(
            store,
            &t.queries,
            &t.image_kv,
            Some(&q_pos),
            Some(&img_pos),
            "fusion.final",
            trace,
        )?;
        let queries = self.final_norm.rows(store, &t.queries.add(&attended)?)?;
        let mask_token = queries.slice_rows(0, 1)?.reshape(&[self.cfg.d_model])?;
        Ok(FusionOutput {
            mask_token,
            image_tokens: t.image_kv,
        })
    }
}

/// Standalone grouped-query attention, as used inside every block.
///
/// `q`: [n_q, d_model], `kv`: [n_kv, d_model]; query heads share key/value
/// heads in groups of `query_heads / kv_heads`.
pub fn grouped_query_attention(
    store: &ParamStore,
    attn: &GqaAttention,
    q: &Tensor,
    kv: &Tensor,
) -> Result<Tensor> {
    attn.forward(store, q, kv, None, None, "gqa", None)
}
