//! Prompt encoding: per-iteration sparse and dense embeddings.
//!
//! The first pass carries a single projected text token and a learnable
//! dense template. Later passes append the previous pass's mask token to the
//! sparse set and replace the dense embedding with features extracted from
//! the previous mask logits by a small stack of decomposed-convolution
//! stages with strided downsampling.

use rand_chacha::ChaCha20Rng;

use crate::encoder::DecomposedBlock;
use crate::error::{Error, Result};
use crate::nn::{Activation, Conv3dLayer, Linear, ParamId, ParamStore};
use crate::tensor::Tensor;
use crate::text::PromptEmbedding;

/// Sparse and dense prompt embeddings for one refinement iteration.
#[derive(Debug, Clone)]
pub struct PromptState {
    /// [n_sparse, d_model]; one token on the first iteration, text plus the
    /// previous mask token afterwards.
    pub sparse: Tensor,
    /// [d_model, H_t, W_t, D_t] on the transformer token grid.
    pub dense: Tensor,
    pub iteration: usize,
}

impl PromptState {
    fn check(self) -> Result<Self> {
        let n_sparse = self.sparse.shape()[0];
        if (self.iteration == 1) != (n_sparse == 1) {
            return Err(Error::contract(format!(
                "prompt state: iteration {} with {} sparse tokens",
                self.iteration, n_sparse
            )));
        }
        Ok(self)
    }
}

/// Mask-feedback feature extractor: per stage one decomposed block then a
/// stride-2 projection, followed by a pointwise lift to the model width.
#[derive(Debug, Clone)]
struct MaskExtractor {
    stages: Vec<(DecomposedBlock, Conv3dLayer)>,
    final_proj: Conv3dLayer,
}

impl MaskExtractor {
    fn new(
        store: &mut ParamStore,
        d_model: usize,
        n_stages: usize,
        rng: &mut ChaCha20Rng,
    ) -> Self {
        let mut stages = Vec::with_capacity(n_stages);
        let mut channels = 1usize;
        for i in 0..n_stages {
            let next = (8 << i).min(d_model);
            let block = DecomposedBlock::new(
                store,
                &format!("prompt.extractor.stage{i}.block"),
                channels,
                (3, 3, 3),
                Activation::Gelu,
                true,
                true,
                rng,
            );
            let down = Conv3dLayer::new(
                store,
                &format!("prompt.extractor.stage{i}.down"),
                channels,
                next,
                (3, 3, 3),
                2,
                rng,
            );
            stages.push((block, down));
            channels = next;
        }
        let final_proj = Conv3dLayer::new(
            store,
            "prompt.extractor.proj",
            channels,
            d_model,
            (1, 1, 1),
            1,
            rng,
        );
        MaskExtractor {
            stages,
            final_proj,
        }
    }

    fn forward(&self, store: &ParamStore, mask_logits: &Tensor) -> Result<Tensor> {
        let mut x = mask_logits.clone();
        for (block, down) in &self.stages {
            x = down.forward(store, &block.forward(store, &x)?)?;
        }
        self.final_proj.forward(store, &x)
    }
}

/// Builds [`PromptState`] values for every refinement iteration.
#[derive(Clone)]
pub struct PromptEncoder {
    /// Adapts provider embeddings of any width to the model width.
    pub text_proj: Linear,
    dense_template: ParamId,
    extractor: MaskExtractor,
    pub d_model: usize,
    /// Spatial downsampling factor between mask logits and the token grid.
    pub factor: usize,
}

impl PromptEncoder {
    pub fn new(
        store: &mut ParamStore,
        d_text: usize,
        d_model: usize,
        pyramid_levels: usize,
        rng: &mut ChaCha20Rng,
    ) -> Result<Self> {
        if pyramid_levels < 2 {
            return Err(Error::config("prompt encoder: need at least two pyramid levels"));
        }
        let n_stages = pyramid_levels - 1;
        Ok(PromptEncoder {
            text_proj: Linear::new(store, "text_proj", d_text, d_model, rng),
            dense_template: store.add("prompt.dense_template", Tensor::zeros(&[d_model])),
            extractor: MaskExtractor::new(store, d_model, n_stages, rng),
            d_model,
            factor: 1 << n_stages,
        })
    }

    /// Project a provider embedding to a [1, d_model] token row.
    pub fn project_text(&self, store: &ParamStore, text: &PromptEmbedding) -> Result<Tensor> {
        let row = text.vector.reshape(&[1, text.vector.numel()])?;
        self.text_proj.forward(store, &row)
    }

    /// First-iteration state: projected text only, learnable dense template.
    pub fn build_initial(
        &self,
        store: &ParamStore,
        text: &PromptEmbedding,
        grid: (usize, usize, usize),
    ) -> Result<PromptState> {
        let token = self.project_text(store, text)?;
        self.build_initial_from_token(store, &token, grid)
    }

    pub fn build_initial_from_token(
        &self,
        store: &ParamStore,
        text_token: &Tensor,
        grid: (usize, usize, usize),
    ) -> Result<PromptState> {
        if text_token.shape() != [1, self.d_model] {
            return Err(Error::contract(format!(
                "build_initial: text token shape {:?}",
                text_token.shape()
            )));
        }
        let dense = store.get(self.dense_template).broadcast_channels(grid)?;
        PromptState {
            sparse: text_token.clone(),
            dense,
            iteration: 1,
        }
        .check()
    }

    /// Later-iteration state: text plus the previous mask token; dense
    /// embedding extracted from the previous mask logits.
    pub fn build_refined(
        &self,
        store: &ParamStore,
        text: &PromptEmbedding,
        prev_mask_logits: &Tensor,
        prev_mask_token: &Tensor,
        iteration: usize,
    ) -> Result<PromptState> {
        let token = self.project_text(store, text)?;
        self.build_refined_from_token(store, &token, prev_mask_logits, prev_mask_token, iteration)
    }

    pub fn build_refined_from_token(
        &self,
        store: &ParamStore,
        text_token: &Tensor,
        prev_mask_logits: &Tensor,
        prev_mask_token: &Tensor,
        iteration: usize,
    ) -> Result<PromptState> {
        if iteration < 2 {
            return Err(Error::contract("build_refined: iteration must be >= 2"));
        }
        let s = prev_mask_logits.shape();
        if s.len() != 4 || s[0] != 1 {
            return Err(Error::contract(format!(
                "build_refined: mask logits must be [1,H,W,D], got {s:?}"
            )));
        }
        for extent in [s[1], s[2], s[3]] {
            if extent % self.factor != 0 {
                return Err(Error::contract(format!(
                    "build_refined: mask extent {extent} not divisible by {}",
                    self.factor
                )));
            }
        }
        if prev_mask_token.shape() != [self.d_model] {
            return Err(Error::contract(format!(
                "build_refined: mask token shape {:?}",
                prev_mask_token.shape()
            )));
        }
        let mask_row = prev_mask_token.reshape(&[1, self.d_model])?;
        let sparse = Tensor::concat_rows(&[text_token.clone(), mask_row])?;
        let dense = self.extractor.forward(store, prev_mask_logits)?;
        PromptState {
            sparse,
            dense,
            iteration,
        }
        .check()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::grad_check;
    use crate::text::embed_toy;
    use rand::SeedableRng;

    fn setup(d_text: usize, d_model: usize, levels: usize) -> (ParamStore, PromptEncoder) {
        let mut rng = ChaCha20Rng::seed_from_u64(1);
        let mut store = ParamStore::new();
        let enc = PromptEncoder::new(&mut store, d_text, d_model, levels, &mut rng).unwrap();
        (store, enc)
    }

    #[test]
    fn initial_state_has_one_token_and_shared_dense() {
        let (store, enc) = setup(16, 8, 3);
        let a = enc
            .build_initial(&store, &embed_toy("bright sphere", 16).unwrap(), (2, 2, 2))
            .unwrap();
        let b = enc
            .build_initial(&store, &embed_toy("dark cube", 16).unwrap(), (2, 2, 2))
            .unwrap();
        assert_eq!(a.sparse.shape(), &[1, 8]);
        assert_eq!(a.iteration, 1);
        assert_eq!(a.dense.shape(), &[8, 2, 2, 2]);
        // Different prompts share the dense template but differ sparsely.
        assert_eq!(a.dense.data(), b.dense.data());
        assert_ne!(a.sparse.data(), b.sparse.data());
        // Same prompt is bitwise reproducible.
        let c = enc
            .build_initial(&store, &embed_toy("bright sphere", 16).unwrap(), (2, 2, 2))
            .unwrap();
        assert_eq!(a.sparse.data(), c.sparse.data());
        assert_eq!(a.dense.data(), c.dense.data());
    }

    #[test]
    fn refined_state_appends_the_mask_token() {
        let (store, enc) = setup(16, 8, 3);
        let mut rng = ChaCha20Rng::seed_from_u64(2);
        let logits = Tensor::randn(&[1, 8, 8, 8], 1.0, &mut rng);
        let token = Tensor::randn(&[8], 1.0, &mut rng);
        let state = enc
            .build_refined(
                &store,
                &embed_toy("bright sphere", 16).unwrap(),
                &logits,
                &token,
                2,
            )
            .unwrap();
        assert_eq!(state.sparse.shape(), &[2, 8]);
        assert_eq!(state.dense.shape(), &[8, 2, 2, 2]);
        assert_eq!(state.iteration, 2);
        assert_eq!(&state.sparse.data()[8..], token.data());
    }

    #[test]
    fn zero_mask_gives_a_deterministic_bias_pattern() {
        let (store, enc) = setup(16, 8, 2);
        let logits = Tensor::zeros(&[1, 4, 4, 4]);
        let token = Tensor::zeros(&[8]);
        let text = embed_toy("hollow shell", 16).unwrap();
        let a = enc.build_refined(&store, &text, &logits, &token, 2).unwrap();
        let b = enc.build_refined(&store, &text, &logits, &token, 2).unwrap();
        assert_eq!(a.dense.data(), b.dense.data());
    }

    #[test]
    fn spatial_mismatch_is_a_contract_violation() {
        let (store, enc) = setup(16, 8, 3); // factor 4
        let logits = Tensor::zeros(&[1, 6, 8, 8]);
        let token = Tensor::zeros(&[8]);
        let text = embed_toy("bright sphere", 16).unwrap();
        assert!(enc.build_refined(&store, &text, &logits, &token, 2).is_err());
    }

    #[test]
    fn translating_the_mask_translates_interior_dense_features() {
        let (store, enc) = setup(16, 8, 2); // factor 2
        let mut rng = ChaCha20Rng::seed_from_u64(3);
        let n = 12;
        let x = Tensor::randn(&[1, n, n, n], 1.0, &mut rng);
        let shift = 2usize; // one token-grid step at factor 2
        let mut moved = vec![0.0; x.numel()];
        for h in shift..n {
            let src = &x.data()[(h - shift) * n * n..(h - shift + 1) * n * n];
            moved[h * n * n..(h + 1) * n * n].copy_from_slice(src);
        }
        let xm = Tensor::new(&[1, n, n, n], moved).unwrap();
        let token = Tensor::zeros(&[8]);
        let text = embed_toy("bright sphere", 16).unwrap();
        let a = enc.build_refined(&store, &text, &x, &token, 2).unwrap();
        let b = enc.build_refined(&store, &text, &xm, &token, 2).unwrap();
        let g = n / 2;
        let sp = g * g * g;
        let ts = shift / 2;
        // Compare interior token cells (2 cells clear of every face).
        for c in 0..8 {
            for h in 2..g - 2 - ts {
                for w in 2..g - 2 {
                    for d in 2..g - 2 {
                        let va = a.dense.data()[c * sp + (h * g + w) * g + d];
                        let vb = b.dense.data()[c * sp + ((h + ts) * g + w) * g + d];
                        assert!(
                            (va - vb).abs() < 1e-9,
                            "c={c} ({h},{w},{d}): {va} vs {vb}"
                        );
                    }
                }
            }
        }
    }

    #[test]
    fn gradients_flow_through_the_extractor_into_the_mask() {
        let (store, enc) = setup(16, 8, 2);
        let mut rng = ChaCha20Rng::seed_from_u64(4);
        let logits = Tensor::randn(&[1, 4, 4, 4], 1.0, &mut rng);
        let token = Tensor::zeros(&[8]);
        let text = embed_toy("bright sphere", 16).unwrap();
        let f = |t: &Tensor| {
            let state = enc.build_refined(&store, &text, t, &token, 2)?;
            state.dense.mul(&state.dense)?.sum_all()
        };
        let err = grad_check(f, &logits, 1e-5).unwrap();
        assert!(err < 1e-4, "error {err}");
    }
}
