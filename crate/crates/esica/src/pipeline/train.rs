//! Momentum-SGD training with a warmup + cosine schedule over the two-stage
//! curriculum, plus the gradient-reachability audit.

use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha20Rng;
use serde::Serialize;

use crate::error::{Error, Result};
use crate::model::Model;
use crate::pipeline::data::LabeledVolume;
use crate::pipeline::loss::dice_focal_loss;
use crate::pipeline::sample::{sample_patches, Sample, TrainConfig};
use crate::tensor::{Gradients, Tensor};
use crate::text::TextProvider;

/// Learning rate at step `t` of `total`: linear warmup over the first
/// `warmup_ratio` of steps, cosine decay to zero afterwards.
pub fn lr_at(base: f64, t: usize, total: usize, warmup_ratio: f64) -> f64 {
    if total == 0 {
        return 0.0;
    }
    let warmup = ((total as f64 * warmup_ratio).round() as usize).max(1);
    if t < warmup {
        base * (t + 1) as f64 / warmup as f64
    } else if total == warmup {
        base
    } else {
        let progress = (t - warmup) as f64 / (total - warmup) as f64;
        base * 0.5 * (1.0 + (std::f64::consts::PI * progress).cos())
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct TrainReport {
    pub step_losses: Vec<f64>,
    pub epoch_losses: Vec<f64>,
    pub steps: usize,
    pub frozen: Vec<String>,
}

/// Mean over passes of the Dice-Focal loss on each pass's logits.
pub fn sample_loss(model: &Model, sample: &Sample, cfg: &TrainConfig, provider: &TextProvider) -> Result<Tensor> {
    let emb = provider.embed(&sample.prompt)?;
    let out = model.forward_refine(&sample.patch_image, &emb, cfg.n_passes)?;
    let mut acc: Option<Tensor> = None;
    for logits in &out.per_pass {
        let l = dice_focal_loss(logits, &sample.target_mask, cfg.lambda_focal, cfg.gamma)?;
        acc = Some(match acc {
            None => l,
            Some(a) => a.add(&l)?,
        });
    }
    acc.unwrap().scale(1.0 / cfg.n_passes as f64)
}

struct MomentumSgd {
    velocity: Vec<Option<Vec<f64>>>,
    momentum: f64,
    weight_decay: f64,
}

impl MomentumSgd {
    fn new(n_params: usize, momentum: f64, weight_decay: f64) -> Self {
        MomentumSgd {
            velocity: vec![None; n_params],
            momentum,
            weight_decay,
        }
    }

    /// v = mu*v + (g + wd*w); w -= lr*v. Parameters without gradients are
    /// left untouched.
    fn step(&mut self, model: &mut Model, grads: &Gradients, lr: f64, frozen: &[bool]) {
        let ids: Vec<_> = model.store.ids().collect();
        for (idx, id) in ids.into_iter().enumerate() {
            if frozen[idx] {
                continue;
            }
            let current = model.store.get(id);
            let Some(g) = grads.get(current) else {
                continue;
            };
            let v = self
                .velocity[idx]
                .get_or_insert_with(|| vec![0.0; g.len()]);
            let w = current.data();
            let mut new_w = Vec::with_capacity(w.len());
            for i in 0..w.len() {
                v[i] = self.momentum * v[i] + (g[i] + self.weight_decay * w[i]);
                new_w.push(w[i] - lr * v[i]);
            }
            let shape = current.shape().to_vec();
            model
                .store
                .set(id, Tensor::new(&shape, new_w).expect("finite update").as_param());
        }
    }
}

/// Train in place over `epochs` passes of the volume list. One optimizer
/// step per volume per epoch, on the stage's sample quota. Deterministic
/// given the seed.
pub fn train(
    model: &mut Model,
    provider: &TextProvider,
    data: &[LabeledVolume],
    cfg: &TrainConfig,
    seed: u64,
    diagnostics_dir: Option<&Path>,
) -> Result<TrainReport> {
    cfg.validate()?;
    if data.is_empty() {
        return Err(Error::input("train: empty dataset"));
    }
    let frozen: Vec<bool> = model
        .store
        .iter()
        .map(|(name, _)| cfg.freeze_text && Model::is_text_side(name))
        .collect();
    let frozen_names: Vec<String> = model
        .store
        .iter()
        .zip(&frozen)
        .filter(|(_, &f)| f)
        .map(|((n, _), _)| n.to_string())
        .collect();

    let total_steps = cfg.epochs * data.len();
    let mut optimizer = MomentumSgd::new(model.store.len(), cfg.momentum, cfg.weight_decay);
    let mut rng = ChaCha20Rng::seed_from_u64(seed);
    let mut step_losses = Vec::with_capacity(total_steps);
    let mut epoch_losses = Vec::with_capacity(cfg.epochs);
    let mut step = 0usize;

    for epoch in 0..cfg.epochs {
        let mut order: Vec<usize> = (0..data.len()).collect();
        for i in 0..order.len() {
            let j = rng.gen_range(i..order.len());
            order.swap(i, j);
        }
        let mut epoch_sum = 0.0;
        for &vol_idx in &order {
            let sample_seed = rng.gen::<u64>();
            let samples = sample_patches(&data[vol_idx], cfg, sample_seed)?;
            let mut batch: Option<Tensor> = None;
            for sample in &samples {
                let l = sample_loss(model, sample, cfg, provider)?;
                batch = Some(match batch {
                    None => l,
                    Some(a) => a.add(&l)?,
                });
            }
            let batch = batch
                .ok_or_else(|| Error::runtime("train: stage quota produced no samples"))?
                .scale(1.0 / samples.len() as f64)?;
            let loss_value = batch.item()?;
            if !loss_value.is_finite() {
                let dump = serde_json::json!({
                    "step": step,
                    "epoch": epoch,
                    "volume_index": vol_idx,
                    "loss": format!("{loss_value}"),
                    "prompts": samples.iter().map(|s| s.prompt.clone()).collect::<Vec<_>>(),
                });
                if let Some(dir) = diagnostics_dir {
                    std::fs::create_dir_all(dir)?;
                    std::fs::write(
                        dir.join(format!("diverged_step{step}.json")),
                        serde_json::to_string_pretty(&dump)?,
                    )?;
                }
                return Err(Error::runtime(format!(
                    "non-finite loss at step {step}: {dump}"
                )));
            }
            let grads = batch.backward()?;
            let lr = lr_at(cfg.lr, step, total_steps, cfg.warmup_ratio);
            optimizer.step(model, &grads, lr, &frozen);
            step_losses.push(loss_value);
            epoch_sum += loss_value;
            step += 1;
        }
        epoch_losses.push(epoch_sum / order.len() as f64);
    }

    Ok(TrainReport {
        step_losses,
        epoch_losses,
        steps: step,
        frozen: frozen_names,
    })
}

#[derive(Debug, Clone, Serialize)]
pub struct AuditRow {
    pub name: String,
    pub grad_norm: Option<f64>,
    /// Reason a missing gradient is expected, when it is.
    pub explained: Option<String>,
}

/// Run one training batch and record which parameters received gradients.
/// Parameters without gradients must carry an explanation.
pub fn gradient_audit(
    model: &Model,
    provider: &TextProvider,
    vol: &LabeledVolume,
    cfg: &TrainConfig,
    seed: u64,
) -> Result<Vec<AuditRow>> {
    let samples = sample_patches(vol, cfg, seed)?;
    let mut batch: Option<Tensor> = None;
    for sample in &samples {
        let l = sample_loss(model, sample, cfg, provider)?;
        batch = Some(match batch {
            None => l,
            Some(a) => a.add(&l)?,
        });
    }
    let grads = batch
        .ok_or_else(|| Error::runtime("audit: no samples"))?
        .backward()?;

    let explain = |name: &str| -> Option<String> {
        use crate::decoder::MaskHeadKind;
        let head = model.cfg.mask_head;
        if head == MaskHeadKind::Similarity
            && (name.starts_with("decoder.conv_head") || name.starts_with("static_token"))
        {
            return Some("unused by the similarity mask head".into());
        }
        if head == MaskHeadKind::ConvHead
            && (name.starts_with("decoder.mask_mlp") || name.starts_with("text_proj"))
        {
            return Some("unused by the conv mask head".into());
        }
        if cfg.n_passes == 1 && name.starts_with("prompt.extractor") {
            return Some("mask feedback path inactive with a single pass".into());
        }
        None
    };

    Ok(model
        .store
        .grad_norms(&grads)
        .into_iter()
        .map(|(name, grad_norm)| {
            let explained = if grad_norm.is_none() {
                explain(&name)
            } else {
                None
            };
            AuditRow {
                name,
                grad_norm,
                explained,
            }
        })
        .collect())
}
