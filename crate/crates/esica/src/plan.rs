//! Enumerates the architecture's accountable layers for a configuration and
//! patch size, feeding the analytic cost model.
//!
//! The plan covers one full forward at the configured pass count: the
//! encoder runs once, fusion and decoder once per pass, and the mask
//! feedback extractor from the second pass on. Parameter-free glue (token
//! reshapes, residual adds, the final similarity dot product) carries no
//! entry; of these only the dot product does multiply-accumulate work, at
//! 2 * hidden_dim FLOPs per output voxel.

use crate::config::RunConfig;
use crate::cost::{CostReport, LayerSpec};
use crate::decoder::MaskHeadKind;
use crate::error::{Error, Result};

fn halve(e: (usize, usize, usize)) -> (usize, usize, usize) {
    (e.0.div_ceil(2), e.1.div_ceil(2), e.2.div_ceil(2))
}

/// Layer list for one full forward over a patch.
pub fn cost_plan(cfg: &RunConfig, patch: (usize, usize, usize)) -> Result<Vec<LayerSpec>> {
    cfg.validate()?;
    let enc = &cfg.encoder;
    let fus = &cfg.fusion;
    let dec = &cfg.decoder;
    let levels = enc.levels();
    let factor = enc.downsample_factor();
    for extent in [patch.0, patch.1, patch.2] {
        if extent % factor != 0 {
            return Err(Error::config(format!(
                "cost_plan: patch extent {extent} not divisible by the pyramid factor {factor}"
            )));
        }
    }
    let mut layers: Vec<LayerSpec> = Vec::new();
    let (kh, kw, kd) = enc.axial_kernels;

    let block = |layers: &mut Vec<LayerSpec>, name: &str, c: usize, k: (usize, usize, usize), e: (usize, usize, usize)| {
        layers.push(LayerSpec::depthwise_axial(&format!("{name}.dw_h"), c, (k.0, 1, 1), e));
        layers.push(LayerSpec::depthwise_axial(&format!("{name}.dw_w"), c, (1, k.1, 1), e));
        layers.push(LayerSpec::depthwise_axial(&format!("{name}.dw_d"), c, (1, 1, k.2), e));
        // Extractor and adapter blocks always carry the local branch and a
        // norm; encoder blocks follow the encoder switches.
        let in_encoder = name.starts_with("encoder");
        if enc.local_branch || !in_encoder {
            layers.push(LayerSpec::depthwise_full(&format!("{name}.local"), c, (3, 3, 3), e));
        }
        layers.push(LayerSpec::dense_conv3d(&format!("{name}.pointwise"), c, c, (1, 1, 1), e, 1));
        if enc.norms || !in_encoder {
            layers.push(LayerSpec::norm(&format!("{name}.norm"), c, e));
        }
    };

    // Encoder (runs once; the pyramid is shared across passes).
    let mut extent = patch;
    layers.push(LayerSpec::dense_conv3d("encoder.input_proj", 1, enc.stem_channels, (3, 3, 3), extent, 1));
    block(&mut layers, "encoder.stem", enc.stem_channels, (kh, kw, kd), extent);
    let mut prev = enc.stem_channels;
    let mut level_extents = Vec::with_capacity(levels);
    for (level, (&c, &depth)) in enc.stage_channels.iter().zip(&enc.stage_depths).enumerate() {
        if level == 0 {
            if prev != c {
                layers.push(LayerSpec::dense_conv3d(
                    &format!("encoder.stage{level}.proj"),
                    prev,
                    c,
                    (1, 1, 1),
                    extent,
                    1,
                ));
            }
        } else {
            layers.push(LayerSpec::dense_conv3d(
                &format!("encoder.stage{level}.down"),
                prev,
                c,
                (3, 3, 3),
                extent,
                2,
            ));
            extent = halve(extent);
        }
        for b in 0..depth {
            block(&mut layers, &format!("encoder.stage{level}.block{b}"), c, (kh, kw, kd), extent);
        }
        level_extents.push(extent);
        prev = c;
    }
    let c_last = *enc.stage_channels.last().unwrap();
    let grid = *level_extents.last().unwrap();
    layers.push(LayerSpec::attention("encoder.attn", c_last, enc.attn_heads, enc.attn_heads, grid));
    if enc.norms {
        layers.push(LayerSpec::norm("encoder.attn_norm1", c_last, grid));
    }
    layers.push(LayerSpec::linear("encoder.attn_mlp.lin1", c_last, 2 * c_last, grid));
    layers.push(LayerSpec::linear("encoder.attn_mlp.lin2", 2 * c_last, c_last, grid));
    if enc.norms {
        layers.push(LayerSpec::norm("encoder.attn_norm2", c_last, grid));
    }

    // Shared projections (once per forward).
    layers.push(LayerSpec::linear("image_proj", c_last, fus.d_model, grid));
    layers.push(LayerSpec::linear("text_proj", cfg.text.d_text, fus.d_model, (1, 1, 1)));

    let n_passes = cfg.train.n_passes;
    for pass in 1..=n_passes {
        let p = format!("pass{pass}");
        let n_q = fus.n_mask_tokens + if pass == 1 { 1 } else { 2 };
        let one = |n: usize| (n, 1, 1);

        // Mask feedback extractor (second pass onwards).
        if pass > 1 {
            let mut c = 1usize;
            let mut e = patch;
            for i in 0..levels - 1 {
                block(&mut layers, &format!("{p}.extractor.stage{i}.block"), c, (3, 3, 3), e);
                let next = (8 << i).min(fus.d_model);
                layers.push(LayerSpec::dense_conv3d(
                    &format!("{p}.extractor.stage{i}.down"),
                    c,
                    next,
                    (3, 3, 3),
                    e,
                    2,
                ));
                e = halve(e);
                c = next;
            }
            layers.push(LayerSpec::dense_conv3d(&format!("{p}.extractor.proj"), c, fus.d_model, (1, 1, 1), e, 1));
        }

        // Fusion stack.
        for layer in 0..fus.n_layers {
            let b = format!("{p}.fusion.block{layer}");
            layers.push(LayerSpec::attention(&format!("{b}.self_attn"), fus.d_model, fus.query_heads, fus.kv_heads, one(n_q)));
            layers.push(LayerSpec::norm(&format!("{b}.norm1"), fus.d_model, one(n_q)));
            layers.push(LayerSpec::cross_attention(&format!("{b}.cross_qi"), fus.d_model, fus.query_heads, fus.kv_heads, one(n_q), grid));
            layers.push(LayerSpec::norm(&format!("{b}.norm2"), fus.d_model, one(n_q)));
            layers.push(LayerSpec::linear(&format!("{b}.mlp.lin1"), fus.d_model, fus.d_model * fus.mlp_ratio, one(n_q)));
            layers.push(LayerSpec::linear(&format!("{b}.mlp.lin2"), fus.d_model * fus.mlp_ratio, fus.d_model, one(n_q)));
            layers.push(LayerSpec::norm(&format!("{b}.norm3"), fus.d_model, one(n_q)));
            layers.push(LayerSpec::cross_attention(&format!("{b}.cross_iq"), fus.d_model, fus.query_heads, fus.kv_heads, grid, one(n_q)));
            layers.push(LayerSpec::norm(&format!("{b}.norm4"), fus.d_model, grid));
        }
        layers.push(LayerSpec::cross_attention(&format!("{p}.fusion.final_attn"), fus.d_model, fus.query_heads, fus.kv_heads, one(n_q), grid));
        layers.push(LayerSpec::norm(&format!("{p}.fusion.final_norm"), fus.d_model, one(n_q)));

        // Decoder.
        let h = dec.hidden_dim;
        layers.push(LayerSpec::dense_conv3d(&format!("{p}.decoder.input_proj"), fus.d_model, h, (1, 1, 1), grid, 1));
        let adapter = |layers: &mut Vec<LayerSpec>, level: usize, e: (usize, usize, usize)| {
            let c_in = enc.stage_channels[level];
            let k = dec.adapter_kernels[level];
            layers.push(LayerSpec::dense_conv3d(
                &format!("{p}.decoder.adapter{level}.proj"),
                c_in,
                h,
                (1, 1, 1),
                e,
                1,
            ));
            block(layers, &format!("{p}.decoder.adapter{level}.block"), h, (k, k, k), e);
        };
        adapter(&mut layers, levels - 1, grid);
        layers.push(LayerSpec::dense_conv3d(&format!("{p}.decoder.coarse_fuse"), 2 * h, h, (1, 1, 1), grid, 1));
        for level in (0..levels - 1).rev() {
            let target = level_extents[level];
            let from = level_extents[level + 1];
            layers.push(LayerSpec::resize(&format!("{p}.decoder.up{level}.resize"), h, from, target));
            layers.push(LayerSpec::dense_conv3d(&format!("{p}.decoder.up{level}.refine"), h, h, (3, 3, 3), target, 1));
            adapter(&mut layers, level, target);
            layers.push(LayerSpec::dense_conv3d(&format!("{p}.decoder.up{level}.fuse"), 2 * h, h, (1, 1, 1), target, 1));
        }

        // Mask head.
        match cfg.mask_head.into() {
            MaskHeadKind::Similarity => {
                layers.push(LayerSpec::linear(&format!("{p}.decoder.mask_mlp1"), fus.d_model, h, (1, 1, 1)));
                layers.push(LayerSpec::linear(&format!("{p}.decoder.mask_mlp2"), h, h, (1, 1, 1)));
            }
            MaskHeadKind::ConvHead => {
                layers.push(LayerSpec::dense_conv3d(&format!("{p}.decoder.conv_head"), h, 1, (1, 1, 1), patch, 1));
            }
        }
    }
    Ok(layers)
}

/// Cost report for one configured forward over a patch. Layers that rerun
/// on later passes share their weights, so repeats contribute FLOPs but no
/// parameters; the totals stay the sums of the per-layer entries.
pub fn model_cost_report(cfg: &RunConfig, patch: (usize, usize, usize)) -> Result<CostReport> {
    use crate::cost::{count_cost, LayerCost};
    let layers = cost_plan(cfg, patch)?;
    let mut seen = std::collections::HashSet::new();
    let mut per_layer = Vec::with_capacity(layers.len());
    let mut params = 0u64;
    let mut flops = 0u64;
    for spec in layers {
        let (p, f) = count_cost(&spec)?;
        let shared_name = spec
            .name
            .split_once('.')
            .filter(|(head, _)| head.starts_with("pass"))
            .map(|(_, tail)| tail.to_string())
            .unwrap_or_else(|| spec.name.clone());
        let p = if seen.insert(shared_name) { p } else { 0 };
        params += p;
        flops += f;
        per_layer.push(LayerCost {
            spec,
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
