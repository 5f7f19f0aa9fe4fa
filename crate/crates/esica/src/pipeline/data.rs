//! Labeled volumes, synthetic dataset generation, and preprocessing.

use std::collections::BTreeMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha20Rng;

use crate::error::{Error, Result};
use crate::tensor::resize::{axis_map_nearest, AxisMap};
use crate::tensor::Tensor;

/// Image voxels, integer labels, physical spacing, and the prompt catalog.
#[derive(Debug, Clone)]
pub struct LabeledVolume {
    /// Intensities in [0,1], shape [1,H,W,D].
    pub image: Tensor,
    /// Integer class labels per voxel, 0 = background, row-major [H,W,D].
    pub labels: Vec<u16>,
    pub extents: (usize, usize, usize),
    /// Millimeters per voxel along (h, w, d).
    pub spacing: (f64, f64, f64),
    /// Class id -> prompt strings. May list classes absent from `labels`
    /// (negative-prompt candidates).
    pub class_prompts: BTreeMap<u16, Vec<String>>,
}

impl LabeledVolume {
    pub fn validate(&self) -> Result<()> {
        let (h, w, d) = self.extents;
        if self.image.shape() != [1, h, w, d] {
            return Err(Error::contract(format!(
                "volume image shape {:?} vs extents {:?}",
                self.image.shape(),
                self.extents
            )));
        }
        if self.labels.len() != h * w * d {
            return Err(Error::contract("volume labels length mismatch"));
        }
        if self.spacing.0 <= 0.0 || self.spacing.1 <= 0.0 || self.spacing.2 <= 0.0 {
            return Err(Error::contract("volume spacing must be positive"));
        }
        Ok(())
    }

    /// Classes actually present in the label map.
    pub fn present_classes(&self) -> Vec<u16> {
        let mut ids: Vec<u16> = self.labels.iter().copied().filter(|&l| l > 0).collect();
        ids.sort_unstable();
        ids.dedup();
        ids
    }

    pub fn class_mask(&self, class: u16) -> Vec<bool> {
        self.labels.iter().map(|&l| l == class).collect()
    }
}

// ---------------------------------------------------------------------------
// Synthetic dataset
// ---------------------------------------------------------------------------

/// The fixed synthetic class catalog: four primitives, two prompts each.
pub fn synthetic_prompt_catalog() -> Vec<(u16, Vec<&'static str>)> {
    vec![
        (1, vec!["bright sphere", "glowing ball"]),
        (2, vec!["dark cube", "shadowed box"]),
        (3, vec!["gray ellipsoid", "dim oval blob"]),
        (4, vec!["hollow shell", "ring capsule"]),
    ]
}

fn catalog_map() -> BTreeMap<u16, Vec<String>> {
    synthetic_prompt_catalog()
        .into_iter()
        .map(|(id, ps)| (id, ps.into_iter().map(String::from).collect()))
        .collect()
}

/// Mean intensity per synthetic class; the background sits at 0.15.
fn class_intensity(class: u16) -> f64 {
    match class {
        1 => 0.9,
        2 => 0.45,
        3 => 0.65,
        _ => 0.8,
    }
}

#[derive(Debug, Clone, Copy)]
enum Primitive {
    Sphere,
    Cube,
    Ellipsoid,
    HollowShell,
}

impl Primitive {
    fn for_class(class: u16) -> Primitive {
        match class {
            1 => Primitive::Sphere,
            2 => Primitive::Cube,
            3 => Primitive::Ellipsoid,
            _ => Primitive::HollowShell,
        }
    }
}

fn rasterize(
    prim: Primitive,
    center: (f64, f64, f64),
    radii: (f64, f64, f64),
    extents: (usize, usize, usize),
) -> Vec<usize> {
    let (h, w, d) = extents;
    let mut voxels = Vec::new();
    let lo = |c: f64, r: f64| ((c - r - 1.0).floor().max(0.0)) as usize;
    let hi = |c: f64, r: f64, n: usize| ((c + r + 1.0).ceil() as usize).min(n - 1);
    for hh in lo(center.0, radii.0)..=hi(center.0, radii.0, h) {
        for ww in lo(center.1, radii.1)..=hi(center.1, radii.1, w) {
            for dd in lo(center.2, radii.2)..=hi(center.2, radii.2, d) {
                let x = (hh as f64 - center.0) / radii.0;
                let y = (ww as f64 - center.1) / radii.1;
                let z = (dd as f64 - center.2) / radii.2;
                let inside = match prim {
                    Primitive::Sphere | Primitive::Ellipsoid => x * x + y * y + z * z <= 1.0,
                    Primitive::Cube => x.abs() <= 1.0 && y.abs() <= 1.0 && z.abs() <= 1.0,
                    Primitive::HollowShell => {
                        let r2 = x * x + y * y + z * z;
                        // Shell thickness ~2 voxels relative to the radius.
                        let inner = 1.0 - 2.0 / radii.0.max(3.0);
                        r2 <= 1.0 && r2 >= inner * inner
                    }
                };
                if inside {
                    voxels.push((hh * w + ww) * d + dd);
                }
            }
        }
    }
    voxels
}

#[derive(Debug, Clone)]
pub struct SynthOptions {
    pub size: usize,
    /// When true, one class scatters 2-5 small spheres (instance tests).
    pub multi_instance: bool,
    pub noise_std: f64,
}

impl Default for SynthOptions {
    fn default() -> Self {
        SynthOptions {
            size: 48,
            multi_instance: false,
            noise_std: 0.05,
        }
    }
}

/// Generate deterministic synthetic volumes: 1-3 disjoint primitives among
/// {sphere, cube, ellipsoid, hollow shell}, each a distinct class, with
/// additive Gaussian noise.
pub fn synth_dataset(seed: u64, n_volumes: usize, opts: &SynthOptions) -> Result<Vec<LabeledVolume>> {
    if opts.size < 32 {
        return Err(Error::config(format!(
            "synth_dataset: size {} below the minimum of 32",
            opts.size
        )));
    }
    (0..n_volumes)
        .map(|i| synth_volume(seed, i as u64, opts))
        .collect()
}

fn synth_volume(seed: u64, index: u64, opts: &SynthOptions) -> Result<LabeledVolume> {
    let mut rng = ChaCha20Rng::seed_from_u64(seed ^ (index.wrapping_mul(0x9e37_79b9_7f4a_7c15)));
    let n = opts.size;
    let extents = (n, n, n);
    let total = n * n * n;
    let mut labels = vec![0u16; total];
    let mut image = vec![0.15f64; total];

    let n_classes = rng.gen_range(1..=3usize);
    let mut classes: Vec<u16> = vec![1, 2, 3, 4];
    // Deterministic partial shuffle.
    for i in 0..classes.len() {
        let j = rng.gen_range(i..classes.len());
        classes.swap(i, j);
    }
    classes.truncate(n_classes);
    classes.sort_unstable();

    for &class in &classes {
        let instances = if opts.multi_instance && class == classes[0] {
            rng.gen_range(2..=5usize)
        } else {
            1
        };
        for _ in 0..instances {
            let mut placed = false;
            for _attempt in 0..100 {
                // Fewer shapes leave room for bigger ones; radii shrink with
                // the class count so 3-primitive volumes still pack.
                let r_base = if instances > 1 {
                    rng.gen_range(3.0..5.0)
                } else {
                    let r_max = n as f64 / (2.4 + 1.2 * n_classes as f64);
                    rng.gen_range(6.0..r_max.max(7.0))
                };
                let radii = match Primitive::for_class(class) {
                    Primitive::Ellipsoid => (
                        r_base,
                        r_base * rng.gen_range(0.6..0.9),
                        r_base * rng.gen_range(1.1..1.5),
                    ),
                    _ => (r_base, r_base, r_base),
                };
                let margin = radii.0.max(radii.1).max(radii.2) + 2.0;
                if 2.0 * margin >= n as f64 {
                    continue;
                }
                let center = (
                    rng.gen_range(margin..n as f64 - margin),
                    rng.gen_range(margin..n as f64 - margin),
                    rng.gen_range(margin..n as f64 - margin),
                );
                let voxels = rasterize(Primitive::for_class(class), center, radii, extents);
                if voxels.is_empty() || voxels.iter().any(|&v| labels[v] != 0) {
                    continue;
                }
                let intensity = class_intensity(class);
                for &v in &voxels {
                    labels[v] = class;
                    image[v] = intensity;
                }
                placed = true;
                break;
            }
            if !placed {
                return Err(Error::runtime(format!(
                    "synth_dataset: could not place class {class} after 100 attempts"
                )));
            }
        }
    }

    // Additive Gaussian noise, clamped back into [0,1].
    for v in image.iter_mut() {
        let u1: f64 = rng.gen::<f64>().max(f64::MIN_POSITIVE);
        let u2: f64 = rng.gen();
        let z = (-2.0 * u1.ln()).sqrt() * (std::f64::consts::TAU * u2).cos();
        *v = (*v + z * opts.noise_std).clamp(0.0, 1.0);
    }

    Ok(LabeledVolume {
        image: Tensor::new(&[1, n, n, n], image)?,
        labels,
        extents,
        spacing: (1.5, 1.5, 1.5),
        class_prompts: catalog_map(),
    })
}

// ---------------------------------------------------------------------------
// Preprocessing
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Default)]
pub struct PreprocessInfo {
    /// Set when the label map was all background and the crop was skipped.
    pub fg_crop_skipped: bool,
    pub resampled: bool,
}

/// Resample to the target spacing (trilinear image, nearest labels), crop to
/// the foreground bounding box padded by 8 voxels, and min-max normalize the
/// image to [0,1]. Microscopy-style callers skip resampling.
pub fn preprocess(
    vol: &LabeledVolume,
    target_spacing: (f64, f64, f64),
    skip_resample: bool,
) -> Result<(LabeledVolume, PreprocessInfo)> {
    vol.validate()?;
    let mut info = PreprocessInfo::default();
    let (h, w, d) = vol.extents;

    // Extent rule: new = ceil(old * spacing / target).
    let new_extent = |n: usize, s: f64, t: f64| ((n as f64 * s / t).ceil() as usize).max(1);
    let (image, labels, extents, spacing) = if skip_resample
        || (vol.spacing == target_spacing)
    {
        (
            vol.image.detach(),
            vol.labels.clone(),
            vol.extents,
            vol.spacing,
        )
    } else {
        info.resampled = true;
        let target = (
            new_extent(h, vol.spacing.0, target_spacing.0),
            new_extent(w, vol.spacing.1, target_spacing.1),
            new_extent(d, vol.spacing.2, target_spacing.2),
        );
        let image = vol.image.trilinear_resize(target)?.detach();
        let labels = nearest_resize_labels(&vol.labels, vol.extents, target);
        (image, labels, target, target_spacing)
    };

    // Foreground bounding box over nonzero labels, padded by 8 voxels.
    let (he, we, de) = extents;
    let mut bounds: Option<[usize; 6]> = None;
    for hh in 0..he {
        for ww in 0..we {
            for dd in 0..de {
                if labels[(hh * we + ww) * de + dd] != 0 {
                    let b = bounds.get_or_insert([hh, hh, ww, ww, dd, dd]);
                    b[0] = b[0].min(hh);
                    b[1] = b[1].max(hh);
                    b[2] = b[2].min(ww);
                    b[3] = b[3].max(ww);
                    b[4] = b[4].min(dd);
                    b[5] = b[5].max(dd);
                }
            }
        }
    }
    let (image, labels, extents) = match bounds {
        None => {
            info.fg_crop_skipped = true;
            (image, labels, extents)
        }
        Some(b) => {
            const PAD: usize = 8;
            let h0 = b[0].saturating_sub(PAD);
            let h1 = (b[1] + PAD + 1).min(he);
            let w0 = b[2].saturating_sub(PAD);
            let w1 = (b[3] + PAD + 1).min(we);
            let d0 = b[4].saturating_sub(PAD);
            let d1 = (b[5] + PAD + 1).min(de);
            let (nh, nw, nd) = (h1 - h0, w1 - w0, d1 - d0);
            let src = image.data();
            let mut img = Vec::with_capacity(nh * nw * nd);
            let mut lbl = Vec::with_capacity(nh * nw * nd);
            for hh in h0..h1 {
                for ww in w0..w1 {
                    for dd in d0..d1 {
                        img.push(src[(hh * we + ww) * de + dd]);
                        lbl.push(labels[(hh * we + ww) * de + dd]);
                    }
                }
            }
            (
                Tensor::new(&[1, nh, nw, nd], img)?,
                lbl,
                (nh, nw, nd),
            )
        }
    };

    // Min-max normalization with a degenerate-range guard.
    let data = image.data();
    let min = data.iter().fold(f64::INFINITY, |a, &b| a.min(b));
    let max = data.iter().fold(f64::NEG_INFINITY, |a, &b| a.max(b));
    let normalized: Vec<f64> = if max - min < 1e-8 {
        vec![0.0; data.len()]
    } else {
        let scale = 1.0 / (max - min);
        data.iter().map(|v| (v - min) * scale).collect()
    };
    let (nh, nw, nd) = extents;

    Ok((
        LabeledVolume {
            image: Tensor::new(&[1, nh, nw, nd], normalized)?,
            labels,
            extents,
            spacing,
            class_prompts: vol.class_prompts.clone(),
        },
        info,
    ))
}

/// Nearest-neighbor label resampling under the same half-pixel convention
/// the trilinear path uses.
pub fn nearest_resize_labels(
    labels: &[u16],
    from: (usize, usize, usize),
    to: (usize, usize, usize),
) -> Vec<u16> {
    let (h, w, d) = from;
    let (oh, ow, od) = to;
    let mh = axis_map_nearest(h, oh);
    let mw = axis_map_nearest(w, ow);
    let md = axis_map_nearest(d, od);
    let mut out = Vec::with_capacity(oh * ow * od);
    for jh in 0..oh {
        for jw in 0..ow {
            for jd in 0..od {
                out.push(labels[(mh[jh] * w + mw[jw]) * d + md[jd]]);
            }
        }
    }
    out
}

/// Trilinear resample of a probability volume stored as raw values
/// (inference-side helper; no gradients involved).
pub fn resize_probabilities(
    values: &[f64],
    from: (usize, usize, usize),
    to: (usize, usize, usize),
) -> Vec<f64> {
    let t = Tensor::new(&[1, from.0, from.1, from.2], values.to_vec()).expect("finite values");
    t.trilinear_resize(to).expect("valid resize").data().to_vec()
}

// Silences the unused-import lint while keeping the type reachable for docs.
#[allow(unused)]
fn _axis_map_is_reexported(_: AxisMap) {}
