//! On-disk dataset layout: ESV1 volume pairs plus a JSON manifest.

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::formats::esv1::{read_esv1, write_esv1, Esv1Payload, Esv1Volume};
use crate::pipeline::data::LabeledVolume;
use crate::tensor::Tensor;

#[derive(Debug, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub id: String,
    pub image: String,
    pub labels: String,
    pub extents: (usize, usize, usize),
    pub spacing: (f64, f64, f64),
    pub classes: BTreeMap<u16, Vec<String>>,
}

#[derive(Debug, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub schema: String,
    pub seed: u64,
    pub volumes: Vec<ManifestEntry>,
}

/// Write volumes as `vol_NNN_image.esv1` / `vol_NNN_labels.esv1` pairs plus
/// `manifest.json`.
pub fn write_dataset(dir: &Path, seed: u64, volumes: &[LabeledVolume]) -> Result<()> {
    std::fs::create_dir_all(dir)?;
    let mut entries = Vec::with_capacity(volumes.len());
    for (i, vol) in volumes.iter().enumerate() {
        vol.validate()?;
        let id = format!("vol_{i:03}");
        let image_name = format!("{id}_image.esv1");
        let labels_name = format!("{id}_labels.esv1");
        let dims = (
            vol.extents.0 as u32,
            vol.extents.1 as u32,
            vol.extents.2 as u32,
        );
        let spacing = (
            vol.spacing.0 as f32,
            vol.spacing.1 as f32,
            vol.spacing.2 as f32,
        );
        write_esv1(
            &dir.join(&image_name),
            &Esv1Volume {
                dims,
                spacing,
                payload: Esv1Payload::ImageF32(
                    vol.image.data().iter().map(|&v| v as f32).collect(),
                ),
            },
        )?;
        write_esv1(
            &dir.join(&labels_name),
            &Esv1Volume {
                dims,
                spacing,
                payload: Esv1Payload::LabelsU16(vol.labels.clone()),
            },
        )?;
        entries.push(ManifestEntry {
            id,
            image: image_name,
            labels: labels_name,
            extents: vol.extents,
            spacing: vol.spacing,
            classes: vol.class_prompts.clone(),
        });
    }
    let manifest = DatasetManifest {
        schema: "esica-dataset-v1".to_string(),
        seed,
        volumes: entries,
    };
    std::fs::write(
        dir.join("manifest.json"),
        serde_json::to_string_pretty(&manifest)?,
    )?;
    Ok(())
}

pub fn read_manifest(dir: &Path) -> Result<DatasetManifest> {
    let path = dir.join("manifest.json");
    let text = std::fs::read_to_string(&path)
        .map_err(|e| Error::parse(path.display().to_string(), e.to_string()))?;
    let manifest: DatasetManifest = serde_json::from_str(&text)
        .map_err(|e| Error::parse(path.display().to_string(), e.to_string()))?;
    if manifest.schema != "esica-dataset-v1" {
        return Err(Error::parse(
            path.display().to_string(),
            format!("unknown schema {:?}", manifest.schema),
        ));
    }
    Ok(manifest)
}

/// Load a dataset directory written by [`write_dataset`].
pub fn read_dataset(dir: &Path) -> Result<Vec<LabeledVolume>> {
    let manifest = read_manifest(dir)?;
    let mut out = Vec::with_capacity(manifest.volumes.len());
    for entry in &manifest.volumes {
        let image = read_esv1(&dir.join(&entry.image))?;
        let labels = read_esv1(&dir.join(&entry.labels))?;
        let (h, w, d) = entry.extents;
        if image.dims != (h as u32, w as u32, d as u32) || labels.dims != image.dims {
            return Err(Error::parse(
                entry.image.clone(),
                format!("dims mismatch with the manifest entry {:?}", entry.id),
            ));
        }
        let image_values = match image.payload {
            Esv1Payload::ImageF32(v) => v.into_iter().map(|x| x as f64).collect::<Vec<_>>(),
            _ => {
                return Err(Error::parse(
                    entry.image.clone(),
                    "expected an f32 image payload".to_string(),
                ))
            }
        };
        let label_values = match labels.payload {
            Esv1Payload::LabelsU16(v) => v,
            _ => {
                return Err(Error::parse(
                    entry.labels.clone(),
                    "expected a u16 label payload".to_string(),
                ))
            }
        };
        out.push(LabeledVolume {
            image: Tensor::new(&[1, h, w, d], image_values)?,
            labels: label_values,
            extents: entry.extents,
            spacing: entry.spacing,
            class_prompts: entry.classes.clone(),
        });
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::pipeline::data::{synth_dataset, SynthOptions};

    #[test]
    fn dataset_round_trip_preserves_voxels_to_f32() {
        let dir = tempfile::tempdir().unwrap();
        let vols = synth_dataset(7, 2, &SynthOptions::default()).unwrap();
        write_dataset(dir.path(), 7, &vols).unwrap();
        let loaded = read_dataset(dir.path()).unwrap();
        assert_eq!(loaded.len(), 2);
        for (a, b) in vols.iter().zip(&loaded) {
            assert_eq!(a.labels, b.labels);
            assert_eq!(a.class_prompts, b.class_prompts);
            for (x, y) in a.image.data().iter().zip(b.image.data()) {
                assert_eq!(*x as f32, *y as f32);
            }
        }
    }

    #[test]
    fn written_directory_is_byte_identical_across_runs() {
        let a = tempfile::tempdir().unwrap();
        let b = tempfile::tempdir().unwrap();
        let vols = synth_dataset(9, 2, &SynthOptions::default()).unwrap();
        write_dataset(a.path(), 9, &vols).unwrap();
        let vols2 = synth_dataset(9, 2, &SynthOptions::default()).unwrap();
        write_dataset(b.path(), 9, &vols2).unwrap();
        for name in ["manifest.json", "vol_000_image.esv1", "vol_001_labels.esv1"] {
            assert_eq!(
                std::fs::read(a.path().join(name)).unwrap(),
                std::fs::read(b.path().join(name)).unwrap(),
                "{name}"
            );
        }
    }
}
