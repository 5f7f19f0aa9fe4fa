//! Run configuration: one TOML file covering the model, training, inference,
//! and preprocessing, with unknown keys rejected and cross-field checks at
//! parse time.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::decoder::MaskHeadKind;
use crate::error::{Error, Result};
use crate::model::ModelConfig;
use crate::pipeline::sample::TrainConfig;

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TextConfig {
    pub d_text: usize,
    /// "toy" or "table".
    pub provider: String,
    pub table_path: Option<PathBuf>,
}

impl Default for TextConfig {
    fn default() -> Self {
        TextConfig {
            d_text: 64,
            provider: "toy".to_string(),
            table_path: None,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct InferConfig {
    pub overlap: f64,
    pub threshold: f64,
}

impl Default for InferConfig {
    fn default() -> Self {
        InferConfig {
            overlap: 0.5,
            threshold: 0.5,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PreprocessConfig {
    pub target_spacing: (f64, f64, f64),
    /// Skip resampling (microscopy-style inputs).
    pub skip_resample: bool,
}

impl Default for PreprocessConfig {
    fn default() -> Self {
        PreprocessConfig {
            target_spacing: (1.5, 1.5, 1.5),
            skip_resample: false,
        }
    }
}

/// Everything a run needs, parsed from a single file.
#[derive(Debug, Clone, Serialize, Deserialize, Default)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub seed: u64,
    pub encoder: crate::encoder::EncoderConfig,
    pub fusion: crate::fusion::FusionConfig,
    pub decoder: crate::decoder::DecoderConfig,
    pub mask_head: MaskHeadKindConfig,
    pub text: TextConfig,
    pub train: TrainConfig,
    pub infer: InferConfig,
    pub preprocess: PreprocessConfig,
}

/// Serde-friendly mirror of [`MaskHeadKind`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum MaskHeadKindConfig {
    #[default]
    Similarity,
    ConvHead,
}

impl From<MaskHeadKindConfig> for MaskHeadKind {
    fn from(v: MaskHeadKindConfig) -> Self {
        match v {
            MaskHeadKindConfig::Similarity => MaskHeadKind::Similarity,
            MaskHeadKindConfig::ConvHead => MaskHeadKind::ConvHead,
        }
    }
}

impl RunConfig {
    pub fn model_config(&self) -> ModelConfig {
        ModelConfig {
            encoder: self.encoder.clone(),
            fusion: self.fusion.clone(),
            decoder: self.decoder.clone(),
            d_text: self.text.d_text,
            mask_head: self.mask_head.into(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.model_config().validate()?;
        self.train.validate()?;
        if !(0.0..1.0).contains(&self.infer.overlap) {
            return Err(Error::config(format!(
                "infer.overlap {} outside [0,1)",
                self.infer.overlap
            )));
        }
        if !(0.0..=1.0).contains(&self.infer.threshold) {
            return Err(Error::config(format!(
                "infer.threshold {} outside [0,1]",
                self.infer.threshold
            )));
        }
        let sp = self.preprocess.target_spacing;
        if sp.0 <= 0.0 || sp.1 <= 0.0 || sp.2 <= 0.0 {
            return Err(Error::config(
                "preprocess.target_spacing must be positive",
            ));
        }
        match self.text.provider.as_str() {
            "toy" => {}
            "table" => {
                if self.text.table_path.is_none() {
                    return Err(Error::config(
                        "text.provider = \"table\" requires text.table_path",
                    ));
                }
            }
            other => {
                return Err(Error::config(format!(
                    "text.provider must be \"toy\" or \"table\", got {other:?}"
                )))
            }
        }
        Ok(())
    }

    pub fn from_str_validated(text: &str, origin: &str) -> Result<RunConfig> {
        let cfg: RunConfig = toml::from_str(text)
            .map_err(|e| Error::parse(origin.to_string(), e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<RunConfig> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::parse(path.display().to_string(), e.to_string()))?;
        Self::from_str_validated(&text, &path.display().to_string())
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string_pretty(self).map_err(|e| Error::config(e.to_string()))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_config_takes_all_defaults() {
        let cfg = RunConfig::from_str_validated("", "mem").unwrap();
        assert_eq!(cfg.fusion.d_model, 192);
        assert_eq!(cfg.fusion.query_heads, 12);
        assert_eq!(cfg.encoder.stage_channels, vec![32, 64, 128]);
        assert_eq!(cfg.train.patch, (96, 96, 96));
        assert_eq!(cfg.text.d_text, 64);
    }

    #[test]
    fn unknown_keys_are_rejected_with_the_key_name() {
        let err = RunConfig::from_str_validated("voodoo = 3\n", "mem").unwrap_err();
        assert!(err.to_string().contains("voodoo"), "{err}");
        let err =
            RunConfig::from_str_validated("[fusion]\nd_model = 32\nbogus = 1\n", "mem").unwrap_err();
        assert!(err.to_string().contains("bogus"), "{err}");
    }

    #[test]
    fn cross_field_validation_names_the_field() {
        // d_model not divisible by query_heads.
        let err = RunConfig::from_str_validated(
            "[fusion]\nd_model = 100\nquery_heads = 12\nkv_heads = 4\n",
            "mem",
        )
        .unwrap_err();
        assert!(err.to_string().contains("d_model"), "{err}");
    }

    #[test]
    fn round_trips_through_toml() {
        let cfg = RunConfig::default();
        let text = cfg.to_toml().unwrap();
        let back = RunConfig::from_str_validated(&text, "mem").unwrap();
        assert_eq!(back.fusion.d_model, cfg.fusion.d_model);
        assert_eq!(back.train.lr, cfg.train.lr);
    }

    #[test]
    fn table_provider_requires_a_path() {
        let err = RunConfig::from_str_validated("[text]\nprovider = \"table\"\n", "mem")
            .unwrap_err();
        assert!(err.to_string().contains("table_path"), "{err}");
    }
}
