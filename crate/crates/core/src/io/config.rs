//! The JSON run configuration. Every section is optional and falls back to
//! the library defaults; unknown keys anywhere are rejected with the path of
//! the offending field.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::block::{PlacementKind, TransformPlacementConfig};
use crate::error::{Error, Result};
use crate::linalg::PrecisionScheme;
use crate::optimizer::{NextBlockInput, OptimizerConfig, StepSchedule};
use crate::quant::QuantConfig;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub model: ModelDims,
    pub quantization: QuantizationSection,
    pub placements: PlacementSection,
    pub mask: MaskSection,
    pub optimizer: OptimizerSection,
    pub precision: PrecisionScheme,
    pub calibration: CalibrationSource,
}

/// Shape of the synthetic model; ignored when a model file is supplied.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelDims {
    pub hidden: usize,
    pub heads: usize,
    pub blocks: usize,
    pub seed: u64,
}

impl Default for ModelDims {
    fn default() -> Self {
        ModelDims {
            hidden: 64,
            heads: 4,
            blocks: 1,
            seed: 42,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct QuantizationSection {
    pub weight: Option<QuantConfig>,
    pub activation: Option<QuantConfig>,
}

impl Default for QuantizationSection {
    fn default() -> Self {
        QuantizationSection {
            weight: Some(QuantConfig::weight(4)),
            activation: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PlacementSection {
    pub pre_qkv: PlacementKind,
    pub pre_out_proj: PlacementKind,
    pub pre_fc1: PlacementKind,
    pub shift: bool,
    /// Never valid; present so the error can say why.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub pre_fc2: Option<serde_json::Value>,
}

impl Default for PlacementSection {
    fn default() -> Self {
        let d = TransformPlacementConfig::default();
        PlacementSection {
            pre_qkv: d.pre_qkv,
            pre_out_proj: d.pre_out_proj,
            pre_fc1: d.pre_fc1,
            shift: d.shift,
            pre_fc2: None,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct MaskSection {
    /// Epoch count `t`; the band reaches full width at the last epoch.
    pub epochs: usize,
    /// Stability factor; absent means the size-based default.
    pub alpha: Option<f64>,
    pub enforce_alpha_bound: bool,
}

impl Default for MaskSection {
    fn default() -> Self {
        let d = OptimizerConfig::default();
        MaskSection {
            epochs: d.epochs,
            alpha: d.alpha,
            enforce_alpha_bound: d.enforce_alpha_bound,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct OptimizerSection {
    pub lr_affine: f64,
    pub lr_clip: f64,
    pub adam_beta1: f64,
    pub adam_beta2: f64,
    pub adam_eps: f64,
    pub seed: u64,
    pub next_block_input: NextBlockInput,
    pub step: StepSchedule,
    pub last_block_epochs: Option<usize>,
    pub migration_exponent: f64,
}

impl Default for OptimizerSection {
    fn default() -> Self {
        let d = OptimizerConfig::default();
        OptimizerSection {
            lr_affine: d.lr_affine,
            lr_clip: d.lr_clip,
            adam_beta1: d.adam_beta1,
            adam_beta2: d.adam_beta2,
            adam_eps: d.adam_eps,
            seed: d.seed,
            next_block_input: d.next_block_input,
            step: d.step,
            last_block_epochs: d.last_block_epochs,
            migration_exponent: d.migration_exponent,
        }
    }
}

/// Where calibration activations come from.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case", deny_unknown_fields)]
pub enum CalibrationSource {
    /// Pre-tokenized ids (a container holding a `u16` tensor `ids`, shaped
    /// `[batches, tokens]` or `[tokens]`), embedded through a seeded random
    /// table.
    File {
        path: PathBuf,
        embedding_seed: u64,
        #[serde(default = "default_vocab")]
        vocab: usize,
    },
    Synthetic { seed: u64, batches: usize, tokens: usize },
}

fn default_vocab() -> usize {
    50272
}

impl Default for CalibrationSource {
    fn default() -> Self {
        CalibrationSource::Synthetic {
            seed: 42,
            batches: 8,
            tokens: 128,
        }
    }
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            model: ModelDims::default(),
            quantization: QuantizationSection::default(),
            placements: PlacementSection::default(),
            mask: MaskSection::default(),
            optimizer: OptimizerSection::default(),
            precision: PrecisionScheme::Double,
            calibration: CalibrationSource::default(),
        }
    }
}

impl RunConfig {
    pub fn from_json(text: &str) -> Result<Self> {
        let de = &mut serde_json::Deserializer::from_str(text);
        let cfg: RunConfig = serde_path_to_error::deserialize(de).map_err(|e| {
            let path = e.path().to_string();
            Error::Config(format!("{path}: {}", e.into_inner()))
        })?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json(&text)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }

    pub fn validate(&self) -> Result<()> {
        if self.placements.pre_fc2.is_some() {
            return Err(Error::Config(
                "placements.pre_fc2: no transform is learned before fc2; the GELU between fc1 and fc2 \
                 means an inverse could not be folded into fc1"
                    .into(),
            ));
        }
        let m = &self.model;
        if m.hidden == 0 || m.heads == 0 || m.blocks == 0 || !m.hidden.is_multiple_of(m.heads) {
            return Err(Error::Config(format!(
                "model: hidden ({}) must be a positive multiple of heads ({}), with at least one block",
                m.hidden, m.heads
            )));
        }
        if let CalibrationSource::Synthetic { batches, tokens, .. } = self.calibration {
            if batches == 0 || tokens == 0 {
                return Err(Error::Config("calibration: batches and tokens must be positive".into()));
            }
        }
        self.placement()?;
        self.optimizer().validate()
    }

    /// Placement and quantization settings, resolved.
    pub fn placement(&self) -> Result<TransformPlacementConfig> {
        TransformPlacementConfig {
            pre_qkv: self.placements.pre_qkv,
            pre_out_proj: self.placements.pre_out_proj,
            pre_fc1: self.placements.pre_fc1,
            shift: self.placements.shift,
            weight_quant: self.quantization.weight,
            act_quant: self.quantization.activation,
        }
        .resolve()
    }

    pub fn optimizer(&self) -> OptimizerConfig {
        let o = &self.optimizer;
        OptimizerConfig {
            epochs: self.mask.epochs,
            last_block_epochs: o.last_block_epochs,
            lr_affine: o.lr_affine,
            lr_clip: o.lr_clip,
            adam_beta1: o.adam_beta1,
            adam_beta2: o.adam_beta2,
            adam_eps: o.adam_eps,
            alpha: self.mask.alpha,
            enforce_alpha_bound: self.mask.enforce_alpha_bound,
            seed: o.seed,
            next_block_input: o.next_block_input,
            precision: self.precision,
            migration_exponent: o.migration_exponent,
            step: o.step,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_object_is_the_default() {
        assert_eq!(RunConfig::from_json("{}").unwrap(), RunConfig::default());
        assert_eq!(RunConfig::default().optimizer(), OptimizerConfig::default());
        assert_eq!(RunConfig::default().placement().unwrap(), TransformPlacementConfig::default());
    }

    #[test]
    fn serialized_default_parses_back() {
        let c = RunConfig::default();
        assert_eq!(RunConfig::from_json(&c.to_json()).unwrap(), c);
    }

    #[test]
    fn unknown_keys_report_their_path() {
        let err = RunConfig::from_json(r#"{"optimizer": {"lr": 1}}"#).unwrap_err().to_string();
        assert!(err.contains("optimizer.lr"), "{err}");
        let err = RunConfig::from_json(r#"{"quantization": {"weight": {"bits": 4, "granularity": "per-channel", "x": 1}}}"#)
            .unwrap_err()
            .to_string();
        assert!(err.contains("quantization.weight"), "{err}");
    }

    #[test]
    fn pre_fc2_is_explained() {
        let err = RunConfig::from_json(r#"{"placements": {"pre_fc2": "diagonal-only"}}"#).unwrap_err().to_string();
        assert!(err.contains("pre_fc2") && err.contains("GELU"), "{err}");
    }

    #[test]
    fn semantic_validation() {
        assert!(RunConfig::from_json(r#"{"model": {"hidden": 10, "heads": 4}}"#).is_err());
        assert!(RunConfig::from_json(r#"{"mask": {"epochs": 0}}"#).is_err());
        assert!(RunConfig::from_json(r#"{"placements": {"pre_out_proj": "full"}}"#).is_err());
        assert!(RunConfig::from_json(r#"{"calibration": {"synthetic": {"seed": 1, "batches": 0, "tokens": 4}}}"#).is_err());
        let c = RunConfig::from_json(r#"{"mask": {"alpha": 0}, "precision": "float-double"}"#).unwrap();
        assert_eq!(c.optimizer().alpha, Some(0.0));
        assert_eq!(c.optimizer().precision, PrecisionScheme::FloatDouble);
    }
}
