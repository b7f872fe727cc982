//! Experiment configuration file.
//!
//! A TOML document whose every key is optional. Top-level keys cover the run
//! and the model; component switches and their settings live in the
//! `deca`, `depa` and `focus` tables (dotted keys such as `deca.enabled = false`
//! work equally well). Unknown keys are rejected.

use std::fs;
use std::path::{Path, PathBuf};

use anyhow::Context;
use crossfuse_core::deca::{CmweKind, DecaConfig};
use crossfuse_core::depa::DepaConfig;
use crossfuse_core::model::{Modality, ModelConfig, TrainConfig};
use crossfuse_core::synth::SceneConfig;
use serde::{Deserialize, Serialize};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DecaSection {
    pub enabled: bool,
    pub cmwe_layers: usize,
    pub cmwe_kind: CmweKind,
    pub se_reduction: usize,
}

impl Default for DecaSection {
    fn default() -> Self {
        let d = DecaConfig::default();
        Self {
            enabled: true,
            cmwe_layers: d.cmwe_layers,
            cmwe_kind: d.cmwe_kind,
            se_reduction: d.se_reduction,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DepaSection {
    pub enabled: bool,
    pub k1: usize,
    pub k2: usize,
}

impl Default for DepaSection {
    fn default() -> Self {
        let d = DepaConfig::default();
        Self {
            enabled: true,
            k1: d.k1,
            k2: d.k2,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct FocusSection {
    pub enabled: bool,
}

impl Default for FocusSection {
    fn default() -> Self {
        Self { enabled: true }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DatasetSection {
    pub root: PathBuf,
    pub n_train: usize,
    pub n_val: usize,
    pub n_test: usize,
}

impl Default for DatasetSection {
    fn default() -> Self {
        Self {
            root: PathBuf::from("data"),
            n_train: 200,
            n_val: 60,
            n_test: 60,
        }
    }
}

/// Scene generator settings; the image size comes from the top level.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SceneSection {
    pub min_objects: usize,
    pub max_objects: usize,
    pub min_illumination: f64,
    pub max_illumination: f64,
    pub min_size: f64,
    pub max_size: f64,
    pub noise_sigma: f64,
}

impl Default for SceneSection {
    fn default() -> Self {
        let s = SceneConfig::default();
        Self {
            min_objects: s.min_objects,
            max_objects: s.max_objects,
            min_illumination: s.min_illumination,
            max_illumination: s.max_illumination,
            min_size: s.min_size,
            max_size: s.max_size,
            noise_sigma: s.noise_sigma,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct OutSection {
    pub dir: PathBuf,
}

impl Default for OutSection {
    fn default() -> Self {
        Self {
            dir: PathBuf::from("runs/default"),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ExperimentConfig {
    pub seed: u64,
    pub image_size: usize,
    pub width: usize,
    pub num_classes: usize,
    pub modality: Modality,
    pub epochs: usize,
    pub batch: usize,
    pub lr_init: f64,
    pub lr_final: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    pub flip: bool,
    pub deca: DecaSection,
    pub depa: DepaSection,
    pub focus: FocusSection,
    pub scene: SceneSection,
    pub dataset: DatasetSection,
    pub out: OutSection,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        let t = TrainConfig::default();
        Self {
            seed: t.seed,
            image_size: t.model.image_size,
            width: t.model.width,
            num_classes: t.model.num_classes,
            modality: t.model.modality,
            epochs: t.epochs,
            batch: t.batch,
            lr_init: t.lr_init,
            lr_final: t.lr_final,
            momentum: t.momentum,
            weight_decay: t.weight_decay,
            flip: t.flip,
            deca: DecaSection::default(),
            depa: DepaSection::default(),
            focus: FocusSection::default(),
            scene: SceneSection::default(),
            dataset: DatasetSection::default(),
            out: OutSection::default(),
        }
    }
}

impl ExperimentConfig {
    pub fn parse(text: &str) -> anyhow::Result<Self> {
        let cfg: Self = toml::from_str(text)?;
        cfg.train()?;
        cfg.scene().validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> anyhow::Result<Self> {
        let text = fs::read_to_string(path).with_context(|| format!("reading config {}", path.display()))?;
        Self::parse(&text).with_context(|| format!("in config {}", path.display()))
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serialises")
    }

    /// Validated training configuration.
    pub fn train(&self) -> anyhow::Result<TrainConfig> {
        let cfg = TrainConfig {
            model: ModelConfig {
                image_size: self.image_size,
                width: self.width,
                num_classes: self.num_classes,
                modality: self.modality,
                use_deca: self.deca.enabled,
                use_depa: self.depa.enabled,
                use_focus: self.focus.enabled,
                deca: DecaConfig {
                    cmwe_layers: self.deca.cmwe_layers,
                    cmwe_kind: self.deca.cmwe_kind,
                    se_reduction: self.deca.se_reduction,
                },
                depa: DepaConfig {
                    k1: self.depa.k1,
                    k2: self.depa.k2,
                },
            },
            seed: self.seed,
            epochs: self.epochs,
            batch: self.batch,
            lr_init: self.lr_init,
            lr_final: self.lr_final,
            momentum: self.momentum,
            weight_decay: self.weight_decay,
            flip: self.flip,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn scene(&self) -> SceneConfig {
        let s = &self.scene;
        SceneConfig {
            image_size: self.image_size,
            min_objects: s.min_objects,
            max_objects: s.max_objects,
            min_illumination: s.min_illumination,
            max_illumination: s.max_illumination,
            min_size: s.min_size,
            max_size: s.max_size,
            noise_sigma: s.noise_sigma,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_document_gives_defaults() {
        assert_eq!(ExperimentConfig::parse("").unwrap(), ExperimentConfig::default());
    }

    #[test]
    fn dotted_and_table_forms_agree() {
        let a = ExperimentConfig::parse("deca.enabled = false\nfocus.enabled = false\n").unwrap();
        let b = ExperimentConfig::parse("[deca]\nenabled = false\n[focus]\nenabled = false\n").unwrap();
        assert_eq!(a, b);
        assert!(!a.train().unwrap().model.use_deca);
    }

    #[test]
    fn unknown_keys_rejected() {
        assert!(ExperimentConfig::parse("epoch = 3").is_err());
        assert!(ExperimentConfig::parse("[depa]\nk3 = 5").is_err());
    }

    #[test]
    fn echo_parses_back() {
        let cfg = ExperimentConfig {
            seed: 7,
            modality: Modality::Infrared,
            ..Default::default()
        };
        assert_eq!(ExperimentConfig::parse(&cfg.to_toml()).unwrap(), cfg);
    }

    #[test]
    fn invalid_values_rejected() {
        assert!(ExperimentConfig::parse("image_size = 100").is_err());
        assert!(ExperimentConfig::parse("lr_final = 1.0").is_err());
        assert!(ExperimentConfig::parse("[depa]\nk1 = 4").is_err());
    }
}
