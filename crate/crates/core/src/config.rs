//! Run configuration: strict TOML with every stage keyed off one seed.

use crate::activations::ActKind;
use crate::defense::{DefenseConfig, DefenseMethod};
use crate::error::{Error, Result};
use crate::poison::{AttackKind, PoisonSpec, TriggerParams};
use serde::{Deserialize, Serialize};
use std::path::PathBuf;

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub seed: u64,
    #[serde(default)]
    pub output_dir: Option<PathBuf>,
    pub dataset: DatasetConfig,
    #[serde(default)]
    pub attack: AttackConfig,
    #[serde(default)]
    pub victim: VictimConfig,
    #[serde(default)]
    pub defense: DefenseSection,
}

impl RunConfig {
    pub fn from_toml_str(s: &str) -> Result<RunConfig> {
        let cfg: RunConfig = toml::from_str(s).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn from_path(path: &std::path::Path) -> Result<RunConfig> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        Self::from_toml_str(&text)
    }

    pub fn validate(&self) -> Result<()> {
        self.dataset.validate()?;
        self.attack.validate()?;
        if self.defense.learning_rate.values().is_empty() {
            return Err(Error::Config("defense.learning_rate sweep must not be empty".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DatasetSource {
    Synthetic,
    Idx,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetConfig {
    pub source: DatasetSource,
    #[serde(default = "defaults::classes")]
    pub classes: usize,
    #[serde(default = "defaults::side")]
    pub height: usize,
    #[serde(default = "defaults::side")]
    pub width: usize,
    #[serde(default = "defaults::n_train")]
    pub n_train: usize,
    #[serde(default = "defaults::n_test")]
    pub n_test: usize,
    #[serde(default)]
    pub train_images: Option<PathBuf>,
    #[serde(default)]
    pub train_labels: Option<PathBuf>,
    #[serde(default)]
    pub test_images: Option<PathBuf>,
    #[serde(default)]
    pub test_labels: Option<PathBuf>,
}

impl DatasetConfig {
    fn validate(&self) -> Result<()> {
        if self.source == DatasetSource::Idx {
            for (name, path) in [
                ("train_images", &self.train_images),
                ("train_labels", &self.train_labels),
                ("test_images", &self.test_images),
                ("test_labels", &self.test_labels),
            ] {
                if path.is_none() {
                    return Err(Error::Config(format!(
                        "dataset.source = \"idx\" requires dataset.{name}"
                    )));
                }
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum AttackChoice {
    None,
    Badnet,
    Blended,
    Sig,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AttackConfig {
    pub kind: AttackChoice,
    #[serde(default = "defaults::poisoning_ratio")]
    pub poisoning_ratio: f32,
    #[serde(default)]
    pub target_label: u32,
    #[serde(default)]
    pub badnet: Option<BadnetParams>,
    #[serde(default)]
    pub blended: Option<BlendedParams>,
    #[serde(default)]
    pub sig: Option<SigParams>,
}

impl Default for AttackConfig {
    fn default() -> Self {
        AttackConfig {
            kind: AttackChoice::None,
            poisoning_ratio: defaults::poisoning_ratio(),
            target_label: 0,
            badnet: None,
            blended: None,
            sig: None,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BadnetParams {
    #[serde(default = "defaults::patch_size")]
    pub patch_size: usize,
    #[serde(default = "defaults::patch_value")]
    pub patch_value: f32,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BlendedParams {
    #[serde(default = "defaults::blend_weight")]
    pub blend_weight: f32,
    #[serde(default = "defaults::key_seed")]
    pub key_seed: u64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SigParams {
    #[serde(default = "defaults::sig_amplitude")]
    pub amplitude: f32,
    #[serde(default = "defaults::sig_frequency")]
    pub frequency: u32,
}

impl AttackConfig {
    fn validate(&self) -> Result<()> {
        match self.kind {
            AttackChoice::None if self.badnet.is_some() || self.blended.is_some() || self.sig.is_some() => {
                Err(Error::Config("attack.kind = \"none\" but trigger parameters are set".into()))
            }
            _ => Ok(()),
        }
    }

    /// None when the run is attack-free.
    pub fn to_spec(&self) -> Option<PoisonSpec> {
        let trigger = match self.kind {
            AttackChoice::None => return None,
            AttackChoice::Badnet => {
                let p = self.badnet.clone().unwrap_or(BadnetParams {
                    patch_size: defaults::patch_size(),
                    patch_value: defaults::patch_value(),
                });
                TriggerParams::Patch { size: p.patch_size, value: p.patch_value }
            }
            AttackChoice::Blended => {
                let p = self.blended.clone().unwrap_or(BlendedParams {
                    blend_weight: defaults::blend_weight(),
                    key_seed: defaults::key_seed(),
                });
                TriggerParams::Blend { key_seed: p.key_seed, blend_weight: p.blend_weight }
            }
            AttackChoice::Sig => {
                let p = self.sig.clone().unwrap_or(SigParams {
                    amplitude: defaults::sig_amplitude(),
                    frequency: defaults::sig_frequency(),
                });
                TriggerParams::Sinusoid { amplitude: p.amplitude, frequency: p.frequency }
            }
        };
        let attack = match self.kind {
            AttackChoice::Badnet => AttackKind::Badnet,
            AttackChoice::Blended => AttackKind::Blended,
            AttackChoice::Sig => AttackKind::Sig,
            AttackChoice::None => unreachable!(),
        };
        Some(PoisonSpec {
            attack,
            poisoning_ratio: self.poisoning_ratio,
            target_label: self.target_label,
            trigger,
        })
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct VictimConfig {
    #[serde(default = "defaults::arch")]
    pub arch: String,
    #[serde(default = "defaults::activation")]
    pub activation: ActKind,
    #[serde(default = "defaults::victim_epochs")]
    pub epochs: usize,
    #[serde(default = "defaults::victim_batch")]
    pub batch_size: usize,
    #[serde(default = "defaults::victim_lr")]
    pub learning_rate: f32,
    #[serde(default = "defaults::momentum")]
    pub momentum: f32,
}

impl Default for VictimConfig {
    fn default() -> Self {
        VictimConfig {
            arch: defaults::arch(),
            activation: defaults::activation(),
            epochs: defaults::victim_epochs(),
            batch_size: defaults::victim_batch(),
            learning_rate: defaults::victim_lr(),
            momentum: defaults::momentum(),
        }
    }
}

/// A single learning rate or a sweep list.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum LearningRate {
    Single(f32),
    Sweep(Vec<f32>),
}

impl LearningRate {
    pub fn values(&self) -> Vec<f32> {
        match self {
            LearningRate::Single(v) => vec![*v],
            LearningRate::Sweep(vs) => vs.clone(),
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DefenseSection {
    #[serde(default = "defaults::method")]
    pub method: DefenseMethod,
    #[serde(default = "defaults::benign_fraction")]
    pub benign_fraction: f32,
    #[serde(default = "defaults::lambda")]
    pub lambda: f32,
    #[serde(default = "defaults::defense_epochs")]
    pub epochs: usize,
    #[serde(default = "defaults::defense_batch")]
    pub batch_size: usize,
    #[serde(default = "defaults::momentum")]
    pub momentum: f32,
    #[serde(default = "defaults::defense_lr")]
    pub learning_rate: LearningRate,
    #[serde(default = "defaults::k_last_blocks")]
    pub k_last_blocks: usize,
    #[serde(default = "defaults::alpha_threshold")]
    pub alpha_threshold: f32,
    #[serde(default)]
    pub restore_epochs: usize,
}

impl Default for DefenseSection {
    fn default() -> Self {
        DefenseSection {
            method: defaults::method(),
            benign_fraction: defaults::benign_fraction(),
            lambda: defaults::lambda(),
            epochs: defaults::defense_epochs(),
            batch_size: defaults::defense_batch(),
            momentum: defaults::momentum(),
            learning_rate: defaults::defense_lr(),
            k_last_blocks: defaults::k_last_blocks(),
            alpha_threshold: defaults::alpha_threshold(),
            restore_epochs: 0,
        }
    }
}

impl DefenseSection {
    pub fn to_defense_config(&self, learning_rate: f32, seed: u64) -> DefenseConfig {
        DefenseConfig {
            method: self.method,
            benign_fraction: self.benign_fraction,
            lambda: self.lambda,
            epochs: self.epochs,
            batch_size: self.batch_size,
            momentum: self.momentum,
            learning_rate,
            k_last_blocks: self.k_last_blocks,
            alpha_threshold: self.alpha_threshold,
            seed,
            restore_epochs: self.restore_epochs,
        }
    }
}

mod defaults {
    use super::*;

    pub fn classes() -> usize { 4 }
    pub fn side() -> usize { 16 }
    pub fn n_train() -> usize { 8000 }
    pub fn n_test() -> usize { 2000 }
    pub fn poisoning_ratio() -> f32 { 0.1 }
    pub fn patch_size() -> usize { 3 }
    pub fn patch_value() -> f32 { 1.0 }
    pub fn blend_weight() -> f32 { 0.2 }
    pub fn key_seed() -> u64 { 0x4b4559 }
    pub fn sig_amplitude() -> f32 { 20.0 / 255.0 }
    pub fn sig_frequency() -> u32 { 6 }
    pub fn arch() -> String { "desk-cnn".into() }
    pub fn activation() -> ActKind { ActKind::Prelu }
    pub fn victim_epochs() -> usize { 12 }
    pub fn victim_batch() -> usize { 64 }
    pub fn victim_lr() -> f32 { 0.05 }
    pub fn momentum() -> f32 { 0.9 }
    pub fn method() -> DefenseMethod { DefenseMethod::Mergeguard }
    pub fn benign_fraction() -> f32 { 0.05 }
    pub fn lambda() -> f32 { 1.0 }
    pub fn defense_epochs() -> usize { 20 }
    pub fn defense_batch() -> usize { 128 }
    pub fn defense_lr() -> LearningRate { LearningRate::Single(0.1) }
    pub fn k_last_blocks() -> usize { 1 }
    pub fn alpha_threshold() -> f32 { 0.99 }
}
