//! Scale profiles and the experiment configuration.

use std::fmt;
use std::path::PathBuf;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::fusion::GateMode;
use crate::model::{ModelConfig, Variant};
use crate::skeleton::SkeletonEncoderConfig;
use crate::synth::SynthConfig;
use crate::visual::VitConfig;

/// Desk-scale shapes for training, paper-faithful shapes for the forward
/// smoke test.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Profile {
    Toy,
    PaperShape,
}

impl Profile {
    pub fn vit(&self) -> VitConfig {
        match self {
            Profile::Toy => VitConfig {
                image_size: 64,
                patch_size: 16,
                channels: 3,
                width: 32,
                depth: 4,
                heads: 4,
                proj_dim: 32,
                frozen_prefix: 2,
            },
            Profile::PaperShape => VitConfig {
                image_size: 224,
                patch_size: 16,
                channels: 3,
                width: 768,
                depth: 12,
                heads: 12,
                proj_dim: 512,
                frozen_prefix: 10,
            },
        }
    }

    pub fn skeleton(&self) -> SkeletonEncoderConfig {
        match self {
            Profile::Toy => SkeletonEncoderConfig {
                canvas: 16,
                sigma_px: 2.5,
                stage_channels: [8, 16, 32],
                identity_activation: false,
            },
            Profile::PaperShape => SkeletonEncoderConfig {
                canvas: 256,
                sigma_px: 2.5,
                stage_channels: [64, 128, 256],
                identity_activation: false,
            },
        }
    }

    /// Relevance scale: one patch pitch in normalized coordinates.
    pub fn sigma_rel(&self) -> f64 {
        let vit = self.vit();
        vit.patch_size as f64 / vit.image_size as f64
    }

    pub fn default_classes(&self) -> usize {
        match self {
            Profile::Toy => 12,
            Profile::PaperShape => 33,
        }
    }

    pub fn synth(&self) -> SynthConfig {
        match self {
            Profile::Toy => SynthConfig::default(),
            Profile::PaperShape => SynthConfig {
                canvas: 224,
                ..SynthConfig::default()
            },
        }
    }
}

impl FromStr for Profile {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "toy" => Ok(Profile::Toy),
            "paper-shape" => Ok(Profile::PaperShape),
            other => Err(Error::config(format!(
                "unknown profile '{other}' (expected toy|paper-shape)"
            ))),
        }
    }
}

impl fmt::Display for Profile {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Profile::Toy => "toy",
            Profile::PaperShape => "paper-shape",
        })
    }
}

/// Everything a run needs; a run is reproducible from (config, seed).
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct ExperimentConfig {
    pub profile: Profile,
    pub variant: Variant,
    pub seed: u64,
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub gate_mode: GateMode,
    pub motion_weighting: bool,
    pub learned_qkv: bool,
    /// Override of the profile's relevance scale.
    pub sigma_rel: Option<f64>,
    /// Seeds trained per variant by the ablation runner.
    pub ablation_seeds: Vec<u64>,
    pub synth: SynthConfig,
    /// Dataset directory; absent means clips are generated in memory.
    pub data_dir: Option<PathBuf>,
    pub out_dir: PathBuf,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig {
            profile: Profile::Toy,
            variant: Variant::Full,
            seed: 1,
            epochs: 8,
            batch_size: 32,
            learning_rate: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            gate_mode: GateMode::Literal,
            motion_weighting: false,
            learned_qkv: false,
            sigma_rel: None,
            ablation_seeds: vec![1, 2, 3],
            synth: SynthConfig::default(),
            data_dir: None,
            out_dir: PathBuf::from("runs"),
        }
    }
}

impl ExperimentConfig {
    pub fn load(path: &std::path::Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        serde_json::from_str(&text).map_err(|e| Error::config(format!("config file: {e}")))
    }

    pub fn model_config(&self, classes: usize) -> ModelConfig {
        ModelConfig {
            vit: self.profile.vit(),
            skeleton: self.profile.skeleton(),
            classes,
            sigma_rel: self.sigma_rel.unwrap_or_else(|| self.profile.sigma_rel()),
            gate_mode: self.gate_mode,
            motion_weighting: self.motion_weighting,
            learned_qkv: self.learned_qkv,
            variant: self.variant,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 || self.epochs == 0 {
            return Err(Error::config("batch_size and epochs must be positive"));
        }
        if !(self.learning_rate > 0.0) {
            return Err(Error::config("learning rate must be positive"));
        }
        if self.ablation_seeds.is_empty() {
            return Err(Error::config("need at least one ablation seed"));
        }
        self.synth.validate()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn profiles_parse_and_produce_valid_model_configs() {
        for p in ["toy", "paper-shape"] {
            let profile: Profile = p.parse().unwrap();
            let cfg = ExperimentConfig {
                profile,
                ..Default::default()
            };
            cfg.model_config(profile.default_classes()).validate().unwrap();
        }
        assert!("gigantic".parse::<Profile>().is_err());
    }

    #[test]
    fn paper_shape_matches_published_arithmetic() {
        let vit = Profile::PaperShape.vit();
        assert_eq!(vit.patches(), 196);
        assert_eq!(vit.tokens(), 197);
        assert_eq!(vit.proj_dim, 512);
        assert_eq!(vit.depth, 12);
        assert_eq!(vit.frozen_prefix, 10);
        let skel = Profile::PaperShape.skeleton();
        assert_eq!(skel.stage_channels, [64, 128, 256]);
        assert_eq!(skel.descriptor_dim(), 256);
        assert_eq!(skel.canvas, 256);
        assert!((Profile::PaperShape.sigma_rel() - 16.0 / 224.0).abs() < 1e-12);
    }

    #[test]
    fn config_round_trips_through_json() {
        let cfg = ExperimentConfig::default();
        let text = serde_json::to_string(&cfg).unwrap();
        let back: ExperimentConfig = serde_json::from_str(&text).unwrap();
        assert_eq!(back.batch_size, cfg.batch_size);
        assert_eq!(back.profile, cfg.profile);
        // Partial configs fill in defaults.
        let partial: ExperimentConfig =
            serde_json::from_str(r#"{"epochs": 3, "seed": 42}"#).unwrap();
        assert_eq!(partial.epochs, 3);
        assert_eq!(partial.seed, 42);
        assert_eq!(partial.batch_size, 32);
    }
}
