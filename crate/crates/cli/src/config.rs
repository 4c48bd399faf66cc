use std::fs;
use std::path::{Path, PathBuf};

use inkline::augment::AugmentConfig;
use inkline::convnets::Family;
use inkline::normalize::NormalizeConfig;
use inkline::seq2seq::{CellKind, EncoderConfig, FeatureMode, ModelConfig};
use inkline::train::TrainConfig;
use serde::{Deserialize, Serialize};

use crate::CliError;

/// How images are prepared before reaching the model.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Preprocess {
    /// Full normalization chain.
    #[default]
    Normalize,
    /// Crop, resize and pad only.
    Resize,
}

/// Experiment description read from a JSON file. Every section is optional
/// and unknown keys are rejected.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub seed: u64,
    pub preprocess: Preprocess,
    pub normalize: NormalizeConfig,
    pub augment: AugmentConfig,
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub lexicon: Option<PathBuf>,
}

pub fn default_model(image_height: usize) -> ModelConfig {
    ModelConfig {
        image_height,
        reader: Family::LeNet,
        reader_blocks: 2,
        features: FeatureMode::Patches { width: 10, step: 2 },
        encoder: EncoderConfig {
            cell: CellKind::Gru,
            size: 64,
            layers: 1,
            bidirectional: true,
            learned_initial_state: false,
        },
        attention_size: 64,
        dropout: 0.0,
    }
}

impl Default for RunConfig {
    fn default() -> Self {
        let normalize = NormalizeConfig::default();
        Self {
            seed: 0,
            preprocess: Preprocess::default(),
            model: default_model(normalize.target_height),
            normalize,
            augment: AugmentConfig::default(),
            train: TrainConfig::default(),
            lexicon: None,
        }
    }
}

impl RunConfig {
    pub fn load(path: Option<&Path>) -> Result<Self, CliError> {
        let Some(path) = path else {
            return Ok(Self::default());
        };
        let text = fs::read_to_string(path)
            .map_err(|e| CliError::Data(format!("cannot read {}: {e}", path.display())))?;
        serde_json::from_str(&text)
            .map_err(|e| CliError::Usage(format!("invalid config {}: {e}", path.display())))
    }

    /// Pushes the run seed into every seeded section.
    pub fn apply_seed(&mut self, seed: u64) {
        self.seed = seed;
        self.normalize.seed = seed;
        self.augment.seed = seed;
        self.train.seed = seed;
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn unknown_keys_rejected() {
        assert!(serde_json::from_str::<RunConfig>(r#"{"seed": 1, "bogus": 2}"#).is_err());
        assert!(serde_json::from_str::<RunConfig>(r#"{"train": {"lr": 0.1}}"#).is_err());
    }

    #[test]
    fn partial_config_fills_defaults() {
        let cfg: RunConfig =
            serde_json::from_str(r#"{"seed": 9, "preprocess": "resize"}"#).unwrap();
        assert_eq!(cfg.preprocess, Preprocess::Resize);
        assert_eq!(cfg.train, TrainConfig::default());
    }

    #[test]
    fn seed_reaches_every_section() {
        let mut cfg = RunConfig::default();
        cfg.apply_seed(42);
        assert_eq!(
            (cfg.normalize.seed, cfg.augment.seed, cfg.train.seed),
            (42, 42, 42)
        );
        let back: RunConfig = serde_json::from_str(&cfg.to_json()).unwrap();
        assert_eq!(back, cfg);
    }
}
