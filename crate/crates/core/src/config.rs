//! Experiment configuration: one JSON document drives data generation,
//! pretraining, fine-tuning, and evaluation, and is copied verbatim into
//! every output directory it produces.

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::model::{ModelConfig, PromptConfig};
use crate::synth::{default_centers, CenterSpec};
use crate::tuning::{LossKind, OptimizerConfig, TuningStrategy};

pub const SCHEMA_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ExperimentConfig {
    pub schema_version: u32,
    pub model: ModelConfig,
    pub prompt: PromptConfig,
    /// Per-strategy optimizer overrides keyed by strategy name; strategies
    /// not listed fall back to the built-in defaults.
    #[serde(default)]
    pub optimizers: BTreeMap<String, OptimizerConfig>,
    pub centers: Vec<CenterSpec>,
    pub folds: usize,
    /// Training-crop edge length; must equal the model's (cubic) input.
    pub crop: usize,
    pub loss: LossKind,
    pub split_seed: u64,
    /// Global seed; all component randomness derives from it by role tag.
    pub seed: u64,
}

impl ExperimentConfig {
    /// Desk-scale defaults: seven 24³ centers, 16³ crops, a small model.
    pub fn desk_default() -> Self {
        let model = ModelConfig {
            spatial: [16, 16, 16],
            in_channels: 2,
            patch: 4,
            embed_dim: 32,
            layers: 4,
            heads: 4,
            mlp_dim: 64,
            num_classes: 3,
            skip_layers: vec![2, 4],
            decoder_channels: vec![16],
            final_channels: 8,
        };
        let prompt = PromptConfig::deep_default_sites(&model, 4);
        ExperimentConfig {
            schema_version: SCHEMA_VERSION,
            model,
            prompt,
            optimizers: BTreeMap::new(),
            centers: default_centers(10, [24, 24, 24], 1000),
            folds: 5,
            crop: 16,
            loss: LossKind::Dice,
            split_seed: 7,
            seed: 42,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.schema_version != SCHEMA_VERSION {
            return Err(Error::Config(format!(
                "unsupported schema version {} (expected {SCHEMA_VERSION})",
                self.schema_version
            )));
        }
        self.model.validate()?;
        self.prompt.validate(&self.model)?;
        if self.model.spatial != [self.crop; 3] {
            return Err(Error::Config(format!(
                "model input {:?} must equal the cubic crop {}³",
                self.model.spatial, self.crop
            )));
        }
        if self.centers.is_empty() {
            return Err(Error::Config("need at least one center".into()));
        }
        let mut ids: Vec<&str> = self.centers.iter().map(|c| c.center_id.as_str()).collect();
        ids.sort_unstable();
        ids.dedup();
        if ids.len() != self.centers.len() {
            return Err(Error::Config("duplicate center ids".into()));
        }
        for c in &self.centers {
            c.validate()?;
            if c.spatial.iter().any(|&e| e < self.crop) {
                return Err(Error::Config(format!(
                    "center {} volume {:?} smaller than crop {}",
                    c.center_id, c.spatial, self.crop
                )));
            }
        }
        if self.folds == 0 {
            return Err(Error::Config("fold count must be ≥ 1".into()));
        }
        for name in self.optimizers.keys() {
            TuningStrategy::parse(name)?;
        }
        Ok(())
    }

    /// Optimizer settings for a strategy: explicit override or default.
    pub fn optimizer_for(&self, strategy: TuningStrategy) -> OptimizerConfig {
        self.optimizers
            .get(strategy.name())
            .cloned()
            .unwrap_or_else(|| OptimizerConfig::for_strategy(strategy))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let cfg: ExperimentConfig = serde_json::from_str(&text).map_err(|e| Error::Format {
            path: path.to_path_buf(),
            detail: format!("bad config json: {e}"),
            offset: e.column() as u64,
        })?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let text = serde_json::to_string_pretty(self).expect("config serialization cannot fail");
        std::fs::write(path, text).map_err(|e| Error::io(path, e))
    }
}

/// Deterministic per-component seed: SHA-256 of the global seed and a role
/// tag, folded to 64 bits. Components are independently reproducible and
/// uncorrelated across roles.
pub fn derive_seed(global: u64, role: &str) -> u64 {
    let mut hasher = Sha256::new();
    hasher.update(global.to_le_bytes());
    hasher.update(role.as_bytes());
    let digest = hasher.finalize();
    u64::from_le_bytes(digest[..8].try_into().unwrap())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn desk_default_is_valid_and_round_trips() {
        let cfg = ExperimentConfig::desk_default();
        cfg.validate().unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("exp.json");
        cfg.save(&path).unwrap();
        assert_eq!(ExperimentConfig::load(&path).unwrap(), cfg);
    }

    #[test]
    fn validation_rejects_bad_configs() {
        let mut cfg = ExperimentConfig::desk_default();
        cfg.schema_version = 99;
        assert!(cfg.validate().is_err());

        let mut cfg = ExperimentConfig::desk_default();
        cfg.crop = 8;
        assert!(cfg.validate().is_err());

        let mut cfg = ExperimentConfig::desk_default();
        cfg.centers[1].center_id = cfg.centers[0].center_id.clone();
        assert!(cfg.validate().is_err());

        let mut cfg = ExperimentConfig::desk_default();
        cfg.optimizers.insert("bogus".into(), OptimizerConfig::for_strategy(TuningStrategy::Full));
        assert!(cfg.validate().is_err());

        let mut cfg = ExperimentConfig::desk_default();
        cfg.folds = 0;
        assert!(cfg.validate().is_err());
    }

    #[test]
    fn derived_seeds_are_stable_and_role_separated() {
        assert_eq!(derive_seed(42, "pretrain"), derive_seed(42, "pretrain"));
        assert_ne!(derive_seed(42, "pretrain"), derive_seed(42, "finetune"));
        assert_ne!(derive_seed(42, "pretrain"), derive_seed(43, "pretrain"));
    }

    #[test]
    fn optimizer_override_takes_precedence() {
        let mut cfg = ExperimentConfig::desk_default();
        let mut custom = OptimizerConfig::for_strategy(TuningStrategy::Full);
        custom.epochs = 3;
        cfg.optimizers.insert("full".into(), custom.clone());
        cfg.validate().unwrap();
        assert_eq!(cfg.optimizer_for(TuningStrategy::Full), custom);
        assert_eq!(
            cfg.optimizer_for(TuningStrategy::DeepPrompt),
            OptimizerConfig::for_strategy(TuningStrategy::DeepPrompt)
        );
    }
}
