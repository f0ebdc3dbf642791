//! Experiment configuration. Every struct rejects unknown keys and fills
//! missing ones with the desk-scale defaults.

use std::path::PathBuf;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

/// Synthetic world or folder dataset parameters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct WorldConfig {
    pub image_size: usize,
    pub min_shapes: usize,
    pub max_shapes: usize,
    /// Standard deviation of the additive pixel noise.
    pub noise: f64,
    /// When set, scenes come from disk instead of the generator.
    pub dataset: Option<FolderDatasetConfig>,
}

impl Default for WorldConfig {
    fn default() -> Self {
        Self {
            image_size: 64,
            min_shapes: 1,
            max_shapes: 4,
            noise: 0.03,
            dataset: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FolderDatasetConfig {
    pub images_dir: PathBuf,
    pub masks_dir: PathBuf,
    pub class_index: PathBuf,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TransformMode {
    /// Least-squares transform built from the support prototypes.
    Taft,
    /// Transform forced to the identity (no task conditioning).
    Identity,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    /// Output channels of the first three encoder blocks.
    pub encoder_channels: [usize; 3],
    /// High-level feature width `d`.
    pub feature_dim: usize,
    pub heads: usize,
    pub aspp_rates: Vec<usize>,
    pub aspp_channels: usize,
    pub low_channels: usize,
    pub decoder_channels: usize,
    pub attention: bool,
    pub aux: bool,
    pub low_level_transform: bool,
    pub transform: TransformMode,
    pub ridge: f64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            encoder_channels: [16, 32, 64],
            feature_dim: 64,
            heads: 1,
            aspp_rates: vec![1, 2, 3],
            aspp_channels: 32,
            low_channels: 16,
            decoder_channels: 32,
            attention: true,
            aux: true,
            low_level_transform: false,
            transform: TransformMode::Taft,
            ridge: 1e-8,
        }
    }
}

impl ModelConfig {
    /// Width of the low-level tap (output of the second encoder block).
    pub fn low_dim(&self) -> usize {
        self.encoder_channels[1]
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub episodes: usize,
    pub lr: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    /// The learning rate is divided by this factor from `decay_point` on.
    pub lr_decay_factor: f64,
    pub decay_point: usize,
    pub encoder_lr_multiplier: f64,
    pub shots: usize,
    pub queries: usize,
    pub split: usize,
    pub seed: u64,
    pub log_interval: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            episodes: 3000,
            lr: 0.01,
            momentum: 0.9,
            weight_decay: 3e-4,
            lr_decay_factor: 10.0,
            decay_point: 2000,
            encoder_lr_multiplier: 1.0,
            shots: 1,
            queries: 12,
            split: 0,
            seed: 0,
            log_interval: 10,
        }
    }
}

impl TrainConfig {
    /// Base learning rate in effect at `episode` (0-based).
    pub fn lr_at(&self, episode: usize) -> f64 {
        if episode >= self.decay_point {
            self.lr / self.lr_decay_factor
        } else {
            self.lr
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalConfig {
    pub episodes: usize,
    pub shots: usize,
    pub queries: usize,
    pub scales: Vec<f64>,
    pub seed: u64,
    pub shot_list: Vec<usize>,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            episodes: 1000,
            shots: 1,
            queries: 1,
            scales: vec![1.0],
            seed: 1_000_003,
            shot_list: vec![1, 3, 5, 7, 10],
        }
    }
}

/// Everything needed to train one model.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub world: WorldConfig,
    pub model: ModelConfig,
    pub train: TrainConfig,
}

fn check(cond: bool, key: &str, msg: &str) -> Result<()> {
    if cond {
        Ok(())
    } else {
        Err(Error::Config(format!("{key}: {msg}")))
    }
}

impl WorldConfig {
    pub fn validate(&self) -> Result<()> {
        check(
            self.image_size >= 16 && self.image_size.is_multiple_of(16),
            "world.image_size",
            "must be a positive multiple of 16",
        )?;
        check(
            (1..=4).contains(&self.min_shapes) && self.min_shapes <= self.max_shapes && self.max_shapes <= 4,
            "world.min_shapes",
            "need 1 <= min_shapes <= max_shapes <= 4",
        )?;
        check(
            self.noise >= 0.0 && self.noise.is_finite(),
            "world.noise",
            "must be >= 0",
        )
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        check(
            self.encoder_channels.iter().all(|&c| c > 0),
            "model.encoder_channels",
            "must be positive",
        )?;
        check(self.feature_dim >= 2, "model.feature_dim", "must be >= 2")?;
        check(
            self.heads > 0 && self.feature_dim.is_multiple_of(self.heads),
            "model.heads",
            "must divide feature_dim",
        )?;
        check(
            !self.aspp_rates.is_empty() && self.aspp_rates.iter().all(|&r| r > 0),
            "model.aspp_rates",
            "need at least one positive rate",
        )?;
        check(
            self.aspp_channels > 0 && self.low_channels > 0 && self.decoder_channels > 0,
            "model.decoder_channels",
            "widths must be positive",
        )?;
        check(
            self.ridge >= 0.0 && self.ridge.is_finite(),
            "model.ridge",
            "must be >= 0",
        )
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        check(self.episodes > 0, "train.episodes", "must be positive")?;
        check(self.lr >= 0.0 && self.lr.is_finite(), "train.lr", "must be >= 0")?;
        check(
            (0.0..1.0).contains(&self.momentum),
            "train.momentum",
            "must be in [0, 1)",
        )?;
        check(self.weight_decay >= 0.0, "train.weight_decay", "must be >= 0")?;
        check(self.lr_decay_factor > 0.0, "train.lr_decay_factor", "must be positive")?;
        check(
            self.decay_point < self.episodes,
            "train.decay_point",
            "must be smaller than train.episodes",
        )?;
        check(
            self.encoder_lr_multiplier > 0.0,
            "train.encoder_lr_multiplier",
            "must be positive",
        )?;
        check(self.shots >= 1, "train.shots", "must be >= 1")?;
        check(self.queries >= 1, "train.queries", "must be >= 1")?;
        check(self.split < 4, "train.split", "must be in 0..4")?;
        check(self.log_interval >= 1, "train.log_interval", "must be >= 1")
    }
}

impl EvalConfig {
    pub fn validate(&self) -> Result<()> {
        check(self.episodes > 0, "eval.episodes", "must be positive")?;
        check(self.shots >= 1, "eval.shots", "must be >= 1")?;
        check(self.queries >= 1, "eval.queries", "must be >= 1")?;
        check(
            !self.scales.is_empty() && self.scales.iter().all(|s| *s > 0.0 && s.is_finite()),
            "eval.scales",
            "need at least one positive scale",
        )?;
        check(
            !self.shot_list.is_empty() && self.shot_list.iter().all(|&s| s >= 1),
            "eval.shot_list",
            "need at least one shot count >= 1",
        )
    }
}

impl ExperimentConfig {
    pub fn validate(&self) -> Result<()> {
        self.world.validate()?;
        self.model.validate()?;
        self.train.validate()
    }

    /// Stable content hash of the configuration.
    pub fn hash(&self) -> String {
        content_hash(self)
    }
}

/// Hex SHA-256 of the canonical JSON encoding of `value`.
pub fn content_hash<T: Serialize>(value: &T) -> String {
    let json = serde_json::to_vec(value).expect("config serializes");
    let digest = Sha256::digest(&json);
    digest.iter().map(|b| format!("{b:02x}")).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_validate() {
        ExperimentConfig::default().validate().unwrap();
        EvalConfig::default().validate().unwrap();
    }

    #[test]
    fn unknown_keys_rejected() {
        let err = serde_json::from_str::<TrainConfig>(r#"{"episodes": 10, "bogus": 1}"#).unwrap_err();
        assert!(err.to_string().contains("bogus"));
    }

    #[test]
    fn decay_point_must_precede_end() {
        let cfg = TrainConfig {
            episodes: 100,
            decay_point: 100,
            ..Default::default()
        };
        let err = cfg.validate().unwrap_err().to_string();
        assert!(err.contains("train.decay_point"), "{err}");
    }

    #[test]
    fn schedule_divides_after_decay_point() {
        let cfg = TrainConfig::default();
        assert_eq!(cfg.lr_at(0), 0.01);
        assert_eq!(cfg.lr_at(1999), 0.01);
        assert_eq!(cfg.lr_at(2000), 0.01 / 10.0);
    }

    #[test]
    fn hash_is_stable_and_sensitive() {
        let a = ExperimentConfig::default();
        let mut b = a.clone();
        assert_eq!(a.hash(), b.hash());
        b.train.seed = 7;
        assert_ne!(a.hash(), b.hash());
    }
}
