//! Pretraining engine: augmentation, two-view forward passes, negative
//! queue, EMA update, SGD, convergence tracking, and checkpointing.

pub mod augment;
pub mod checkpoint;
pub mod engine;
pub mod queue;
pub mod sgd;

pub use augment::{augment, AugmentationPolicy};
pub use checkpoint::Checkpoint;
pub use engine::{LossCurves, StepReport, Trainer};
pub use queue::NegativeQueue;
pub use sgd::Sgd;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::loss::BlockMask;
use crate::nn::EncoderConfig;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum TrainMode {
    #[serde(rename = "moco")]
    Moco,
    #[serde(rename = "moco+mse")]
    MocoMse,
    #[serde(rename = "moco+bt")]
    MocoBt,
}

impl TrainMode {
    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "moco" => Ok(TrainMode::Moco),
            "moco+mse" => Ok(TrainMode::MocoMse),
            "moco+bt" => Ok(TrainMode::MocoBt),
            other => Err(Error::Config(format!(
                "unknown mode {other:?}; expected moco, moco+mse, or moco+bt"
            ))),
        }
    }

    /// Column stem for the per-block entries in the training log.
    pub fn block_column_stem(self) -> &'static str {
        match self {
            TrainMode::MocoBt => "bt",
            _ => "mse",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub weight_decay: f64,
    pub sgd_momentum: f64,
    pub encoder_momentum: f64,
    pub temperature: f64,
    pub queue_size: usize,
    pub batch_size: usize,
    pub epochs: usize,
    pub mode: TrainMode,
    pub block_mask: BlockMask,
    /// `None` picks the per-mode default: 0.25 for MSE, 5e-5 for BT.
    pub intermediate_scale: Option<f64>,
    pub barlow_lambda: f64,
    pub bt_projector_dim: usize,
    pub normalize_embeddings: bool,
    pub seed: u64,
    pub encoder: EncoderConfig,
    pub augmentation: AugmentationPolicy,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            learning_rate: 0.3,
            weight_decay: 1e-4,
            sgd_momentum: 0.9,
            encoder_momentum: 0.99,
            temperature: 0.07,
            queue_size: 256,
            batch_size: 32,
            epochs: 20,
            mode: TrainMode::Moco,
            block_mask: BlockMask::all(4),
            intermediate_scale: None,
            barlow_lambda: 5e-3,
            bt_projector_dim: crate::nn::projector::BT_PROJECTOR_DIM,
            normalize_embeddings: true,
            seed: 0,
            encoder: EncoderConfig::default(),
            augmentation: AugmentationPolicy::default(),
        }
    }
}

impl TrainConfig {
    pub fn effective_scale(&self) -> f64 {
        self.intermediate_scale.unwrap_or(match self.mode {
            TrainMode::Moco => 0.0,
            TrainMode::MocoMse => 0.25,
            TrainMode::MocoBt => 5e-5,
        })
    }

    pub fn validate(&self) -> Result<()> {
        self.encoder.validate()?;
        self.augmentation.validate()?;
        if self.learning_rate <= 0.0 {
            return Err(Error::Config("learning_rate must be positive".into()));
        }
        if self.weight_decay < 0.0 {
            return Err(Error::Config("weight_decay must be >= 0".into()));
        }
        if !(0.0..=1.0).contains(&self.sgd_momentum) {
            return Err(Error::Config("sgd_momentum must be in [0, 1]".into()));
        }
        if !(0.0..=1.0).contains(&self.encoder_momentum) {
            return Err(Error::Config("encoder_momentum must be in [0, 1]".into()));
        }
        if self.temperature <= 0.0 {
            return Err(Error::Config("temperature must be positive".into()));
        }
        if self.queue_size == 0 {
            return Err(Error::Config("queue_size must be at least 1".into()));
        }
        if self.batch_size < 2 {
            return Err(Error::Config(
                "batch_size must be at least 2 (batch norm)".into(),
            ));
        }
        if let Some(s) = self.intermediate_scale {
            if s < 0.0 {
                return Err(Error::Config("intermediate_scale must be >= 0".into()));
            }
        }
        if self.barlow_lambda < 0.0 {
            return Err(Error::Config("barlow_lambda must be >= 0".into()));
        }
        if self.bt_projector_dim == 0 {
            return Err(Error::Config("bt_projector_dim must be positive".into()));
        }
        self.block_mask.validate(self.encoder.num_blocks)?;
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_config_validates_with_reference_hyperparameters() {
        let cfg = TrainConfig::default();
        cfg.validate().unwrap();
        assert_eq!(cfg.learning_rate, 0.3);
        assert_eq!(cfg.weight_decay, 1e-4);
        assert_eq!(cfg.sgd_momentum, 0.9);
        assert_eq!(cfg.encoder_momentum, 0.99);
        assert_eq!(cfg.temperature, 0.07);
        assert_eq!(cfg.encoder.embedding_dim, 128);
    }

    #[test]
    fn per_mode_scale_defaults() {
        let mut cfg = TrainConfig::default();
        assert_eq!(cfg.effective_scale(), 0.0);
        cfg.mode = TrainMode::MocoMse;
        assert_eq!(cfg.effective_scale(), 0.25);
        cfg.mode = TrainMode::MocoBt;
        assert_eq!(cfg.effective_scale(), 5e-5);
        cfg.intermediate_scale = Some(0.1);
        assert_eq!(cfg.effective_scale(), 0.1);
    }

    #[test]
    fn mode_parse_roundtrip() {
        for (s, m) in [
            ("moco", TrainMode::Moco),
            ("moco+mse", TrainMode::MocoMse),
            ("moco+bt", TrainMode::MocoBt),
        ] {
            assert_eq!(TrainMode::parse(s).unwrap(), m);
        }
        assert!(TrainMode::parse("simclr").is_err());
    }
}
