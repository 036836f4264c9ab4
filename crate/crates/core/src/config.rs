//! Run configuration: a TOML file with model, training, loss, sampler, and
//! augmentation sections. Unknown keys are rejected; missing keys fall back
//! to defaults. Command-line flags override file values, which override
//! defaults.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::model::ModelConfig;
use crate::sampling::NegativeSamplerConfig;
use crate::tensor::AdamWConfig;
use crate::training::{LossWeights, ShiftConfig, TrainConfig};
use crate::{Error, Result};

#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelSection {
    pub hidden: usize,
    pub encoder_layers: usize,
    pub decoder_layers: usize,
    pub heads: usize,
    pub num_spans: usize,
    pub feedforward: usize,
    pub dropout: f64,
}

impl Default for ModelSection {
    fn default() -> Self {
        let d = ModelConfig::default();
        ModelSection {
            hidden: d.hidden,
            encoder_layers: d.encoder_layers,
            decoder_layers: d.decoder_layers,
            heads: d.heads,
            num_spans: d.num_spans,
            feedforward: d.feedforward,
            dropout: d.dropout,
        }
    }
}

#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainingSection {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub weight_decay: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// Global-norm gradient clip; 0 disables.
    pub grad_clip: f64,
    pub checkpoint_every: usize,
    pub max_margin_pairs: usize,
    /// Auxiliary decoder supervision on intermediate layers.
    pub aux_losses: bool,
}

impl Default for TrainingSection {
    fn default() -> Self {
        TrainingSection {
            epochs: 50,
            batch_size: 32,
            lr: 2e-4,
            weight_decay: 1e-4,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            grad_clip: 1.0,
            checkpoint_every: 10,
            max_margin_pairs: 256,
            aux_losses: false,
        }
    }
}

#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SamplerSection {
    pub enabled: bool,
    pub iou_threshold: f64,
    pub similarity_threshold: f64,
}

impl Default for SamplerSection {
    fn default() -> Self {
        SamplerSection {
            enabled: true,
            iou_threshold: 0.5,
            similarity_threshold: 0.5,
        }
    }
}

/// The full run configuration.
#[derive(Debug, Clone, Serialize, Deserialize, Default)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub seed: u64,
    pub model: ModelSection,
    pub training: TrainingSection,
    pub loss: LossWeights,
    pub sampler: SamplerSection,
    pub shift: ShiftConfig,
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let cfg: RunConfig = toml::from_str(&text)
            .map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        self.to_model_config(1, 1).validate()?;
        self.loss.validate()?;
        if !(0.0..=1.0).contains(&self.sampler.iou_threshold) {
            return Err(Error::Config(format!(
                "sampler.iou_threshold {} outside [0, 1]",
                self.sampler.iou_threshold
            )));
        }
        if !(-1.0..=1.0).contains(&self.sampler.similarity_threshold) {
            return Err(Error::Config(format!(
                "sampler.similarity_threshold {} outside [-1, 1]",
                self.sampler.similarity_threshold
            )));
        }
        if !(0.0..=1.0).contains(&self.shift.p_apply) {
            return Err(Error::Config(format!(
                "shift.p_apply {} outside [0, 1]",
                self.shift.p_apply
            )));
        }
        if self.training.batch_size < 2 && self.loss.w_semantic > 0.0 {
            return Err(Error::Config(
                "batch_size must be >= 2 while the semantic loss is enabled".into(),
            ));
        }
        Ok(())
    }

    pub fn to_model_config(&self, d_video: usize, d_text: usize) -> ModelConfig {
        ModelConfig {
            hidden: self.model.hidden,
            encoder_layers: self.model.encoder_layers,
            decoder_layers: self.model.decoder_layers,
            heads: self.model.heads,
            num_spans: self.model.num_spans,
            feedforward: self.model.feedforward,
            dropout: self.model.dropout,
            d_video,
            d_text,
        }
    }

    pub fn to_train_config(&self) -> TrainConfig {
        TrainConfig {
            epochs: self.training.epochs,
            batch_size: self.training.batch_size,
            optimizer: AdamWConfig {
                lr: self.training.lr,
                beta1: self.training.beta1,
                beta2: self.training.beta2,
                eps: self.training.eps,
                weight_decay: self.training.weight_decay,
            },
            seed: self.seed,
            negatives_enabled: self.sampler.enabled,
            sampler: NegativeSamplerConfig::new(
                self.sampler.iou_threshold,
                self.sampler.similarity_threshold,
            ),
            shift: self.shift,
            loss: self.loss,
            grad_clip: (self.training.grad_clip > 0.0).then_some(self.training.grad_clip),
            max_margin_pairs: self.training.max_margin_pairs,
            aux_losses: self.training.aux_losses,
        }
    }
}
