use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::adapter::{AdapterConfig, COARSE_GRID};
use crate::data::{SyntheticConfig, EMBEDDING_PATCH};
use crate::error::{Error, Result};
use crate::flow::{
    BackboneConfig, CodecConfig, CodecTraining, LoraConfig, SamplerConfig, SigmaDistribution, CODEC_FACTOR,
};
use crate::jepa::{EmaSchedule, JepaLossWeights, MaskConfig, PredictorConfig, VitConfig};
use crate::nn::Precision;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TileSource {
    pub root: PathBuf,
    pub manifest: PathBuf,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DataConfig {
    pub train_fraction: f64,
    pub split_seed: u64,
    pub synthetic: SyntheticConfig,
    /// Tiles on disk; the synthetic generator is used when absent.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub tiles: Option<TileSource>,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self {
            train_fraction: 0.8,
            split_seed: 0,
            synthetic: SyntheticConfig {
                size: 128,
                ..SyntheticConfig::default()
            },
            tiles: None,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EmaConfig {
    pub tau_base: f64,
    pub tau_final: f64,
}

impl Default for EmaConfig {
    fn default() -> Self {
        Self {
            tau_base: 0.999,
            tau_final: 1.0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct FlowConfig {
    pub lambda_ssim: f64,
    pub sigma: SigmaDistribution,
}

impl Default for FlowConfig {
    fn default() -> Self {
        Self {
            lambda_ssim: 0.1,
            sigma: SigmaDistribution::Uniform,
        }
    }
}

/// Unconditional fit of the generator base before it is frozen.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct BasePretraining {
    pub steps: usize,
    pub batch_size: usize,
    pub lr: f64,
}

impl Default for BasePretraining {
    fn default() -> Self {
        Self {
            steps: 300,
            batch_size: 8,
            lr: 1e-3,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub seed: u64,
    pub precision: Precision,
    pub base_lr: f64,
    pub start_lr: f64,
    pub final_lr: f64,
    pub warmup_epochs: usize,
    pub epochs: usize,
    /// Cosine schedule endpoints `(start, end)`.
    pub weight_decay: (f64, f64),
    pub batch_size: usize,
    pub grad_accum: usize,
    pub sd_loss_weight: f64,
    /// Overrides `epochs` as the optimisation length when set.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub max_steps: Option<u64>,
    /// 0 disables periodic checkpoints.
    pub checkpoint_every: u64,
    pub data: DataConfig,
    pub encoder: VitConfig,
    pub predictor: PredictorConfig,
    pub mask: MaskConfig,
    pub ema: EmaConfig,
    pub loss: JepaLossWeights,
    pub adapter: AdapterConfig,
    pub codec: CodecConfig,
    pub codec_training: CodecTraining,
    pub backbone: BackboneConfig,
    pub base_pretraining: BasePretraining,
    pub lora: LoraConfig,
    pub flow: FlowConfig,
    pub sampler: SamplerConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self::full()
    }
}

impl TrainConfig {
    /// Full-size architecture and optimisation constants.
    pub fn full() -> Self {
        Self {
            seed: 0,
            precision: Precision::Full,
            base_lr: 1e-4,
            start_lr: 2e-5,
            final_lr: 1e-6,
            warmup_epochs: 1,
            epochs: 100,
            weight_decay: (0.04, 0.4),
            batch_size: 8,
            grad_accum: 1,
            sd_loss_weight: 1.0,
            max_steps: None,
            checkpoint_every: 0,
            data: DataConfig::default(),
            encoder: VitConfig::default(),
            predictor: PredictorConfig::default(),
            mask: MaskConfig::default(),
            ema: EmaConfig::default(),
            loss: JepaLossWeights::default(),
            adapter: AdapterConfig::default(),
            codec: CodecConfig::default(),
            codec_training: CodecTraining::default(),
            backbone: BackboneConfig::default(),
            base_pretraining: BasePretraining::default(),
            lora: LoraConfig::default(),
            flow: FlowConfig::default(),
            sampler: SamplerConfig::default(),
        }
    }

    /// 64 px frames and narrow networks for CPU runs.
    pub fn toy() -> Self {
        let full = Self::full();
        Self {
            base_lr: 1e-3,
            start_lr: 2e-4,
            final_lr: 1e-5,
            epochs: 20,
            data: DataConfig {
                synthetic: SyntheticConfig {
                    size: 64,
                    ..SyntheticConfig::default()
                },
                ..DataConfig::default()
            },
            encoder: VitConfig {
                image_size: 64,
                embed_dim: 64,
                depth: 4,
                num_heads: 4,
                ..VitConfig::default()
            },
            predictor: PredictorConfig {
                embed_dim: 64,
                depth: 2,
                num_heads: 4,
                ..PredictorConfig::default()
            },
            adapter: AdapterConfig {
                semantic_dim: 64,
                hidden_dim: 64,
                cross_dim: 256,
                pooled_dim: 128,
                max_semantic_tokens: 64,
                ..AdapterConfig::default()
            },
            codec: CodecConfig {
                channels: [16, 32, 64],
                ..CodecConfig::default()
            },
            backbone: BackboneConfig {
                latent_size: 8,
                hidden_dim: 64,
                depth: 3,
                num_heads: 4,
                cross_dim: 256,
                pooled_dim: 128,
                ..BackboneConfig::default()
            },
            ..full
        }
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(text).map_err(|e| Error::config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml(&text)
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::config(e.to_string()))
    }

    pub fn image_size(&self) -> usize {
        self.encoder.image_size
    }

    pub fn validate(&self) -> Result<()> {
        let lr = [self.base_lr, self.start_lr, self.final_lr];
        if lr.iter().any(|v| !v.is_finite() || *v < 0.0) {
            return Err(Error::config(format!(
                "learning rates must be finite and non-negative: {lr:?}"
            )));
        }
        if self.start_lr > self.base_lr || self.final_lr > self.base_lr {
            return Err(Error::config("start_lr and final_lr may not exceed base_lr"));
        }
        if self.epochs < self.warmup_epochs {
            return Err(Error::config(format!(
                "{} epochs is shorter than the {} warmup epochs",
                self.epochs, self.warmup_epochs
            )));
        }
        if self.batch_size == 0 || self.grad_accum == 0 {
            return Err(Error::config("batch_size and grad_accum must be positive"));
        }
        self.encoder.validate()?;
        self.loss.validate()?;
        self.backbone.validate()?;
        self.lora.validate()?;
        self.sampler.validate()?;
        let size = self.image_size();
        if self.encoder.patch_size != EMBEDDING_PATCH {
            return Err(Error::config(format!(
                "encoder patch {} must equal the embedding patch {EMBEDDING_PATCH}",
                self.encoder.patch_size
            )));
        }
        if self.data.tiles.is_none() && self.data.synthetic.size != size {
            return Err(Error::config(format!(
                "synthetic frames are {} px but the encoder expects {size}",
                self.data.synthetic.size
            )));
        }
        if self.adapter.semantic_dim != self.encoder.embed_dim {
            return Err(Error::config("adapter.semantic_dim must equal encoder.embed_dim"));
        }
        let n = self.encoder.num_patches();
        if self.adapter.max_semantic_tokens < n {
            return Err(Error::config(format!(
                "adapter holds {} positions but the encoder emits {n} tokens",
                self.adapter.max_semantic_tokens
            )));
        }
        if !self.encoder.grid().is_multiple_of(COARSE_GRID) && !COARSE_GRID.is_multiple_of(self.encoder.grid()) {
            return Err(Error::config("semantic grid and coarse grid must divide one another"));
        }
        if self.adapter.cross_dim != self.backbone.cross_dim || self.adapter.pooled_dim != self.backbone.pooled_dim {
            return Err(Error::config("adapter output widths must match the backbone"));
        }
        if self.backbone.latent_size * CODEC_FACTOR != size {
            return Err(Error::config(format!(
                "backbone latents of {} px do not match {size} px frames",
                self.backbone.latent_size
            )));
        }
        if self.backbone.latent_channels != self.codec.latent_channels {
            return Err(Error::config("codec and backbone disagree on latent channels"));
        }
        Ok(())
    }

    pub fn ema_schedule(&self, total_steps: u64) -> EmaSchedule {
        EmaSchedule {
            tau_base: self.ema.tau_base,
            tau_final: self.ema.tau_final,
            total_iterations: total_steps,
        }
    }
}

/// Converts epoch counts into iterations.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Schedule {
    pub base_lr: f64,
    pub start_lr: f64,
    pub final_lr: f64,
    pub warmup_steps: u64,
    pub total_steps: u64,
    pub weight_decay: (f64, f64),
}

impl Schedule {
    pub fn new(cfg: &TrainConfig, steps_per_epoch: u64) -> Self {
        let total = cfg.max_steps.unwrap_or(cfg.epochs as u64 * steps_per_epoch).max(1);
        Self {
            base_lr: cfg.base_lr,
            start_lr: cfg.start_lr,
            final_lr: cfg.final_lr,
            warmup_steps: (cfg.warmup_epochs as u64 * steps_per_epoch).min(total),
            total_steps: total,
            weight_decay: cfg.weight_decay,
        }
    }

    /// Linear warmup from `start_lr` to `base_lr`, then cosine to `final_lr`.
    pub fn lr_at(&self, step: u64) -> f64 {
        let step = step.min(self.total_steps);
        if step < self.warmup_steps {
            let f = step as f64 / self.warmup_steps as f64;
            return self.start_lr * (1.0 - f) + self.base_lr * f;
        }
        let span = self.total_steps - self.warmup_steps;
        if span == 0 {
            return self.base_lr;
        }
        let w = cosine_weight((step - self.warmup_steps) as f64 / span as f64);
        self.base_lr * w + self.final_lr * (1.0 - w)
    }

    /// Cosine ramp between the weight-decay endpoints, per step.
    pub fn weight_decay_at(&self, step: u64) -> f64 {
        let w = cosine_weight(step.min(self.total_steps) as f64 / self.total_steps as f64);
        self.weight_decay.0 * w + self.weight_decay.1 * (1.0 - w)
    }
}

/// 1 at `f = 0`, 0 at `f = 1`.
fn cosine_weight(f: f64) -> f64 {
    0.5 * (1.0 + (std::f64::consts::PI * f).cos())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn profiles_validate_and_round_trip() {
        for cfg in [TrainConfig::full(), TrainConfig::toy()] {
            cfg.validate().unwrap();
            let text = cfg.to_toml().unwrap();
            assert_eq!(TrainConfig::from_toml(&text).unwrap(), cfg);
        }
    }

    #[test]
    fn partial_files_fill_defaults() {
        let cfg = TrainConfig::from_toml("seed = 3\nbase_lr = 2e-4\n").unwrap();
        assert_eq!(cfg.seed, 3);
        assert_eq!(cfg.encoder, VitConfig::default());
    }

    #[test]
    fn invariants_are_enforced() {
        let mut cfg = TrainConfig::full();
        cfg.start_lr = 1.0;
        assert!(cfg.validate().is_err());
        let mut cfg = TrainConfig::full();
        cfg.epochs = 0;
        assert!(cfg.validate().is_err());
        let mut cfg = TrainConfig::toy();
        cfg.backbone.cross_dim = 32;
        assert!(cfg.validate().is_err());
        assert!(TrainConfig::from_toml("epochs = \"many\"").is_err());
    }

    #[test]
    fn schedule_is_continuous_at_the_junction() {
        let s = Schedule::new(&TrainConfig::full(), 37);
        let w = s.warmup_steps;
        assert_eq!(s.lr_at(w), 1e-4);
        assert!((s.lr_at(w - 1) - 1e-4).abs() < 1e-4 / 30.0);
        assert!((s.lr_at(w + 1) - 1e-4).abs() < 1e-9);
        for t in 0..s.total_steps {
            assert!(s.lr_at(t) <= 1e-4 && s.lr_at(t) >= 1e-6);
        }
    }

    #[test]
    fn max_steps_overrides_epochs() {
        let mut cfg = TrainConfig::toy();
        cfg.max_steps = Some(200);
        let s = Schedule::new(&cfg, 3);
        assert_eq!(s.total_steps, 200);
        assert_eq!(s.warmup_steps, 3);
    }
}
