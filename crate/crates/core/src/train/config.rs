use serde::{Deserialize, Serialize};

use super::bundle::{ModelConfig, WaveModelConfig};
use super::optim::AdamConfig;
use super::schedule::LrSchedule;
use crate::error::{Error, Result};
use crate::loss::{LossWeights, StftResolutionSet};
use crate::models::{Family, MelGeneratorConfig};
use crate::nn::{ModalityMode, SpeakerEncoderSpec};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum TrainProcedure {
    #[serde(rename = "baseline")]
    Baseline,
    #[serde(rename = "mdrop", alias = "modality_dropout")]
    ModalityDropout,
    #[serde(rename = "mdrop-gt", alias = "modality_dropout_gt_audio")]
    ModalityDropoutGt,
}

impl TrainProcedure {
    pub const ALL: [TrainProcedure; 3] = [
        TrainProcedure::Baseline,
        TrainProcedure::ModalityDropout,
        TrainProcedure::ModalityDropoutGt,
    ];

    /// Branches run on every batch, in order.
    pub fn branches(self) -> &'static [ModalityMode] {
        match self {
            TrainProcedure::Baseline => &[ModalityMode::AV],
            _ => &[ModalityMode::AV, ModalityMode::V, ModalityMode::A],
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            TrainProcedure::Baseline => "baseline",
            TrainProcedure::ModalityDropout => "mdrop",
            TrainProcedure::ModalityDropoutGt => "mdrop-gt",
        }
    }

    /// The audio-only branch reconstructs from ground-truth audio.
    pub fn gt_audio(self) -> bool {
        self == TrainProcedure::ModalityDropoutGt
    }
}

impl std::str::FromStr for TrainProcedure {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        serde_json::from_value(serde_json::Value::String(s.into()))
            .map_err(|_| Error::config(format!("unknown procedure `{s}` (baseline|mdrop|mdrop-gt)")))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct WaveOptimConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub batch_size: usize,
    pub disc_crop_seconds: f64,
    pub max_clip_seconds: f64,
}

impl Default for WaveOptimConfig {
    fn default() -> Self {
        Self {
            lr: 1e-4,
            beta1: 0.5,
            beta2: 0.99,
            batch_size: 4,
            disc_crop_seconds: 1.0,
            max_clip_seconds: 3.0,
        }
    }
}

impl WaveOptimConfig {
    pub fn adam(&self) -> AdamConfig {
        AdamConfig {
            beta1: self.beta1,
            beta2: self.beta2,
            eps: 1e-8,
            weight_decay: 0.0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.adam().validate()?;
        if !(self.lr > 0.0 && self.batch_size > 0 && self.disc_crop_seconds > 0.0 && self.max_clip_seconds > 0.0) {
            return Err(Error::config("wave optimizer settings must be positive"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct MelOptimConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub weight_decay: f64,
    pub batch_size: usize,
    pub stage1_lr_seen: f64,
    pub stage1_lr_unseen: f64,
    pub warmup_epochs: usize,
    pub t0: f64,
    pub t_mult: f64,
    pub stage2_frontend_lr_seen: f64,
    pub stage2_frontend_lr_unseen: f64,
    pub max_clip_seconds: f64,
}

impl Default for MelOptimConfig {
    fn default() -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.98,
            weight_decay: 1e-2,
            batch_size: 4,
            stage1_lr_seen: 1e-3,
            stage1_lr_unseen: 5e-4,
            warmup_epochs: 20,
            t0: 1.0,
            t_mult: 2.0,
            stage2_frontend_lr_seen: 1e-4,
            stage2_frontend_lr_unseen: 1e-5,
            max_clip_seconds: 3.0,
        }
    }
}

impl MelOptimConfig {
    pub fn adam(&self) -> AdamConfig {
        AdamConfig {
            beta1: self.beta1,
            beta2: self.beta2,
            eps: 1e-8,
            weight_decay: self.weight_decay,
        }
    }

    pub fn schedule(&self, seen: bool) -> LrSchedule {
        LrSchedule::WarmupCosine {
            base: if seen { self.stage1_lr_seen } else { self.stage1_lr_unseen },
            warmup_epochs: self.warmup_epochs,
            t0: self.t0,
            t_mult: self.t_mult,
            eta_min: 0.0,
        }
    }

    pub fn frontend_lr(&self, seen: bool) -> f64 {
        if seen {
            self.stage2_frontend_lr_seen
        } else {
            self.stage2_frontend_lr_unseen
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.adam().validate()?;
        self.schedule(true).validate()?;
        self.schedule(false).validate()?;
        if !(self.batch_size > 0 && self.frontend_lr(true) > 0.0 && self.frontend_lr(false) > 0.0 && self.max_clip_seconds > 0.0) {
            return Err(Error::config("mel optimizer settings must be positive"));
        }
        Ok(())
    }
}

/// Everything a training run reads from its JSON config file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub wave: WaveModelConfig,
    pub mel: MelGeneratorConfig,
    pub loss: LossWeights,
    /// Defaults to the standard set scaled to the model's sample rate.
    pub stft_resolutions: Option<StftResolutionSet>,
    pub wave_optim: WaveOptimConfig,
    pub mel_optim: MelOptimConfig,
    /// Epochs for V2A training and for waveform-family AV2A training.
    pub epochs: usize,
    /// Mel-family AV2A: stage 1 (frozen video encoder and decoder) and
    /// stage 2 (everything trainable) epochs.
    pub stage1_epochs: usize,
    pub stage2_epochs: usize,
    /// Optional cap on optimizer steps per stage.
    pub max_steps: Option<usize>,
    pub seen_speakers: bool,
    /// Waveform family: adversarial training on or off.
    pub gan: bool,
    pub speaker_encoder: SpeakerEncoderSpec,
    pub init_seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            wave: WaveModelConfig::tiny(),
            mel: MelGeneratorConfig::tiny(),
            loss: LossWeights::default(),
            stft_resolutions: None,
            wave_optim: WaveOptimConfig::default(),
            mel_optim: MelOptimConfig::default(),
            epochs: 10,
            stage1_epochs: 20,
            stage2_epochs: 10,
            max_steps: None,
            seen_speakers: true,
            gan: true,
            speaker_encoder: SpeakerEncoderSpec::Stub,
            init_seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn model(&self, family: Family) -> ModelConfig {
        match family {
            Family::Wave => ModelConfig::Wave(self.wave.clone()),
            Family::Mel => ModelConfig::Mel(self.mel.clone()),
        }
    }

    pub fn resolutions(&self, sample_rate: u32) -> StftResolutionSet {
        self.stft_resolutions
            .clone()
            .unwrap_or_else(|| StftResolutionSet::for_sample_rate(sample_rate))
    }

    pub fn validate(&self) -> Result<()> {
        self.wave.generator.validate()?;
        self.wave.discriminator.validate()?;
        self.mel.validate()?;
        self.loss.validate()?;
        if let Some(r) = &self.stft_resolutions {
            r.validate()?;
        }
        self.wave_optim.validate()?;
        self.mel_optim.validate()?;
        if self.epochs == 0 || self.stage1_epochs == 0 {
            return Err(Error::config("epochs and stage1_epochs must be at least 1"));
        }
        if self.max_steps == Some(0) {
            return Err(Error::config("max_steps must be at least 1"));
        }
        Ok(())
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let c: Self = serde_json::from_str(text).map_err(|e| Error::config(format!("config: {e}")))?;
        c.validate()?;
        Ok(c)
    }
}
