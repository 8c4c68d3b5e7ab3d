use candle_core::Tensor;
use serde::{Deserialize, Serialize};

use super::{nearest_upsample, speaker_steps, zeros_like_steps};
use crate::dsp::mel::MelConfig;
use crate::error::{Error, Result};
use crate::nn::layers::{BiLstm, Linear, StatSets};
use crate::nn::{ConformerBlock, ConformerConfig, Ctx, ModalityMode, Scope, VideoEncoder, SPEAKER_DIM};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MelGeneratorConfig {
    pub sample_rate: u32,
    pub fps: u32,
    pub n_mels: usize,
    pub num_blocks: usize,
    pub conformer: ConformerConfig,
    /// Width of the bidirectional temporal module output.
    pub decoder_in: usize,
    pub audio_feat_dim: usize,
    pub width_divisor: usize,
}

impl Default for MelGeneratorConfig {
    fn default() -> Self {
        Self {
            sample_rate: 24_000,
            fps: 25,
            n_mels: 80,
            num_blocks: 2,
            conformer: ConformerConfig::default(),
            decoder_in: 768,
            audio_feat_dim: 64,
            width_divisor: 1,
        }
    }
}

impl MelGeneratorConfig {
    pub fn tiny() -> Self {
        Self {
            sample_rate: 8_000,
            conformer: ConformerConfig {
                dim: 64,
                ff_dim: 256,
                ..ConformerConfig::default()
            },
            decoder_in: 96,
            width_divisor: 8,
            ..Self::default()
        }
    }

    pub fn mel(&self) -> MelConfig {
        MelConfig::for_sample_rate(self.sample_rate)
    }

    pub fn samples_per_frame(&self) -> usize {
        (self.sample_rate / self.fps) as usize
    }

    /// Spectrogram length of the audio under `n_video` frames.
    pub fn mel_frames(&self, n_video: usize) -> usize {
        self.mel().n_frames(n_video * self.samples_per_frame())
    }

    pub fn visual_dim(&self) -> usize {
        512 / self.width_divisor
    }

    pub fn validate(&self) -> Result<()> {
        if self.fps == 0 || self.sample_rate % self.fps != 0 {
            return Err(Error::config("sample_rate must be a multiple of fps"));
        }
        if self.width_divisor == 0 || 64 % self.width_divisor != 0 {
            return Err(Error::config("width_divisor must divide 64"));
        }
        if self.n_mels != self.mel().n_mels {
            return Err(Error::config(format!("n_mels must be {}", self.mel().n_mels)));
        }
        if self.decoder_in < 2 || self.decoder_in % 2 != 0 {
            return Err(Error::config("decoder_in must be even and at least 2"));
        }
        if self.num_blocks == 0 || self.audio_feat_dim == 0 {
            return Err(Error::config("num_blocks and audio_feat_dim must be positive"));
        }
        Ok(())
    }
}

enum Temporal {
    /// Frame-rate module, nearest upsampling, then a mel-rate module.
    TwoStage { frame: BiLstm, mel: BiLstm },
    /// Single mel-rate module over the upsampled visual stream.
    Single(BiLstm),
}

struct MelDecoder {
    inp: Linear,
    blocks: Vec<ConformerBlock>,
    out: Linear,
    dropout: f64,
}

impl MelDecoder {
    fn new(s: &mut Scope, cfg: &MelGeneratorConfig, stats: StatSets) -> Result<Self> {
        let c = &cfg.conformer;
        let blocks = (0..cfg.num_blocks)
            .map(|i| ConformerBlock::new(&mut s.sub(&format!("block{i}")), c, stats))
            .collect::<Result<_>>()?;
        Ok(Self {
            inp: Linear::new(&mut s.sub("inp"), cfg.decoder_in, c.dim, true)?,
            blocks,
            out: Linear::new(&mut s.sub("out"), c.dim, cfg.n_mels, true)?,
            dropout: c.dropout,
        })
    }

    fn forward(&self, x: &Tensor, ctx: &mut Ctx) -> Result<Tensor> {
        let mut h = ctx.dropout(&self.inp.forward(x)?, self.dropout)?;
        for b in &self.blocks {
            h = b.forward(&h, ctx)?;
        }
        Ok(self.out.forward(&h)?.tanh()?)
    }
}

/// Video (and for AV2A, a synthesized spectrogram) to rescaled log-mel
/// generator.
pub struct MelGenerator {
    pub cfg: MelGeneratorConfig,
    pub video: VideoEncoder,
    pub audio: Option<Linear>,
    temporal: Temporal,
    decoder: MelDecoder,
}

impl MelGenerator {
    pub fn v2a(s: &mut Scope, cfg: &MelGeneratorConfig) -> Result<Self> {
        cfg.validate()?;
        let h = cfg.decoder_in / 2;
        let inp = cfg.visual_dim() + SPEAKER_DIM;
        Ok(Self {
            cfg: cfg.clone(),
            video: VideoEncoder::new(&mut s.sub("video_encoder"), cfg.width_divisor, StatSets::Shared)?,
            audio: None,
            temporal: Temporal::TwoStage {
                frame: BiLstm::new(&mut s.sub("temporal").sub("frame"), inp, h, 1)?,
                mel: BiLstm::new(&mut s.sub("temporal").sub("mel"), cfg.decoder_in, h, 1)?,
            },
            decoder: MelDecoder::new(&mut s.sub("decoder"), cfg, StatSets::Shared)?,
        })
    }

    pub fn av2a(s: &mut Scope, cfg: &MelGeneratorConfig) -> Result<Self> {
        cfg.validate()?;
        let inp = cfg.audio_feat_dim + cfg.visual_dim() + SPEAKER_DIM;
        Ok(Self {
            cfg: cfg.clone(),
            video: VideoEncoder::new(&mut s.sub("video_encoder"), cfg.width_divisor, StatSets::PerMode)?,
            audio: Some(Linear::new(&mut s.sub("audio_encoder"), cfg.n_mels, cfg.audio_feat_dim, true)?),
            temporal: Temporal::Single(BiLstm::new(&mut s.sub("temporal"), inp, cfg.decoder_in / 2, 1)?),
            decoder: MelDecoder::new(&mut s.sub("decoder"), cfg, StatSets::PerMode)?,
        })
    }

    pub fn is_av(&self) -> bool {
        self.audio.is_some()
    }

    /// frames (batch, N, 3, H, W), synth (batch, T', n_mels), spk (batch, 256)
    /// -> (batch, T', n_mels). For V2A `target_len` gives T'; for AV2A it
    /// must match the synthesized spectrogram.
    pub fn forward(
        &self,
        frames: &Tensor,
        synth: Option<&Tensor>,
        spk: &Tensor,
        target_len: usize,
        ctx: &mut Ctx,
    ) -> Result<Tensor> {
        let n = frames.dim(1)?;
        if target_len < n {
            return Err(Error::shape(format!(
                "spectrogram length {target_len} is shorter than the {n} video frames"
            )));
        }
        let h = match (&self.temporal, &self.audio) {
            (Temporal::TwoStage { frame, mel }, _) => {
                let v = self.video.forward(frames, ctx)?;
                let z = Tensor::cat(&[&v, &speaker_steps(&spk.to_dtype(v.dtype())?, n)?], 2)?;
                mel.forward(&nearest_upsample(&frame.forward(&z)?, target_len)?)?
            }
            (Temporal::Single(lstm), Some(enc)) => {
                let mode = ctx.mode;
                let t = target_len;
                let audio = if mode.uses_audio() {
                    let synth = synth.ok_or_else(|| Error::config("audio-visual model needs a spectrogram input"))?;
                    let (_, ts, m) = synth.dims3()?;
                    if ts != t || m != self.cfg.n_mels {
                        return Err(Error::shape(format!(
                            "synthesized spectrogram is {ts}x{m}, expected {t}x{}",
                            self.cfg.n_mels
                        )));
                    }
                    enc.forward(&synth.to_dtype(frames.dtype())?)?
                } else {
                    zeros_like_steps(frames, t, self.cfg.audio_feat_dim)?
                };
                let (video, speaker) = if mode.uses_video() {
                    let v = nearest_upsample(&self.video.forward(frames, ctx)?, t)?;
                    (v, speaker_steps(&spk.to_dtype(frames.dtype())?, t)?)
                } else {
                    (
                        zeros_like_steps(frames, t, self.cfg.visual_dim())?,
                        zeros_like_steps(frames, t, SPEAKER_DIM)?,
                    )
                };
                lstm.forward(&Tensor::cat(&[&audio, &video, &speaker], 2)?)?
            }
            (Temporal::Single(_), None) => unreachable!("single-stage temporal module is built with an audio encoder"),
        };
        self.decoder.forward(&h, ctx)
    }

    /// AV2A convenience: output length follows the synthesized spectrogram.
    pub fn forward_av(&self, frames: &Tensor, synth: &Tensor, spk: &Tensor, ctx: &mut Ctx) -> Result<Tensor> {
        let t = synth.dim(1)?;
        self.forward(frames, Some(synth), spk, t, ctx)
    }
}

/// Mode under which a V2A model is always evaluated.
pub const V2A_MODE: ModalityMode = ModalityMode::V;
