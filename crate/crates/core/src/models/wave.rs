use candle_core::Tensor;
use serde::{Deserialize, Serialize};

use super::{speaker_steps, zeros_like_steps};
use crate::error::{Error, Result};
use crate::nn::layers::{avg_pool_k4_s2, leaky_relu, BatchNorm, BiLstm, Conv1d, Conv1dSpec, ConvTranspose1d, StatSets};
use crate::nn::{Ctx, ModalityMode, Scope, VideoEncoder, SPEAKER_DIM};

const SLOPE: f64 = 0.2;
const MIN_CHANNELS: usize = 8;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct WaveGeneratorConfig {
    pub sample_rate: u32,
    pub fps: u32,
    pub upsample_factors: Vec<usize>,
    /// Output width of the bidirectional temporal module.
    pub temporal_hidden: usize,
    pub audio_feat_dim: usize,
    pub decoder_channels: usize,
    pub audio_channels: usize,
    pub width_divisor: usize,
}

impl Default for WaveGeneratorConfig {
    fn default() -> Self {
        Self {
            sample_rate: 24_000,
            fps: 25,
            upsample_factors: vec![4, 4, 4, 5, 3],
            temporal_hidden: 512,
            audio_feat_dim: 256,
            decoder_channels: 512,
            audio_channels: 64,
            width_divisor: 1,
        }
    }
}

impl WaveGeneratorConfig {
    /// Desk-scale preset: 8 kHz audio and every width divided by 8.
    pub fn tiny() -> Self {
        Self {
            sample_rate: 8_000,
            upsample_factors: vec![4, 4, 4, 5],
            width_divisor: 8,
            ..Self::default()
        }
    }

    pub fn samples_per_frame(&self) -> usize {
        (self.sample_rate / self.fps) as usize
    }

    pub fn visual_dim(&self) -> usize {
        512 / self.width_divisor
    }

    pub fn temporal_dim(&self) -> usize {
        self.temporal_hidden / self.width_divisor
    }

    pub fn v_input_dim(&self) -> usize {
        self.visual_dim() + SPEAKER_DIM
    }

    pub fn av_input_dim(&self) -> usize {
        self.v_input_dim() + self.audio_feat_dim
    }

    pub fn validate(&self) -> Result<()> {
        if self.fps == 0 || self.sample_rate % self.fps != 0 {
            return Err(Error::config(format!(
                "sample_rate {} is not a multiple of fps {}",
                self.sample_rate, self.fps
            )));
        }
        if self.width_divisor == 0 || 64 % self.width_divisor != 0 {
            return Err(Error::config("width_divisor must divide 64"));
        }
        if self.upsample_factors.len() < 2 || self.upsample_factors.contains(&0) {
            return Err(Error::config("need at least two non-zero upsample factors"));
        }
        let prod: usize = self.upsample_factors.iter().product();
        if prod != self.samples_per_frame() {
            return Err(Error::config(format!(
                "upsample factors {:?} multiply to {prod}, expected {} samples per frame",
                self.upsample_factors,
                self.samples_per_frame()
            )));
        }
        if self.temporal_dim() < 2 || self.temporal_dim() % 2 != 0 {
            return Err(Error::config("temporal width must be even and at least 2"));
        }
        if self.audio_feat_dim == 0 {
            return Err(Error::config("audio_feat_dim must be positive"));
        }
        Ok(())
    }

    fn decoder_widths(&self) -> Vec<usize> {
        (0..=self.upsample_factors.len())
            .map(|i| ((self.decoder_channels / self.width_divisor) >> i).max(MIN_CHANNELS))
            .collect()
    }
}

/// Dilated residual unit: leaky, dilated k3 conv, leaky, 1x1 conv, plus the
/// identity shortcut.
struct ResStack {
    conv1: Conv1d,
    conv2: Conv1d,
}

impl ResStack {
    fn new(s: &mut Scope, ch: usize, dilation: usize) -> Result<Self> {
        Ok(Self {
            conv1: Conv1d::new(
                &mut s.sub("conv1"),
                Conv1dSpec::new(ch, ch, 3).dilation(dilation).padding(dilation).reflect(),
            )?,
            conv2: Conv1d::new(&mut s.sub("conv2"), Conv1dSpec::new(ch, ch, 1))?,
        })
    }

    fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let h = self.conv1.forward(&leaky_relu(x, SLOPE)?)?;
        let h = self.conv2.forward(&leaky_relu(&h, SLOPE)?)?;
        Ok((x + h)?)
    }
}

fn stacks(s: &mut Scope, ch: usize) -> Result<Vec<ResStack>> {
    (0..2)
        .map(|k| ResStack::new(&mut s.sub(&format!("stack{k}")), ch, 3usize.pow(k as u32)))
        .collect()
}

fn upsampler(s: &mut Scope, inp: usize, out: usize, f: usize) -> Result<ConvTranspose1d> {
    let pad = f / 2 + f % 2;
    ConvTranspose1d::new(s, inp, out, 2 * f, f, pad, f % 2, false)
}

/// (batch, steps, features) -> (batch, steps * prod(factors)) in [-1, 1].
pub struct WaveDecoder {
    conv_in: Conv1d,
    tconv: ConvTranspose1d,
    blocks: Vec<(Vec<ResStack>, ConvTranspose1d)>,
    conv_out: Conv1d,
}

impl WaveDecoder {
    pub fn new(s: &mut Scope, cfg: &WaveGeneratorConfig) -> Result<Self> {
        let w = cfg.decoder_widths();
        let mut blocks = Vec::new();
        for (i, &f) in cfg.upsample_factors.iter().enumerate() {
            let mut b = s.sub(&format!("block{i}"));
            let st = stacks(&mut b, w[i])?;
            let up = upsampler(&mut b.sub("up"), w[i], w[i + 1], f)?;
            blocks.push((st, up));
        }
        Ok(Self {
            conv_in: Conv1d::new(
                &mut s.sub("conv_in"),
                Conv1dSpec::new(cfg.temporal_dim(), w[0], 7).padding(3).reflect(),
            )?,
            tconv: ConvTranspose1d::new(&mut s.sub("tconv"), w[0], w[0], 3, 1, 1, 0, false)?,
            blocks,
            conv_out: Conv1d::new(
                &mut s.sub("conv_out"),
                Conv1dSpec::new(*w.last().unwrap(), 1, 7).padding(3).reflect(),
            )?,
        })
    }

    pub fn forward(&self, feats: &Tensor) -> Result<Tensor> {
        let x = feats.transpose(1, 2)?.contiguous()?;
        let mut h = self.conv_in.forward(&x)?;
        h = self.tconv.forward(&leaky_relu(&h, SLOPE)?)?;
        for (st, up) in &self.blocks {
            for r in st {
                h = r.forward(&h)?;
            }
            h = up.forward(&leaky_relu(&h, SLOPE)?)?;
        }
        let y = self.conv_out.forward(&leaky_relu(&h, SLOPE)?)?.tanh()?;
        Ok(y.squeeze(1)?)
    }
}

/// Strided mirror of the decoder: (batch, samples) -> (batch, frames, 256).
pub struct WaveAudioEncoder {
    conv_in: Conv1d,
    bn: BatchNorm,
    blocks: Vec<(Vec<ResStack>, Conv1d)>,
    conv_out: Conv1d,
    samples_per_frame: usize,
}

fn downsampler(inp: usize, out: usize, f: usize) -> Conv1dSpec {
    Conv1dSpec::new(inp, out, 2 * f).stride(f).padding(f.div_ceil(2))
}

impl WaveAudioEncoder {
    pub fn new(s: &mut Scope, cfg: &WaveGeneratorConfig, stats: StatSets) -> Result<Self> {
        let f = &cfg.upsample_factors;
        let n = f.len();
        let first: usize = f[..n - 2].iter().product();
        let c0 = (cfg.audio_channels * 2 / cfg.width_divisor).max(MIN_CHANNELS);
        let widths = [c0, 2 * c0, 4 * c0];
        let mut blocks = Vec::new();
        for (i, &fk) in f[n - 2..].iter().enumerate() {
            let mut b = s.sub(&format!("block{i}"));
            let st = stacks(&mut b, widths[i])?;
            let down = Conv1d::new(&mut b.sub("down"), downsampler(widths[i], widths[i + 1], fk))?;
            blocks.push((st, down));
        }
        Ok(Self {
            conv_in: Conv1d::new(&mut s.sub("conv_in"), downsampler(1, c0, first))?,
            bn: BatchNorm::new(&mut s.sub("bn"), c0, stats)?,
            blocks,
            conv_out: Conv1d::new(
                &mut s.sub("conv_out"),
                Conv1dSpec::new(widths[2], cfg.audio_feat_dim, 3).padding(1),
            )?,
            samples_per_frame: cfg.samples_per_frame(),
        })
    }

    pub fn forward(&self, audio: &Tensor, ctx: &Ctx) -> Result<Tensor> {
        let (_, len) = audio.dims2()?;
        if len == 0 {
            return Err(Error::EmptySignal);
        }
        if len % self.samples_per_frame != 0 {
            return Err(Error::shape(format!(
                "audio length {len} is not a multiple of {} samples per frame",
                self.samples_per_frame
            )));
        }
        let mut h = self.bn.forward(&self.conv_in.forward(&audio.unsqueeze(1)?)?, ctx)?;
        for (st, down) in &self.blocks {
            for r in st {
                h = r.forward(&h)?;
            }
            h = down.forward(&leaky_relu(&h, SLOPE)?)?;
        }
        let y = self.conv_out.forward(&leaky_relu(&h, SLOPE)?)?.tanh()?;
        Ok(y.transpose(1, 2)?.contiguous()?)
    }
}

/// Zero-pads or trims (batch, len) audio to `target` samples when within one
/// frame of it.
pub fn align_audio(audio: &Tensor, target: usize, tolerance: usize) -> Result<Tensor> {
    let len = audio.dim(1)?;
    if len.abs_diff(target) > tolerance {
        return Err(Error::shape(format!(
            "audio has {len} samples, expected {target} (tolerance {tolerance})"
        )));
    }
    Ok(if len >= target {
        audio.narrow(1, 0, target)?
    } else {
        audio.pad_with_zeros(1, 0, target - len)?
    })
}

/// Video (and for AV2A, synthesized audio) to waveform generator.
pub struct WaveGenerator {
    pub cfg: WaveGeneratorConfig,
    pub video: VideoEncoder,
    pub audio: Option<WaveAudioEncoder>,
    pub temporal: BiLstm,
    pub decoder: WaveDecoder,
}

impl WaveGenerator {
    /// Video-only model; batch norm keeps one set of statistics.
    pub fn v2a(s: &mut Scope, cfg: &WaveGeneratorConfig) -> Result<Self> {
        Self::build(s, cfg, false)
    }

    /// Audio-visual model; every batch norm keeps per-modality statistics.
    pub fn av2a(s: &mut Scope, cfg: &WaveGeneratorConfig) -> Result<Self> {
        Self::build(s, cfg, true)
    }

    fn build(s: &mut Scope, cfg: &WaveGeneratorConfig, av: bool) -> Result<Self> {
        cfg.validate()?;
        let stats = if av { StatSets::PerMode } else { StatSets::Shared };
        let video = VideoEncoder::new(&mut s.sub("video_encoder"), cfg.width_divisor, stats)?;
        let audio = if av {
            Some(WaveAudioEncoder::new(&mut s.sub("audio_encoder"), cfg, stats)?)
        } else {
            None
        };
        let inp = if av { cfg.av_input_dim() } else { cfg.v_input_dim() };
        Ok(Self {
            cfg: cfg.clone(),
            video,
            audio,
            temporal: BiLstm::new(&mut s.sub("temporal"), inp, cfg.temporal_dim() / 2, 2)?,
            decoder: WaveDecoder::new(&mut s.sub("decoder"), cfg)?,
        })
    }

    pub fn is_av(&self) -> bool {
        self.audio.is_some()
    }

    /// Temporal-module input, (batch, N, features). Blocks zeroed by the
    /// mode are never computed, so their encoders receive no gradient.
    pub fn features(&self, frames: &Tensor, synth: Option<&Tensor>, spk: &Tensor, ctx: &Ctx) -> Result<Tensor> {
        let n = frames.dim(1)?;
        let mode = if self.is_av() { ctx.mode } else { ModalityMode::V };
        let video = if mode.uses_video() {
            self.video.forward(frames, ctx)?
        } else {
            zeros_like_steps(frames, n, self.cfg.visual_dim())?
        };
        let speaker = if mode.uses_video() {
            speaker_steps(&spk.to_dtype(frames.dtype())?, n)?
        } else {
            zeros_like_steps(frames, n, SPEAKER_DIM)?
        };
        let Some(enc) = &self.audio else {
            return Ok(Tensor::cat(&[&video, &speaker], 2)?);
        };
        let audio = if mode.uses_audio() {
            let synth = synth.ok_or_else(|| Error::config("audio-visual model needs an audio input"))?;
            let spf = self.cfg.samples_per_frame();
            enc.forward(&align_audio(synth, n * spf, spf)?, ctx)?
        } else {
            zeros_like_steps(frames, n, self.cfg.audio_feat_dim)?
        };
        Ok(Tensor::cat(&[&audio, &video, &speaker], 2)?)
    }

    /// frames (batch, N, 3, H, W), synth (batch, ~N*spf), spk (batch, 256)
    /// -> (batch, N*spf)
    pub fn forward(&self, frames: &Tensor, synth: Option<&Tensor>, spk: &Tensor, ctx: &Ctx) -> Result<Tensor> {
        let z = self.features(frames, synth, spk, ctx)?;
        self.decoder.forward(&self.temporal.forward(&z)?)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DiscriminatorConfig {
    pub num_scales: usize,
    pub downsample_factor: usize,
    pub leaky_slope: f64,
    pub width_divisor: usize,
}

impl Default for DiscriminatorConfig {
    fn default() -> Self {
        Self {
            num_scales: 3,
            downsample_factor: 2,
            leaky_slope: 0.2,
            width_divisor: 1,
        }
    }
}

impl DiscriminatorConfig {
    pub fn tiny() -> Self {
        Self {
            width_divisor: 8,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.num_scales == 0 {
            return Err(Error::config("discriminator needs at least one scale"));
        }
        if self.downsample_factor != 2 {
            return Err(Error::config("only 2x downsampling between scales is supported"));
        }
        if self.width_divisor == 0 || 16 % self.width_divisor != 0 {
            return Err(Error::config("discriminator width_divisor must divide 16"));
        }
        Ok(())
    }
}

struct DiscBlock {
    layers: Vec<Conv1d>,
    out: Conv1d,
}

impl DiscBlock {
    fn new(s: &mut Scope, div: usize) -> Result<Self> {
        let w: Vec<usize> = [16, 64, 256, 1024, 1024].iter().map(|c| c / div).collect();
        let mut specs = vec![Conv1dSpec::new(1, w[0], 15).padding(7).reflect()];
        for k in 0..4 {
            let groups = (w[k] / 4).max(1);
            specs.push(Conv1dSpec::new(w[k], w[k + 1], 41).stride(4).padding(20).groups(groups));
        }
        specs.push(Conv1dSpec::new(w[4], w[4], 5).padding(2));
        let layers = specs
            .into_iter()
            .enumerate()
            .map(|(i, sp)| Conv1d::new(&mut s.sub(&format!("layer{i}")), sp.weight_norm()))
            .collect::<Result<_>>()?;
        Ok(Self {
            layers,
            out: Conv1d::new(&mut s.sub("out"), Conv1dSpec::new(w[4], 1, 3).padding(1).weight_norm())?,
        })
    }

    fn forward(&self, x: &Tensor, slope: f64) -> Result<Tensor> {
        let mut h = x.clone();
        for l in &self.layers {
            h = leaky_relu(&l.forward(&h)?, slope)?;
        }
        self.out.forward(&h)
    }
}

/// Multi-scale waveform discriminator; scale k sees the input average
/// pooled k times.
pub struct Discriminator {
    pub cfg: DiscriminatorConfig,
    blocks: Vec<DiscBlock>,
}

impl Discriminator {
    pub fn new(s: &mut Scope, cfg: &DiscriminatorConfig) -> Result<Self> {
        cfg.validate()?;
        let blocks = (0..cfg.num_scales)
            .map(|k| DiscBlock::new(&mut s.sub(&format!("scale{k}")), cfg.width_divisor))
            .collect::<Result<_>>()?;
        Ok(Self { cfg: *cfg, blocks })
    }

    /// (batch, samples) -> one (batch, 1, len_k) score map per scale.
    pub fn forward(&self, audio: &Tensor) -> Result<Vec<Tensor>> {
        let mut x = audio.unsqueeze(1)?;
        let mut out = Vec::with_capacity(self.blocks.len());
        for (k, b) in self.blocks.iter().enumerate() {
            if k > 0 {
                x = avg_pool_k4_s2(&x)?;
            }
            out.push(b.forward(&x, self.cfg.leaky_slope)?);
        }
        Ok(out)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::{flat_f32, ParamStore};
    use candle_core::{DType, Device};

    fn frames(b: usize, n: usize, seed: usize) -> Tensor {
        let data: Vec<f32> = (0..b * n * 3 * 16 * 16)
            .map(|i| (((i + seed) * 2654435761usize) % 1000) as f32 / 500.0 - 1.0)
            .collect();
        Tensor::from_vec(data, (b, n, 3, 16, 16), &Device::Cpu).unwrap()
    }

    fn spk(b: usize) -> Tensor {
        Tensor::from_vec(
            (0..b * 256).map(|i| ((i % 7) as f32 - 3.0) / 16.0).collect(),
            (b, 256),
            &Device::Cpu,
        )
        .unwrap()
    }

    fn audio(b: usize, len: usize, seed: usize) -> Tensor {
        let data: Vec<f32> = (0..b * len)
            .map(|i| ((((i + seed) * 7919) % 2003) as f32 / 1001.5 - 1.0) * 0.5)
            .collect();
        Tensor::from_vec(data, (b, len), &Device::Cpu).unwrap()
    }

    #[test]
    fn config_checks() {
        assert_eq!(WaveGeneratorConfig::default().samples_per_frame(), 960);
        assert!(WaveGeneratorConfig::default().validate().is_ok());
        assert!(WaveGeneratorConfig::tiny().validate().is_ok());
        assert_eq!(WaveGeneratorConfig::default().v_input_dim(), 768);
        assert_eq!(WaveGeneratorConfig::default().av_input_dim(), 1024);
        let bad = WaveGeneratorConfig {
            upsample_factors: vec![4, 4, 4, 5],
            ..WaveGeneratorConfig::default()
        };
        assert!(bad.validate().is_err());
    }

    #[test]
    fn v2a_length_and_range() {
        let cfg = WaveGeneratorConfig::tiny();
        let mut ps = ParamStore::new(DType::F32, 1);
        let g = WaveGenerator::v2a(&mut ps.root(), &cfg).unwrap();
        let ctx = Ctx::eval(ModalityMode::V);
        for n in [1, 3] {
            let y = g.forward(&frames(1, n, 0), None, &spk(1), &ctx).unwrap();
            assert_eq!(y.dims(), &[1, 320 * n]);
            assert!(flat_f32(&y).unwrap().iter().all(|v| v.abs() <= 1.0));
        }
    }

    #[test]
    fn audio_encoder_rate() {
        let cfg = WaveGeneratorConfig::tiny();
        let mut ps = ParamStore::new(DType::F32, 2);
        let enc = WaveAudioEncoder::new(&mut ps.root(), &cfg, StatSets::PerMode).unwrap();
        let ctx = Ctx::eval(ModalityMode::AV);
        for n in [1, 4] {
            let y = enc.forward(&audio(2, 320 * n, 1), &ctx).unwrap();
            assert_eq!(y.dims(), &[2, n, 256]);
            assert!(flat_f32(&y).unwrap().iter().all(|v| v.abs() <= 1.0));
        }
        assert!(enc.forward(&audio(1, 100, 0), &ctx).is_err());
    }

    #[test]
    fn modality_masking_is_exact() {
        let cfg = WaveGeneratorConfig::tiny();
        let mut ps = ParamStore::new(DType::F32, 3);
        let g = WaveGenerator::av2a(&mut ps.root(), &cfg).unwrap();
        let (f1, f2) = (frames(1, 2, 0), frames(1, 2, 99));
        let (a1, a2) = (audio(1, 640, 0), audio(1, 640, 7));
        let s = spk(1);
        let v = Ctx::eval(ModalityMode::V);
        let y1 = flat_f32(&g.forward(&f1, Some(&a1), &s, &v).unwrap()).unwrap();
        let y2 = flat_f32(&g.forward(&f1, Some(&a2), &s, &v).unwrap()).unwrap();
        assert_eq!(y1, y2);
        let a = Ctx::eval(ModalityMode::A);
        let z1 = flat_f32(&g.forward(&f1, Some(&a1), &s, &a).unwrap()).unwrap();
        let z2 = flat_f32(&g.forward(&f2, Some(&a1), &s.zeros_like().unwrap(), &a).unwrap()).unwrap();
        assert_eq!(z1, z2);
        let av = Ctx::eval(ModalityMode::AV);
        let w1 = flat_f32(&g.forward(&f1, Some(&a1), &s, &av).unwrap()).unwrap();
        let w2 = flat_f32(&g.forward(&f1, Some(&a2), &s, &av).unwrap()).unwrap();
        assert_ne!(w1, w2);
    }

    #[test]
    fn synth_length_tolerance() {
        let cfg = WaveGeneratorConfig::tiny();
        let mut ps = ParamStore::new(DType::F32, 3);
        let g = WaveGenerator::av2a(&mut ps.root(), &cfg).unwrap();
        let ctx = Ctx::eval(ModalityMode::AV);
        let f = frames(1, 2, 0);
        assert!(g.forward(&f, Some(&audio(1, 640 + 320, 0)), &spk(1), &ctx).is_ok());
        assert!(g.forward(&f, Some(&audio(1, 640 - 100, 0)), &spk(1), &ctx).is_ok());
        assert!(g.forward(&f, Some(&audio(1, 640 + 321, 0)), &spk(1), &ctx).is_err());
    }

    #[test]
    fn decoder_receptive_field_is_local() {
        let cfg = WaveGeneratorConfig::tiny();
        let mut ps = ParamStore::new(DType::F32, 4);
        let dec = WaveDecoder::new(&mut ps.root(), &cfg).unwrap();
        let n = 40;
        let d = cfg.temporal_dim();
        let base: Vec<f32> = (0..n * d).map(|i| ((i * 37 % 17) as f32 - 8.0) / 8.0).collect();
        let x = Tensor::from_vec(base.clone(), (1, n, d), &Device::Cpu).unwrap();
        let y0 = flat_f32(&dec.forward(&x).unwrap()).unwrap();
        let j = 20;
        let mut zeroed = base;
        zeroed[j * d..(j + 1) * d].iter_mut().for_each(|v| *v = 0.0);
        let x1 = Tensor::from_vec(zeroed, (1, n, d), &Device::Cpu).unwrap();
        let y1 = flat_f32(&dec.forward(&x1).unwrap()).unwrap();
        let changed: Vec<usize> = (0..y0.len()).filter(|&i| y0[i] != y1[i]).collect();
        let (lo, hi) = (changed[0], *changed.last().unwrap());
        let centre = 320 * j + 160;
        assert!(lo < centre && hi > centre);
        // Bounded window: about nine frames either side.
        assert!(hi - lo < 320 * 24, "{lo}..{hi}");
    }

    #[test]
    fn discriminator_scales() {
        let mut ps = ParamStore::new(DType::F32, 5);
        let d = Discriminator::new(&mut ps.root(), &DiscriminatorConfig::tiny()).unwrap();
        let x = audio(2, 8000, 3);
        let scores = d.forward(&x).unwrap();
        assert_eq!(scores.len(), 3);
        let lens: Vec<usize> = scores.iter().map(|s| s.dim(2).unwrap()).collect();
        assert!(lens.windows(2).all(|w| w[0] > w[1]), "{lens:?}");
        let z = d.forward(&x.zeros_like().unwrap()).unwrap();
        assert!(z.iter().all(|s| flat_f32(s).unwrap().iter().all(|v| v.is_finite())));
        let doubled = d.forward(&x.affine(2.0, 0.0).unwrap()).unwrap();
        assert_ne!(flat_f32(&doubled[0]).unwrap(), flat_f32(&scores[0]).unwrap());
    }
}
