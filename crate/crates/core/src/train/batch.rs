//! Clip loading and batch assembly for training, synthesis and evaluation.

use std::collections::HashMap;
use std::path::{Path, PathBuf};

use candle_core::{Device, Tensor};
use ndarray::Array2;
use rand::Rng;
use sha2::{Digest, Sha256};

use crate::data::{pick_speaker_reference, read_mel, read_wav, Manifest, VideoClip, DEFAULT_FPS};
use crate::dsp::resample::resample;
use crate::dsp::{log_mel, LogMelSpec, MelConfig, WaveformClip};
use crate::error::{Error, Result};
use crate::models::Family;
use crate::nn::{SpeakerEmbedding, SpeakerEncoder};

/// Which optional inputs a consumer needs from each row.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Needs {
    pub audio: bool,
    pub synth: Option<Family>,
}

pub struct ClipData {
    pub row: usize,
    pub id: String,
    pub video: VideoClip,
    pub audio: Option<WaveformClip>,
    pub synth_wave: Option<WaveformClip>,
    pub synth_mel: Option<LogMelSpec>,
}

/// Loaded rows of one manifest at the model's sample rate, plus a speaker
/// embedding for every row that has audio.
pub struct Dataset {
    pub manifest: Manifest,
    pub clips: Vec<ClipData>,
    pub sample_rate: u32,
    pub mel: MelConfig,
    embeddings: HashMap<PathBuf, SpeakerEmbedding>,
    pub fallbacks: usize,
}

pub fn load_audio(path: &Path, sample_rate: u32) -> Result<WaveformClip> {
    let w = read_wav(path)?;
    if w.is_empty() {
        return Err(Error::data(path, "empty audio"));
    }
    Ok(if w.sample_rate == sample_rate {
        w
    } else {
        WaveformClip::new(resample(&w.samples, w.sample_rate, sample_rate), sample_rate)
    })
}

impl Dataset {
    pub fn load(manifest: &Manifest, rows: &[usize], sample_rate: u32, needs: Needs, speaker: &SpeakerEncoder) -> Result<Self> {
        let spf = (sample_rate / DEFAULT_FPS) as usize;
        let mel = MelConfig::for_sample_rate(sample_rate);
        let mut clips = Vec::with_capacity(rows.len());
        for &row in rows {
            let r = &manifest.rows[row];
            let video = VideoClip::read(&manifest.resolve(&r.video_path))?;
            let target = video.n * spf;
            let audio = if needs.audio {
                Some(load_audio(&manifest.require(row, "audio_path")?, sample_rate)?.fit_to(target))
            } else {
                None
            };
            let (mut synth_wave, mut synth_mel) = (None, None);
            match needs.synth {
                Some(Family::Wave) => {
                    let p = manifest.require(row, "synth_audio_path")?;
                    synth_wave = Some(load_audio(&p, sample_rate)?);
                }
                Some(Family::Mel) => {
                    let p = manifest.require(row, "synth_audio_path")?;
                    let m = read_mel(&p, mel.frame_rate())?;
                    if m.n_mels() != mel.n_mels {
                        return Err(Error::data(p, format!("mel file has {} bands, expected {}", m.n_mels(), mel.n_mels)));
                    }
                    synth_mel = Some(m);
                }
                None => {}
            }
            clips.push(ClipData {
                row,
                id: r.id.clone(),
                video,
                audio,
                synth_wave,
                synth_mel,
            });
        }
        let mut embeddings = HashMap::new();
        for (i, r) in manifest.rows.iter().enumerate() {
            if r.audio_path.is_some() && rows.iter().any(|&k| manifest.rows[k].speaker_id == r.speaker_id) {
                let p = manifest.require(i, "audio_path")?;
                let e = speaker.encode(&load_audio(&p, sample_rate)?)?;
                embeddings.insert(p, e);
            }
        }
        Ok(Self {
            manifest: manifest.clone(),
            clips,
            sample_rate,
            mel,
            embeddings,
            fallbacks: 0,
        })
    }

    pub fn len(&self) -> usize {
        self.clips.len()
    }

    pub fn is_empty(&self) -> bool {
        self.clips.is_empty()
    }

    pub fn samples_per_frame(&self) -> usize {
        (self.sample_rate / DEFAULT_FPS) as usize
    }

    fn speaker(&mut self, row: usize, rng: &mut impl Rng) -> Result<SpeakerEmbedding> {
        let (p, fallback) = pick_speaker_reference(&self.manifest, row, rng)?;
        if fallback {
            self.fallbacks += 1;
        }
        self.embeddings
            .get(&p)
            .cloned()
            .ok_or_else(|| Error::data(p, "no speaker embedding for reference audio"))
    }

    /// Stacks clips `idx` into one batch, truncating every clip to the
    /// shortest one. Frames are flipped clip-wise when `augment` is set.
    pub fn batch(&mut self, idx: &[usize], augment: bool, max_frames: Option<usize>, rng: &mut impl Rng) -> Result<Batch> {
        if idx.is_empty() {
            return Err(Error::config("empty batch"));
        }
        let shortest = idx.iter().map(|&i| self.clips[i].video.n).min().expect("non-empty");
        let n = max_frames.map_or(shortest, |m| shortest.min(m.max(1)));
        let off = if n < shortest { rng.random_range(0..=shortest - n) } else { 0 };
        let spf = self.samples_per_frame();
        let len = n * spf;
        let start = off * spf;
        let mel_off = (start as f64 / self.mel.stft.hop_size as f64).round() as usize;
        let t_mel = self.mel.n_frames(len);
        let mut frames = Vec::new();
        let mut spk = Vec::new();
        let (mut audio, mut target_mel, mut synth_wave, mut synth_mel) = (Vec::new(), Vec::new(), Vec::new(), Vec::new());
        for &i in idx {
            let row = self.clips[i].row;
            spk.extend(self.speaker(row, rng)?.0.iter().map(|&v| v as f32));
            let c = &self.clips[i];
            let (f, _) = crate::data::preprocess_frames(&c.video, augment, rng)?;
            frames.push(f.narrow(0, off, n)?);
            let window = |w: &WaveformClip| WaveformClip::new(w.samples[start.min(w.len())..].to_vec(), w.sample_rate).fit_to(len);
            if let Some(a) = &c.audio {
                let a = window(a);
                target_mel.push(log_mel(&a, &self.mel)?.frames);
                audio.extend(a.samples_f32());
            }
            if let Some(s) = &c.synth_wave {
                synth_wave.extend(window(s).samples_f32());
            }
            if let Some(m) = &c.synth_mel {
                if m.n_frames() < mel_off + t_mel {
                    return Err(Error::data(
                        &c.id,
                        format!("synthesized spectrogram has {} frames, need {}", m.n_frames(), mel_off + t_mel),
                    ));
                }
                synth_mel.push(m.frames.slice(ndarray::s![mel_off..mel_off + t_mel, ..]).to_owned());
            }
        }
        let b = idx.len();
        let dev = Device::Cpu;
        let stack_mel = |v: Vec<Array2<f32>>| -> Result<Option<Tensor>> {
            if v.is_empty() {
                return Ok(None);
            }
            let m = v[0].ncols();
            let flat: Vec<f32> = v.iter().flat_map(|a| a.iter().copied()).collect();
            Ok(Some(Tensor::from_vec(flat, (b, t_mel, m), &dev)?))
        };
        let wave = |v: Vec<f32>| -> Result<Option<Tensor>> {
            Ok(if v.is_empty() { None } else { Some(Tensor::from_vec(v, (b, len), &dev)?) })
        };
        Ok(Batch {
            ids: idx.iter().map(|&i| self.clips[i].id.clone()).collect(),
            frames: Tensor::stack(&frames, 0)?,
            spk: Tensor::from_vec(spk, (b, crate::nn::SPEAKER_DIM), &dev)?,
            audio: wave(audio)?,
            target_mel: stack_mel(target_mel)?,
            synth_wave: wave(synth_wave)?,
            synth_mel: stack_mel(synth_mel)?,
            n_frames: n,
            mel_frames: t_mel,
        })
    }
}

pub struct Batch {
    pub ids: Vec<String>,
    /// (batch, N, 3, H, W)
    pub frames: Tensor,
    /// (batch, 256)
    pub spk: Tensor,
    /// Ground truth (batch, N * samples_per_frame)
    pub audio: Option<Tensor>,
    /// Ground-truth log-mel (batch, T', n_mels)
    pub target_mel: Option<Tensor>,
    pub synth_wave: Option<Tensor>,
    pub synth_mel: Option<Tensor>,
    pub n_frames: usize,
    pub mel_frames: usize,
}

/// SHA-256 over the little-endian f32 bytes of a tensor.
pub fn tensor_hash(t: &Tensor) -> Result<String> {
    let v = crate::nn::flat_f32(t)?;
    let mut h = Sha256::new();
    for x in v {
        h.update(x.to_le_bytes());
    }
    Ok(hex::encode(h.finalize()))
}
