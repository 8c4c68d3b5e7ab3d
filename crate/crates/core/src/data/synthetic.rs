//! Paired "mouth" video and harmonic audio driven by one shared latent
//! trajectory per clip, for desk-scale training without real corpora.

use std::f64::consts::PI;
use std::fs;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use super::formats::{VideoClip, DEFAULT_FPS};
use super::manifest::{Manifest, ManifestRow, Split};
use super::wav::write_wav;
use crate::dsp::WaveformClip;
use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SyntheticSpec {
    pub speakers: usize,
    pub clips_per_speaker: usize,
    pub seconds: f64,
    pub seed: u64,
    pub sample_rate: u32,
    pub height: usize,
    pub width: usize,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        Self {
            speakers: 4,
            clips_per_speaker: 5,
            seconds: 1.0,
            seed: 0,
            sample_rate: 24_000,
            height: 32,
            width: 32,
        }
    }
}

impl SyntheticSpec {
    pub fn frames_per_clip(&self) -> usize {
        (self.seconds * DEFAULT_FPS as f64).round() as usize
    }

    pub fn validate(&self) -> Result<()> {
        if self.speakers == 0 || self.clips_per_speaker == 0 {
            return Err(Error::config("speakers and clips per speaker must be at least 1"));
        }
        if !(self.seconds > 0.0) || self.frames_per_clip() == 0 {
            return Err(Error::config("clips must last at least one video frame"));
        }
        if self.sample_rate % DEFAULT_FPS != 0 {
            return Err(Error::config(format!("sample rate must be a multiple of {DEFAULT_FPS}")));
        }
        if self.height < 4 || self.width < 4 {
            return Err(Error::config("frames must be at least 4x4"));
        }
        Ok(())
    }
}

/// Per-speaker constants: pitch, spectral tilt and mouth colour.
#[derive(Debug, Clone)]
pub struct Voice {
    pub f0: f64,
    pub tilt: f64,
    pub colour: [u8; 3],
}

impl Voice {
    fn draw(rng: &mut ChaCha8Rng) -> Self {
        Self {
            f0: rng.random_range(100.0..260.0),
            tilt: rng.random_range(0.8..1.6),
            colour: [
                rng.random_range(170..=255),
                rng.random_range(120..=255),
                rng.random_range(120..=255),
            ],
        }
    }
}

/// Mouth aperture in [0, 1] per video frame: Gaussian-smoothed white noise
/// squashed through tanh.
pub fn latent_trajectory(n: usize, rng: &mut ChaCha8Rng) -> Vec<f64> {
    let noise: Vec<f64> = (0..n + 8).map(|_| StandardNormal.sample(rng)).collect();
    let sigma = 1.5f64;
    let kernel: Vec<f64> = (-4..=4).map(|k| (-(k as f64).powi(2) / (2.0 * sigma * sigma)).exp()).collect();
    let norm = kernel.iter().map(|k| k * k).sum::<f64>().sqrt();
    (0..n)
        .map(|j| {
            let z: f64 = kernel.iter().enumerate().map(|(k, w)| w * noise[j + k]).sum::<f64>() / norm;
            0.5 * (1.0 + (1.5 * z).tanh())
        })
        .collect()
}

pub fn render_video(aperture: &[f64], voice: &Voice, h: usize, w: usize) -> Result<VideoClip> {
    let (cx, cy) = (w as f64 / 2.0, h as f64 / 2.0);
    let ax = 0.35 * w as f64;
    let mut data = Vec::with_capacity(aperture.len() * h * w * 3);
    for &a in aperture {
        let ay = (0.4 * h as f64 * a).max(0.25);
        for y in 0..h {
            for x in 0..w {
                let dx = (x as f64 + 0.5 - cx) / ax;
                let dy = (y as f64 + 0.5 - cy) / ay;
                if dx * dx + dy * dy <= 1.0 {
                    data.extend_from_slice(&voice.colour);
                } else {
                    data.extend_from_slice(&[16, 16, 24]);
                }
            }
        }
    }
    VideoClip::new(aperture.len(), h, w, 3, data)
}

/// Harmonic tone at the speaker's pitch whose envelope follows the aperture,
/// linearly interpolated between video-frame centres.
pub fn render_audio(aperture: &[f64], voice: &Voice, sample_rate: u32) -> WaveformClip {
    let spf = (sample_rate / DEFAULT_FPS) as usize;
    let len = aperture.len() * spf;
    let sr = sample_rate as f64;
    let n_harm = ((0.45 * sr / voice.f0).floor() as usize).clamp(1, 10);
    let weights: Vec<f64> = (1..=n_harm).map(|k| (k as f64).powf(-voice.tilt)).collect();
    let total: f64 = weights.iter().sum();
    let samples = (0..len)
        .map(|i| {
            let pos = i as f64 / spf as f64 - 0.5;
            let j = pos.floor().max(0.0) as usize;
            let env = if pos <= 0.0 {
                aperture[0]
            } else if j + 1 >= aperture.len() {
                aperture[aperture.len() - 1]
            } else {
                let frac = pos - j as f64;
                aperture[j] * (1.0 - frac) + aperture[j + 1] * frac
            };
            let t = i as f64 / sr;
            let tone: f64 = weights
                .iter()
                .enumerate()
                .map(|(k, wk)| wk * (2.0 * PI * voice.f0 * (k + 1) as f64 * t).sin())
                .sum();
            0.6 * env * tone / total
        })
        .collect();
    WaveformClip::new(samples, sample_rate)
}

/// Writes `video/<id>.avclip`, `audio/<id>.wav` and `manifest.jsonl` under
/// `out_dir` with an 80/10/10 train/val/test split.
pub fn generate_synthetic_corpus(spec: &SyntheticSpec, out_dir: &Path, overwrite: bool) -> Result<Manifest> {
    spec.validate()?;
    if out_dir.exists() && fs::read_dir(out_dir)?.next().is_some() {
        if !overwrite {
            return Err(Error::data(out_dir, "output directory exists and is not empty"));
        }
        fs::remove_dir_all(out_dir)?;
    }
    fs::create_dir_all(out_dir)?;
    let mut speaker_rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let voices: Vec<Voice> = (0..spec.speakers).map(|_| Voice::draw(&mut speaker_rng)).collect();
    let n = spec.frames_per_clip();
    let total = spec.speakers * spec.clips_per_speaker;
    let splits = split_labels(total, spec.seed);
    let mut rows = Vec::with_capacity(total);
    for (s, voice) in voices.iter().enumerate() {
        for c in 0..spec.clips_per_speaker {
            let idx = s * spec.clips_per_speaker + c;
            let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
            rng.set_stream(1 + idx as u64);
            let aperture = latent_trajectory(n, &mut rng);
            let id = format!("s{s:02}_c{c:03}");
            let video_path = Path::new("video").join(format!("{id}.avclip"));
            let audio_path = Path::new("audio").join(format!("{id}.wav"));
            render_video(&aperture, voice, spec.height, spec.width)?.write(&out_dir.join(&video_path))?;
            write_wav(&out_dir.join(&audio_path), &render_audio(&aperture, voice, spec.sample_rate))?;
            rows.push(ManifestRow {
                id,
                speaker_id: format!("s{s:02}"),
                video_path,
                audio_path: Some(audio_path),
                synth_audio_path: None,
                transcript: None,
                split: splits[idx],
            });
        }
    }
    let m = Manifest::new(rows, out_dir)?;
    m.save(&out_dir.join("manifest.jsonl"))?;
    Ok(m)
}

/// Seeded 80/10/10 assignment; validation and test each get round(10%).
pub fn split_labels(total: usize, seed: u64) -> Vec<Split> {
    let n_hold = (total as f64 * 0.1).round() as usize;
    let mut order: Vec<usize> = (0..total).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(0xC0FFEE);
    for i in (1..total).rev() {
        order.swap(i, rng.random_range(0..=i));
    }
    let mut labels = vec![Split::Train; total];
    for (rank, &i) in order.iter().enumerate() {
        if rank < n_hold {
            labels[i] = Split::Val;
        } else if rank < 2 * n_hold {
            labels[i] = Split::Test;
        }
    }
    labels
}
