use ndarray::Array2;
use serde::{Deserialize, Serialize};

use super::stft::{magnitude, stft, StftConfig};
use super::WaveformClip;
use crate::error::{Error, Result};

/// Floor applied to mel energies before the logarithm.
pub const LOG_FLOOR: f64 = 1e-5;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MelConfig {
    pub stft: StftConfig,
    pub n_mels: usize,
    pub sample_rate: u32,
    pub fmin: f64,
    pub fmax: f64,
    pub clip_lo: f64,
    pub clip_hi: f64,
}

impl Default for MelConfig {
    fn default() -> Self {
        Self::for_sample_rate(24_000)
    }
}

impl MelConfig {
    /// 12.5 ms hop, 50 ms window, FFT size the next power of two of the
    /// window. At 24 kHz this is (2048, 300, 1200).
    pub fn for_sample_rate(sample_rate: u32) -> Self {
        let hop = (sample_rate as f64 * 0.0125).round() as usize;
        let win = (sample_rate as f64 * 0.05).round() as usize;
        Self {
            stft: StftConfig::new(win.next_power_of_two(), hop, win),
            n_mels: 80,
            sample_rate,
            fmin: 0.0,
            fmax: sample_rate as f64 / 2.0,
            clip_lo: -6.0,
            clip_hi: 6.0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.stft.validate()?;
        if self.n_mels == 0 || self.n_mels >= self.stft.n_bins() {
            return Err(Error::config(format!(
                "n_mels {} must be in 1..{}",
                self.n_mels,
                self.stft.n_bins()
            )));
        }
        if self.clip_lo >= self.clip_hi {
            return Err(Error::config("clip_lo must be below clip_hi"));
        }
        if !(self.fmin >= 0.0 && self.fmin < self.fmax && self.fmax <= self.sample_rate as f64 / 2.0)
        {
            return Err(Error::config(format!(
                "invalid mel band edges {}..{}",
                self.fmin, self.fmax
            )));
        }
        Ok(())
    }

    pub fn frame_rate(&self) -> f64 {
        self.sample_rate as f64 / self.stft.hop_size as f64
    }

    pub fn n_frames(&self, n_samples: usize) -> usize {
        self.stft.n_frames(n_samples)
    }

    /// Maps a clipped log energy onto [-1, 1].
    pub fn rescale(&self, v: f64) -> f64 {
        2.0 * (v - self.clip_lo) / (self.clip_hi - self.clip_lo) - 1.0
    }

    pub fn unscale(&self, v: f64) -> f64 {
        (v + 1.0) / 2.0 * (self.clip_hi - self.clip_lo) + self.clip_lo
    }
}

/// `T' x n_mels` normalized log-mel spectrogram.
#[derive(Debug, Clone, PartialEq)]
pub struct LogMelSpec {
    pub frames: Array2<f32>,
    pub frame_rate: f64,
}

impl LogMelSpec {
    pub fn n_frames(&self) -> usize {
        self.frames.nrows()
    }

    pub fn n_mels(&self) -> usize {
        self.frames.ncols()
    }
}

fn hz_to_mel(f: f64) -> f64 {
    let f_sp = 200.0 / 3.0;
    let min_log_hz = 1000.0;
    let min_log_mel = min_log_hz / f_sp;
    let logstep = 6.4f64.ln() / 27.0;
    if f >= min_log_hz {
        min_log_mel + (f / min_log_hz).ln() / logstep
    } else {
        f / f_sp
    }
}

fn mel_to_hz(m: f64) -> f64 {
    let f_sp = 200.0 / 3.0;
    let min_log_hz = 1000.0;
    let min_log_mel = min_log_hz / f_sp;
    let logstep = 6.4f64.ln() / 27.0;
    if m >= min_log_mel {
        min_log_hz * (logstep * (m - min_log_mel)).exp()
    } else {
        f_sp * m
    }
}

/// Slaney-scale triangular filters with area normalization,
/// `n_mels x (fft_size/2 + 1)`.
pub fn mel_filterbank(cfg: &MelConfig) -> Result<Array2<f64>> {
    cfg.validate()?;
    let n_bins = cfg.stft.n_bins();
    let sr = cfg.sample_rate as f64;
    let lo = hz_to_mel(cfg.fmin);
    let hi = hz_to_mel(cfg.fmax);
    let edges: Vec<f64> = (0..cfg.n_mels + 2)
        .map(|i| mel_to_hz(lo + (hi - lo) * i as f64 / (cfg.n_mels + 1) as f64))
        .collect();
    let mut fb = Array2::zeros((cfg.n_mels, n_bins));
    for m in 0..cfg.n_mels {
        let (f0, f1, f2) = (edges[m], edges[m + 1], edges[m + 2]);
        let norm = 2.0 / (f2 - f0);
        for k in 0..n_bins {
            let f = k as f64 * sr / cfg.stft.fft_size as f64;
            let lower = (f - f0) / (f1 - f0);
            let upper = (f2 - f) / (f2 - f1);
            let w = lower.min(upper).max(0.0);
            fb[[m, k]] = w * norm;
        }
    }
    for m in 0..cfg.n_mels {
        if fb.row(m).iter().all(|&w| w == 0.0) {
            return Err(Error::config(format!(
                "mel filter {m} has empty support; reduce n_mels or grow fft_size"
            )));
        }
    }
    Ok(fb)
}

fn check_rate(wave: &WaveformClip, cfg: &MelConfig) -> Result<()> {
    if wave.sample_rate != cfg.sample_rate {
        return Err(Error::config(format!(
            "sample rate {} does not match mel config {}",
            wave.sample_rate, cfg.sample_rate
        )));
    }
    Ok(())
}

/// Natural-log mel energies of the magnitude spectrum, floored but not
/// clipped, `T' x n_mels`.
pub fn log_mel_unclipped(wave: &WaveformClip, cfg: &MelConfig) -> Result<Array2<f64>> {
    check_rate(wave, cfg)?;
    let fb = mel_filterbank(cfg)?;
    let mag = magnitude(&stft(wave, &cfg.stft)?);
    let mel = mag.dot(&fb.t());
    Ok(mel.mapv(|v| v.max(LOG_FLOOR).ln()))
}

pub fn log_mel(wave: &WaveformClip, cfg: &MelConfig) -> Result<LogMelSpec> {
    let raw = log_mel_unclipped(wave, cfg)?;
    let frames = raw.mapv(|v| cfg.rescale(v.clamp(cfg.clip_lo, cfg.clip_hi)) as f32);
    Ok(LogMelSpec {
        frames,
        frame_rate: cfg.frame_rate(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_parameters() {
        let cfg = MelConfig::default();
        assert_eq!(
            (cfg.stft.fft_size, cfg.stft.hop_size, cfg.stft.win_size),
            (2048, 300, 1200)
        );
        assert_eq!(cfg.frame_rate(), 80.0);
        let low = MelConfig::for_sample_rate(8000);
        assert_eq!(
            (low.stft.fft_size, low.stft.hop_size, low.stft.win_size),
            (512, 100, 400)
        );
    }

    #[test]
    fn mel_scale_round_trip() {
        for f in [0.0, 200.0, 999.0, 1000.0, 4000.0, 12000.0] {
            assert!((mel_to_hz(hz_to_mel(f)) - f).abs() < 1e-9);
        }
    }

    #[test]
    fn filterbank_is_nonnegative_with_support() {
        for sr in [8000, 16000, 24000] {
            let fb = mel_filterbank(&MelConfig::for_sample_rate(sr)).unwrap();
            assert_eq!(fb.dim(), (80, MelConfig::for_sample_rate(sr).stft.n_bins()));
            assert!(fb.iter().all(|&w| w >= 0.0));
        }
    }

    #[test]
    fn silence_maps_to_minus_one() {
        let cfg = MelConfig::default();
        let spec = log_mel(&WaveformClip::silence(9600, 24000), &cfg).unwrap();
        assert_eq!(spec.frames.dim(), (33, 80));
        assert!(spec.frames.iter().all(|&v| v == -1.0));
    }

    #[test]
    fn rate_mismatch_is_an_error() {
        let cfg = MelConfig::default();
        assert!(log_mel(&WaveformClip::silence(800, 8000), &cfg).is_err());
    }

    #[test]
    fn rescale_inverts() {
        let cfg = MelConfig::default();
        for v in [-6.0, -2.5, 0.0, 3.3, 6.0] {
            assert!((cfg.unscale(cfg.rescale(v)) - v).abs() < 1e-12);
        }
    }
}
