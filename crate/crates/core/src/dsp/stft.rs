use std::f64::consts::PI;
use std::sync::Arc;

use ndarray::Array2;
use rustfft::num_complex::Complex64;
use rustfft::{Fft, FftPlanner};
use serde::{Deserialize, Serialize};

use super::WaveformClip;
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum Window {
    #[default]
    Hann,
}

/// Analysis parameters of a short-time Fourier transform, in samples.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StftConfig {
    pub fft_size: usize,
    pub hop_size: usize,
    pub win_size: usize,
    #[serde(default)]
    pub window: Window,
    #[serde(default = "default_centered")]
    pub centered: bool,
}

fn default_centered() -> bool {
    true
}

impl StftConfig {
    pub fn new(fft_size: usize, hop_size: usize, win_size: usize) -> Self {
        Self {
            fft_size,
            hop_size,
            win_size,
            window: Window::Hann,
            centered: true,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.fft_size == 0 || self.hop_size == 0 || self.win_size == 0 {
            return Err(Error::config("stft sizes must be positive"));
        }
        if self.win_size > self.fft_size {
            return Err(Error::config(format!(
                "win_size {} exceeds fft_size {}",
                self.win_size, self.fft_size
            )));
        }
        if self.hop_size > self.win_size {
            return Err(Error::config(format!(
                "hop_size {} exceeds win_size {}",
                self.hop_size, self.win_size
            )));
        }
        Ok(())
    }

    pub fn n_bins(&self) -> usize {
        self.fft_size / 2 + 1
    }

    /// Number of frames produced for a signal of `len` samples.
    pub fn n_frames(&self, len: usize) -> usize {
        if self.centered {
            1 + len / self.hop_size
        } else if len >= self.fft_size {
            1 + (len - self.fft_size) / self.hop_size
        } else {
            0
        }
    }

    /// Left/right padding applied before framing.
    pub fn pad(&self) -> usize {
        if self.centered {
            self.fft_size / 2
        } else {
            0
        }
    }

    /// The analysis window zero-padded (centered) to `fft_size`.
    pub fn padded_window(&self) -> Vec<f64> {
        let mut out = vec![0.0; self.fft_size];
        let offset = (self.fft_size - self.win_size) / 2;
        for (i, w) in hann(self.win_size).into_iter().enumerate() {
            out[offset + i] = w;
        }
        out
    }
}

/// Periodic Hann window.
pub fn hann(len: usize) -> Vec<f64> {
    (0..len)
        .map(|n| 0.5 - 0.5 * (2.0 * PI * n as f64 / len as f64).cos())
        .collect()
}

/// Maps an index of the padded signal back into `0..len` by mirror reflection
/// about the end samples (the edge sample is not repeated). Works for pads
/// longer than the signal by reflecting repeatedly.
pub fn reflect_index(i: isize, len: usize) -> usize {
    if len == 1 {
        return 0;
    }
    let period = 2 * (len as isize - 1);
    let mut m = i.rem_euclid(period);
    if m >= len as isize {
        m = period - m;
    }
    m as usize
}

/// Sample indices (into the unpadded signal) feeding each frame; row-major
/// `n_frames x fft_size`. Used by the differentiable STFT in the loss code.
pub fn frame_indices(cfg: &StftConfig, len: usize) -> Vec<u32> {
    let n_frames = cfg.n_frames(len);
    let pad = cfg.pad() as isize;
    let mut idx = Vec::with_capacity(n_frames * cfg.fft_size);
    for t in 0..n_frames {
        let start = (t * cfg.hop_size) as isize - pad;
        for k in 0..cfg.fft_size {
            idx.push(reflect_index(start + k as isize, len) as u32);
        }
    }
    idx
}

/// Complex spectrogram, `n_frames x (fft_size/2 + 1)`.
pub fn stft(wave: &WaveformClip, cfg: &StftConfig) -> Result<Array2<Complex64>> {
    stft_samples(&wave.samples, cfg)
}

pub fn stft_samples(samples: &[f64], cfg: &StftConfig) -> Result<Array2<Complex64>> {
    cfg.validate()?;
    if samples.is_empty() {
        return Err(Error::EmptySignal);
    }
    let plan = FftPlanner::<f64>::new().plan_fft_forward(cfg.fft_size);
    Ok(stft_with_plan(samples, cfg, &plan, &cfg.padded_window()))
}

fn stft_with_plan(
    samples: &[f64],
    cfg: &StftConfig,
    plan: &Arc<dyn Fft<f64>>,
    window: &[f64],
) -> Array2<Complex64> {
    let n_frames = cfg.n_frames(samples.len());
    let n_bins = cfg.n_bins();
    let pad = cfg.pad() as isize;
    let mut out = Array2::zeros((n_frames, n_bins));
    let mut buf = vec![Complex64::new(0.0, 0.0); cfg.fft_size];
    for t in 0..n_frames {
        let start = (t * cfg.hop_size) as isize - pad;
        for (k, slot) in buf.iter_mut().enumerate() {
            let s = samples[reflect_index(start + k as isize, samples.len())];
            *slot = Complex64::new(s * window[k], 0.0);
        }
        plan.process(&mut buf);
        for (f, v) in buf.iter().take(n_bins).enumerate() {
            out[[t, f]] = *v;
        }
    }
    out
}

/// Magnitude spectrogram.
pub fn magnitude(spec: &Array2<Complex64>) -> Array2<f64> {
    spec.mapv(|c| c.norm())
}

/// Weighted overlap-add inverse of [`stft`]. For centered transforms the
/// padding is removed and the result has `(n_frames - 1) * hop` samples.
pub fn istft(spec: &Array2<Complex64>, cfg: &StftConfig) -> Result<Vec<f64>> {
    cfg.validate()?;
    let (n_frames, n_bins) = spec.dim();
    if n_bins != cfg.n_bins() {
        return Err(Error::shape(format!(
            "istft expects {} bins, got {}",
            cfg.n_bins(),
            n_bins
        )));
    }
    if n_frames == 0 {
        return Ok(Vec::new());
    }
    let n = cfg.fft_size;
    let plan = FftPlanner::<f64>::new().plan_fft_inverse(n);
    let window = cfg.padded_window();
    let full_len = n + (n_frames - 1) * cfg.hop_size;
    let mut acc = vec![0.0; full_len];
    let mut norm = vec![0.0; full_len];
    let mut buf = vec![Complex64::new(0.0, 0.0); n];
    for t in 0..n_frames {
        for f in 0..n_bins {
            buf[f] = spec[[t, f]];
        }
        // Hermitian completion of the one-sided spectrum.
        for f in n_bins..n {
            buf[f] = spec[[t, n - f]].conj();
        }
        plan.process(&mut buf);
        let start = t * cfg.hop_size;
        for k in 0..n {
            acc[start + k] += buf[k].re / n as f64 * window[k];
            norm[start + k] += window[k] * window[k];
        }
    }
    for (a, w) in acc.iter_mut().zip(&norm) {
        if *w > 1e-11 {
            *a /= *w;
        }
    }
    if cfg.centered {
        let pad = cfg.pad();
        let len = (n_frames - 1) * cfg.hop_size;
        Ok(acc[pad..pad + len].to_vec())
    } else {
        Ok(acc)
    }
}

/// Reusable forward/inverse plans for iterative algorithms.
pub(crate) struct StftEngine {
    cfg: StftConfig,
    forward: Arc<dyn Fft<f64>>,
    window: Vec<f64>,
}

impl StftEngine {
    pub fn new(cfg: StftConfig) -> Result<Self> {
        cfg.validate()?;
        let forward = FftPlanner::<f64>::new().plan_fft_forward(cfg.fft_size);
        Ok(Self {
            window: cfg.padded_window(),
            cfg,
            forward,
        })
    }

    pub fn forward(&self, samples: &[f64]) -> Array2<Complex64> {
        stft_with_plan(samples, &self.cfg, &self.forward, &self.window)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn reflect_matches_numpy_convention() {
        // np.pad([0,1,2,3], 3, mode="reflect") -> [3,2,1,0,1,2,3,2,1,0]
        let got: Vec<usize> = (-3..7).map(|i| reflect_index(i, 4)).collect();
        assert_eq!(got, vec![3, 2, 1, 0, 1, 2, 3, 2, 1, 0]);
        assert_eq!(reflect_index(-5, 1), 0);
    }

    #[test]
    fn window_is_periodic_hann() {
        let w = hann(8);
        assert_eq!(w[0], 0.0);
        assert!((w[4] - 1.0).abs() < 1e-15);
        for n in 1..8 {
            assert!((w[n] - w[8 - n]).abs() < 1e-15);
        }
    }

    #[test]
    fn config_errors() {
        assert!(StftConfig::new(256, 64, 512).validate().is_err());
        assert!(StftConfig::new(256, 300, 256).validate().is_err());
        assert!(StftConfig::new(256, 64, 256).validate().is_ok());
        let e = stft_samples(&[], &StftConfig::new(256, 64, 256)).unwrap_err();
        assert_eq!(e.to_string(), "empty signal");
    }

    #[test]
    fn istft_inverts_stft() {
        let cfg = StftConfig::new(512, 128, 512);
        let x: Vec<f64> = (0..4096).map(|i| ((i as f64) * 0.013).sin() * 0.5).collect();
        let spec = stft_samples(&x, &cfg).unwrap();
        let y = istft(&spec, &cfg).unwrap();
        assert_eq!(y.len(), (spec.nrows() - 1) * 128);
        for (a, b) in x.iter().zip(&y) {
            assert!((a - b).abs() < 1e-9);
        }
    }
}
