use ndarray::Array2;
use rustfft::num_complex::Complex64;

use super::mel::{mel_filterbank, LogMelSpec, MelConfig, LOG_FLOOR};
use super::stft::{istft, StftEngine};
use super::WaveformClip;
use crate::error::{Error, Result};

const NNLS_ITERS: usize = 200;

/// Largest eigenvalue of `a^T a` by power iteration.
fn lipschitz(a: &Array2<f64>) -> f64 {
    let mut v = ndarray::Array1::from_elem(a.ncols(), 1.0 / (a.ncols() as f64).sqrt());
    let mut lambda = 0.0;
    for _ in 0..50 {
        let w = a.t().dot(&a.dot(&v));
        lambda = w.dot(&w).sqrt();
        if lambda == 0.0 {
            return 0.0;
        }
        v = w / lambda;
    }
    lambda
}

/// Solves `min_S ||fb S - M||^2, S >= 0` column-wise with accelerated
/// projected gradient. `mel` is `T' x n_mels` linear energy; the result is
/// `T' x n_bins` linear magnitude.
pub fn mel_to_linear(mel: &Array2<f64>, fb: &Array2<f64>) -> Array2<f64> {
    let target = mel.t().to_owned();
    let l = lipschitz(fb);
    let (n_bins, t) = (fb.ncols(), mel.nrows());
    if l == 0.0 {
        return Array2::zeros((t, n_bins));
    }
    let step = 1.0 / l;
    let mut s: Array2<f64> = Array2::zeros((n_bins, t));
    let mut y = s.clone();
    let mut momentum = 1.0f64;
    for _ in 0..NNLS_ITERS {
        let resid = fb.dot(&y) - &target;
        let grad = fb.t().dot(&resid);
        let next = (&y - &(grad * step)).mapv(|v| v.max(0.0));
        let m_next = (1.0 + (1.0 + 4.0 * momentum * momentum).sqrt()) / 2.0;
        y = &next + &((&next - &s) * ((momentum - 1.0) / m_next));
        s = next;
        momentum = m_next;
    }
    s.t().to_owned()
}

/// Undoes rescaling and the log; entries at the clip floor are treated as
/// silence.
fn linear_mel(spec: &LogMelSpec, cfg: &MelConfig) -> Array2<f64> {
    spec.frames.mapv(|v| {
        let log = cfg.unscale(v as f64);
        if log <= cfg.clip_lo.max(LOG_FLOOR.ln()) + 1e-6 {
            0.0
        } else {
            log.exp()
        }
    })
}

/// Griffin-Lim phase reconstruction from a normalized log-mel spectrogram.
/// Starts from zero phase, so the result is deterministic. Returns the
/// waveform and the spectral magnitude error after each iteration.
pub fn griffin_lim_traced(
    spec: &LogMelSpec,
    cfg: &MelConfig,
    iters: usize,
) -> Result<(WaveformClip, Vec<f64>)> {
    if iters == 0 {
        return Err(Error::config("griffin-lim needs at least one iteration"));
    }
    if spec.n_mels() != cfg.n_mels {
        return Err(Error::shape(format!(
            "spectrogram has {} bands, config {}",
            spec.n_mels(),
            cfg.n_mels
        )));
    }
    let n_frames = spec.n_frames();
    let out_len = n_frames.saturating_sub(1) * cfg.stft.hop_size;
    let fb = mel_filterbank(cfg)?;
    let mel = linear_mel(spec, cfg);
    if out_len == 0 || mel.iter().all(|&v| v == 0.0) {
        return Ok((WaveformClip::silence(out_len, cfg.sample_rate), vec![0.0; iters]));
    }
    let target = mel_to_linear(&mel, &fb);
    let engine = StftEngine::new(cfg.stft)?;
    let mut phased: Array2<Complex64> = target.mapv(|m| Complex64::new(m, 0.0));
    let mut trace = Vec::with_capacity(iters);
    let mut wave = Vec::new();
    for _ in 0..iters {
        wave = istft(&phased, &cfg.stft)?;
        let rebuilt = engine.forward(&wave);
        let mut err = 0.0;
        for ((p, r), m) in phased.iter_mut().zip(rebuilt.iter()).zip(target.iter()) {
            let mag = r.norm();
            err += (mag - m) * (mag - m);
            *p = if mag > 0.0 {
                r * (m / mag)
            } else {
                Complex64::new(*m, 0.0)
            };
        }
        trace.push(err.sqrt());
    }
    Ok((WaveformClip::new(wave, cfg.sample_rate), trace))
}

pub fn griffin_lim(spec: &LogMelSpec, cfg: &MelConfig, iters: usize) -> Result<WaveformClip> {
    Ok(griffin_lim_traced(spec, cfg, iters)?.0)
}
