use std::f64::consts::PI;

use ndarray::Array2;

use super::mel::{log_mel_unclipped, MelConfig};
use super::WaveformClip;
use crate::error::{Error, Result};

/// Orthonormal DCT-II basis, `n_coeffs x n`; row k applied to a length-n
/// vector yields coefficient k.
pub fn dct_matrix(n_coeffs: usize, n: usize) -> Array2<f64> {
    let mut m = Array2::zeros((n_coeffs, n));
    for k in 0..n_coeffs {
        let scale = if k == 0 {
            (1.0 / n as f64).sqrt()
        } else {
            (2.0 / n as f64).sqrt()
        };
        for i in 0..n {
            m[[k, i]] = scale * (PI * k as f64 * (2 * i + 1) as f64 / (2 * n) as f64).cos();
        }
    }
    m
}

/// First `n_coeffs` cepstral coefficients per frame, `T' x n_coeffs`.
pub fn mfcc(wave: &WaveformClip, cfg: &MelConfig, n_coeffs: usize) -> Result<Array2<f64>> {
    if n_coeffs == 0 || n_coeffs > cfg.n_mels {
        return Err(Error::config(format!(
            "n_coeffs {} must be in 1..={}",
            n_coeffs, cfg.n_mels
        )));
    }
    let lm = log_mel_unclipped(wave, cfg)?;
    Ok(lm.dot(&dct_matrix(n_coeffs, cfg.n_mels).t()))
}
