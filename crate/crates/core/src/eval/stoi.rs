//! Short-time objective intelligibility (STOI) and its extended variant,
//! computed at 10 kHz.

use ndarray::{s, Array2, Array3, Axis};
use rustfft::num_complex::Complex;
use rustfft::FftPlanner;

use crate::dsp::resample::resample;
use crate::dsp::WaveformClip;
use crate::error::{Error, Result};

pub const STOI_RATE: u32 = 10_000;
const FRAME: usize = 256;
const HOP: usize = 128;
const NFFT: usize = 512;
const BANDS: usize = 15;
const MIN_FREQ: f64 = 150.0;
/// Frames per intermediate intelligibility segment (384 ms).
const SEGMENT: usize = 30;
const BETA_DB: f64 = -15.0;
const DYN_RANGE_DB: f64 = 40.0;
const EPS: f64 = f64::EPSILON;

/// Symmetric Hann window without its zero end points.
fn hann_inner(n: usize) -> Vec<f64> {
    (1..=n)
        .map(|i| 0.5 - 0.5 * (2.0 * std::f64::consts::PI * i as f64 / (n + 1) as f64).cos())
        .collect()
}

fn frame_starts(len: usize) -> impl Iterator<Item = usize> {
    (0..len.saturating_sub(FRAME)).step_by(HOP)
}

/// Drops frames more than 40 dB below the loudest clean frame from both
/// signals and overlap-adds the remainder.
fn remove_silent_frames(x: &[f64], y: &[f64]) -> (Vec<f64>, Vec<f64>) {
    let w = hann_inner(FRAME);
    let frames = |v: &[f64]| -> Vec<Vec<f64>> {
        frame_starts(v.len()).map(|i| (0..FRAME).map(|k| w[k] * v[i + k]).collect()).collect()
    };
    let (xf, yf) = (frames(x), frames(y));
    let energy: Vec<f64> = xf
        .iter()
        .map(|f| 20.0 * (f.iter().map(|v| v * v).sum::<f64>().sqrt() + EPS).log10())
        .collect();
    let max = energy.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let keep: Vec<usize> = (0..xf.len()).filter(|&i| max - DYN_RANGE_DB - energy[i] < 0.0).collect();
    let ola = |f: &[Vec<f64>]| -> Vec<f64> {
        if keep.is_empty() {
            return Vec::new();
        }
        let mut out = vec![0.0; (keep.len() - 1) * HOP + FRAME];
        for (j, &i) in keep.iter().enumerate() {
            for k in 0..FRAME {
                out[j * HOP + k] += f[i][k];
            }
        }
        out
    };
    (ola(&xf), ola(&yf))
}

/// One-third octave band matrix (bands x bins) over an NFFT-point spectrum.
fn third_octave_bands() -> Array2<f64> {
    let bins = NFFT / 2 + 1;
    let f: Vec<f64> = (0..bins).map(|k| k as f64 * STOI_RATE as f64 / NFFT as f64).collect();
    let nearest = |target: f64| {
        let mut best = 0;
        for (i, &v) in f.iter().enumerate() {
            if (v - target).powi(2) < (f[best] - target).powi(2) {
                best = i;
            }
        }
        best
    };
    let mut obm = Array2::zeros((BANDS, bins));
    for b in 0..BANDS {
        let lo = nearest(MIN_FREQ * 2f64.powf((2.0 * b as f64 - 1.0) / 6.0));
        let hi = nearest(MIN_FREQ * 2f64.powf((2.0 * b as f64 + 1.0) / 6.0));
        obm.slice_mut(s![b, lo..hi]).fill(1.0);
    }
    obm
}

/// Band envelopes (bands x frames).
fn band_envelopes(x: &[f64], obm: &Array2<f64>) -> Array2<f64> {
    let w = hann_inner(FRAME);
    let fft = FftPlanner::new().plan_fft_forward(NFFT);
    let starts: Vec<usize> = frame_starts(x.len()).collect();
    let bins = NFFT / 2 + 1;
    let mut power = Array2::zeros((bins, starts.len()));
    let mut buf = vec![Complex::new(0.0, 0.0); NFFT];
    for (j, &i) in starts.iter().enumerate() {
        buf.iter_mut().for_each(|c| *c = Complex::new(0.0, 0.0));
        for k in 0..FRAME {
            buf[k].re = w[k] * x[i + k];
        }
        fft.process(&mut buf);
        for k in 0..bins {
            power[[k, j]] = buf[k].norm_sqr();
        }
    }
    obm.dot(&power).mapv(f64::sqrt)
}

/// (segments, bands, SEGMENT) sliding windows over band envelopes.
fn segments(tob: &Array2<f64>) -> Array3<f64> {
    let n = tob.ncols() + 1 - SEGMENT;
    let mut out = Array3::zeros((n, BANDS, SEGMENT));
    for m in 0..n {
        out.slice_mut(s![m, .., ..]).assign(&tob.slice(s![.., m..m + SEGMENT]));
    }
    out
}

fn centre_and_normalize(v: &mut [f64]) {
    let mean = v.iter().sum::<f64>() / v.len() as f64;
    v.iter_mut().for_each(|x| *x -= mean);
    let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt() + EPS;
    v.iter_mut().for_each(|x| *x /= norm);
}

fn classic(xs: &Array3<f64>, ys: &Array3<f64>) -> f64 {
    let clip = 10f64.powf(-BETA_DB / 20.0);
    let (j, m) = (xs.shape()[0], xs.shape()[1]);
    let mut total = 0.0;
    for seg in 0..j {
        for band in 0..m {
            let x: Vec<f64> = xs.slice(s![seg, band, ..]).to_vec();
            let y: Vec<f64> = ys.slice(s![seg, band, ..]).to_vec();
            let nx = x.iter().map(|v| v * v).sum::<f64>().sqrt();
            let ny = y.iter().map(|v| v * v).sum::<f64>().sqrt();
            let scale = nx / (ny + EPS);
            let mut yp: Vec<f64> = y.iter().zip(&x).map(|(&yv, &xv)| (yv * scale).min(xv * (1.0 + clip))).collect();
            let mut xc = x;
            centre_and_normalize(&mut yp);
            centre_and_normalize(&mut xc);
            total += yp.iter().zip(&xc).map(|(a, b)| a * b).sum::<f64>();
        }
    }
    total / (j * m) as f64
}

/// Mean and norm normalization along time, then along bands.
fn row_col_normalize(seg: &mut Array2<f64>) {
    for mut row in seg.rows_mut() {
        let mut v = row.to_vec();
        centre_and_normalize(&mut v);
        row.assign(&ndarray::Array1::from(v));
    }
    for mut col in seg.columns_mut() {
        let mut v = col.to_vec();
        centre_and_normalize(&mut v);
        col.assign(&ndarray::Array1::from(v));
    }
}

fn extended(xs: &Array3<f64>, ys: &Array3<f64>) -> f64 {
    let j = xs.shape()[0];
    let mut total = 0.0;
    for seg in 0..j {
        let mut x = xs.index_axis(Axis(0), seg).to_owned();
        let mut y = ys.index_axis(Axis(0), seg).to_owned();
        row_col_normalize(&mut x);
        row_col_normalize(&mut y);
        total += (&x * &y).sum() / SEGMENT as f64;
    }
    total / j as f64
}

fn at_stoi_rate(w: &WaveformClip) -> Vec<f64> {
    if w.sample_rate == STOI_RATE {
        w.samples.clone()
    } else {
        resample(&w.samples, w.sample_rate, STOI_RATE)
    }
}

/// STOI (`extended == false`) or ESTOI between a clean reference and a
/// degraded signal of the same length and rate.
pub fn stoi(clean: &WaveformClip, degraded: &WaveformClip, extended_variant: bool) -> Result<f64> {
    clean.check_same_shape(degraded)?;
    let (x, y) = (at_stoi_rate(clean), at_stoi_rate(degraded));
    let (x, y) = remove_silent_frames(&x, &y);
    let obm = third_octave_bands();
    let (xt, yt) = (band_envelopes(&x, &obm), band_envelopes(&y, &obm));
    if xt.ncols() < SEGMENT {
        return Err(Error::TooShort(format!(
            "too short for intelligibility analysis: {} frames after silence removal, need {SEGMENT}",
            xt.ncols()
        )));
    }
    let (xs, ys) = (segments(&xt), segments(&yt));
    let d = if extended_variant { extended(&xs, &ys) } else { classic(&xs, &ys) };
    if !d.is_finite() {
        return Err(Error::NonFinite("intelligibility score"));
    }
    Ok(d)
}
