//! Training objectives. Every loss works on candle tensors so it can be
//! differentiated; the `*_clips` helpers evaluate the same code in double
//! precision on plain waveforms.

use std::f64::consts::PI;

use candle_core::{DType, Device, Tensor};
use serde::{Deserialize, Serialize};

use crate::dsp::stft::frame_indices;
use crate::dsp::{dct_matrix, mel_filterbank, LogMelSpec, MelConfig, StftConfig, WaveformClip};
use crate::error::{Error, Result};

/// Floor on STFT power before the square root, so that log-magnitudes stay
/// finite on exact zeros.
pub const POWER_FLOOR: f64 = 1e-30;
/// Power clamp of the multi-resolution STFT loss. Without it the log term
/// is dominated by numerically empty bins of clean harmonic signals.
pub const STFT_LOSS_POWER_FLOOR: f64 = 1e-7;
const NORM_EPS: f64 = 1e-30;
pub const N_MFCC: usize = 25;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct StftResolutionSet(pub Vec<StftConfig>);

impl Default for StftResolutionSet {
    fn default() -> Self {
        Self(vec![
            StftConfig::new(1024, 120, 600),
            StftConfig::new(2048, 240, 1200),
            StftConfig::new(512, 50, 240),
        ])
    }
}

impl StftResolutionSet {
    /// The default set with every size scaled by `sample_rate / 24000`; FFT
    /// sizes are rounded up to a power of two.
    pub fn for_sample_rate(sample_rate: u32) -> Self {
        if sample_rate == 24_000 {
            return Self::default();
        }
        let r = sample_rate as f64 / 24_000.0;
        Self(
            Self::default()
                .0
                .iter()
                .map(|c| {
                    let win = ((c.win_size as f64 * r).round() as usize).max(2);
                    let hop = ((c.hop_size as f64 * r).round() as usize).clamp(1, win);
                    StftConfig::new(win.next_power_of_two(), hop, win)
                })
                .collect(),
        )
    }

    pub fn validate(&self) -> Result<()> {
        if self.0.is_empty() {
            return Err(Error::config("resolution set is empty"));
        }
        for (i, c) in self.0.iter().enumerate() {
            c.validate()?;
            if self.0[..i].contains(c) {
                return Err(Error::config(format!("duplicate stft resolution {c:?}")));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LossWeights {
    pub lambda1: f64,
    pub lambda2: f64,
    pub lambda3: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            lambda1: 1.0,
            lambda2: 80.0,
            lambda3: 15.0,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        for (name, v) in [("lambda1", self.lambda1), ("lambda2", self.lambda2), ("lambda3", self.lambda3)] {
            if !(v > 0.0 && v.is_finite()) {
                return Err(Error::config(format!("{name} must be positive, got {v}")));
            }
        }
        Ok(())
    }
}

fn check_scales(scores: &[Tensor]) -> Result<()> {
    if scores.is_empty() {
        return Err(Error::config("no discriminator scales"));
    }
    Ok(())
}

/// `sum_k mean((D_k(fake) - 1)^2)`
pub fn ls_gan_generator_loss(fake: &[Tensor]) -> Result<Tensor> {
    check_scales(fake)?;
    let mut total = fake[0].affine(1.0, -1.0)?.sqr()?.mean_all()?;
    for f in &fake[1..] {
        total = (total + f.affine(1.0, -1.0)?.sqr()?.mean_all()?)?;
    }
    Ok(total)
}

/// `sum_k mean((D_k(real) - 1)^2) + sum_k mean(D_k(fake)^2)`
pub fn ls_gan_discriminator_loss(real: &[Tensor], fake: &[Tensor]) -> Result<Tensor> {
    check_scales(real)?;
    if real.len() != fake.len() {
        return Err(Error::shape(format!(
            "{} real scales vs {} fake scales",
            real.len(),
            fake.len()
        )));
    }
    let mut total = ls_gan_generator_loss(real)?;
    for f in fake {
        total = (total + f.sqr()?.mean_all()?)?;
    }
    Ok(total)
}

/// Differentiable magnitude spectrogram: frames are gathered with
/// `index_select` (reflect padding folded into the indices) and multiplied
/// by a windowed DFT basis restricted to the window's support.
pub struct Spectrogram {
    cfg: StftConfig,
    basis: Tensor,
    floor: f64,
}

impl Spectrogram {
    pub fn new(cfg: StftConfig, dtype: DType, device: &Device) -> Result<Self> {
        cfg.validate()?;
        let (n_fft, win, bins) = (cfg.fft_size, cfg.win_size, cfg.n_bins());
        let offset = (n_fft - win) / 2;
        let w = crate::dsp::stft::hann(win);
        let mut data = vec![0.0; win * 2 * bins];
        for (n, &wn) in w.iter().enumerate() {
            let pos = (offset + n) as f64;
            for k in 0..bins {
                let arg = 2.0 * PI * ((k as f64 * pos) % n_fft as f64) / n_fft as f64;
                data[n * 2 * bins + k] = wn * arg.cos();
                data[n * 2 * bins + bins + k] = -wn * arg.sin();
            }
        }
        let basis = Tensor::from_vec(data, (win, 2 * bins), device)?.to_dtype(dtype)?;
        Ok(Self {
            cfg,
            basis,
            floor: POWER_FLOOR,
        })
    }

    pub fn config(&self) -> &StftConfig {
        &self.cfg
    }

    pub fn with_floor(mut self, power_floor: f64) -> Self {
        self.floor = power_floor;
        self
    }

    /// (batch, time) -> (batch, frames, bins)
    pub fn magnitude(&self, x: &Tensor) -> Result<Tensor> {
        let (b, len) = x.dims2()?;
        if len == 0 {
            return Err(Error::EmptySignal);
        }
        let (n_fft, win, bins) = (self.cfg.fft_size, self.cfg.win_size, self.cfg.n_bins());
        let offset = (n_fft - win) / 2;
        let full = frame_indices(&self.cfg, len);
        let frames = full.len() / n_fft;
        let idx: Vec<u32> = full
            .chunks(n_fft)
            .flat_map(|f| f[offset..offset + win].iter().copied())
            .collect();
        let idx = Tensor::from_vec(idx, frames * win, x.device())?;
        let spec = x
            .index_select(&idx, 1)?
            .reshape((b * frames, win))?
            .matmul(&self.basis)?;
        let re = spec.narrow(1, 0, bins)?;
        let im = spec.narrow(1, bins, bins)?;
        let power = (re.sqr()? + im.sqr()?)?.maximum(self.floor)?;
        Ok(power.sqrt()?.reshape((b, frames, bins))?)
    }
}

/// `sqrt(s)` with a finite derivative at `s = 0`; exact at 0 and within
/// `NORM_EPS / 2s` relative error elsewhere.
fn safe_sqrt(s: &Tensor) -> Result<Tensor> {
    Ok(s.div(&s.affine(1.0, NORM_EPS)?.sqrt()?)?)
}

fn check_pair(x: &Tensor, x_hat: &Tensor) -> Result<()> {
    if x.dims() != x_hat.dims() {
        return Err(Error::shape(format!("{:?} vs {:?}", x.dims(), x_hat.dims())));
    }
    Ok(())
}

fn check_reference(x: &Tensor) -> Result<()> {
    if x.elem_count() == 0 {
        return Err(Error::EmptySignal);
    }
    let peak = x.abs()?.max_all()?.to_dtype(DType::F64)?.to_scalar::<f64>()?;
    if peak == 0.0 {
        return Err(Error::ZeroEnergyReference);
    }
    Ok(())
}

/// Spectral convergence and log-magnitude losses at one resolution for
/// (batch, time) signals. The Frobenius norms run over the whole batch.
pub fn stft_loss_single(x: &Tensor, x_hat: &Tensor, spec: &Spectrogram) -> Result<(Tensor, Tensor)> {
    check_pair(x, x_hat)?;
    check_reference(x)?;
    let m = spec.magnitude(x)?;
    let m_hat = spec.magnitude(x_hat)?;
    let num = safe_sqrt(&(&m - &m_hat)?.sqr()?.sum_all()?)?;
    let den = m.sqr()?.sum_all()?.sqrt()?;
    let sc = num.div(&den)?;
    let mag = (m.log()? - m_hat.log()?)?.abs()?.mean_all()?;
    Ok((sc, mag))
}

pub struct MultiResStftLoss {
    specs: Vec<Spectrogram>,
}

impl MultiResStftLoss {
    pub fn new(set: &StftResolutionSet, dtype: DType, device: &Device) -> Result<Self> {
        set.validate()?;
        Ok(Self {
            specs: set
                .0
                .iter()
                .map(|c| Ok(Spectrogram::new(*c, dtype, device)?.with_floor(STFT_LOSS_POWER_FLOOR)))
                .collect::<Result<_>>()?,
        })
    }

    pub fn specs(&self) -> &[Spectrogram] {
        &self.specs
    }

    /// `(1/M) sum_m (L_SC + L_MAG)`
    pub fn forward(&self, x: &Tensor, x_hat: &Tensor) -> Result<Tensor> {
        let mut total: Option<Tensor> = None;
        for s in &self.specs {
            let (sc, mag) = stft_loss_single(x, x_hat, s)?;
            let term = (sc + mag)?;
            total = Some(match total {
                Some(t) => (t + term)?,
                None => term,
            });
        }
        let total = total.expect("validated non-empty set");
        Ok(total.affine(1.0 / self.specs.len() as f64, 0.0)?)
    }
}

/// Differentiable MFCCs: magnitude STFT, mel filterbank, floored natural
/// log, orthonormal DCT-II truncated to the first coefficients.
pub struct Mfcc {
    spec: Spectrogram,
    fb_t: Tensor,
    dct_t: Tensor,
}

impl Mfcc {
    pub fn new(cfg: &MelConfig, n_coeffs: usize, dtype: DType, device: &Device) -> Result<Self> {
        if n_coeffs == 0 || n_coeffs > cfg.n_mels {
            return Err(Error::config(format!(
                "n_coeffs {n_coeffs} must be in 1..={}",
                cfg.n_mels
            )));
        }
        let fb = mel_filterbank(cfg)?;
        let dct = dct_matrix(n_coeffs, cfg.n_mels);
        let to_t = |a: ndarray::Array2<f64>| -> Result<Tensor> {
            let (r, c) = a.dim();
            Ok(Tensor::from_vec(a.into_raw_vec_and_offset().0, (r, c), device)?
                .t()?
                .contiguous()?
                .to_dtype(dtype)?)
        };
        Ok(Self {
            spec: Spectrogram::new(cfg.stft, dtype, device)?,
            fb_t: to_t(fb)?,
            dct_t: to_t(dct)?,
        })
    }

    /// (batch, time) -> (batch, frames, n_coeffs)
    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let mag = self.spec.magnitude(x)?;
        let (b, t, f) = mag.dims3()?;
        let mel = mag.reshape((b * t, f))?.matmul(&self.fb_t)?;
        let lm = mel.maximum(crate::dsp::mel::LOG_FLOOR)?.log()?;
        let c = lm.matmul(&self.dct_t)?;
        Ok(c.reshape((b, t, self.dct_t.dim(1)?))?)
    }

    /// Mean absolute difference of the two coefficient matrices.
    pub fn loss(&self, x: &Tensor, x_hat: &Tensor) -> Result<Tensor> {
        check_pair(x, x_hat)?;
        l1_loss(&self.forward(x)?, &self.forward(x_hat)?)
    }
}

pub fn l1_loss(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    check_pair(a, b)?;
    Ok((a - b)?.abs()?.mean_all()?)
}

/// `lambda1 * adv + lambda2 * mrstft + lambda3 * mfcc` on scalar tensors.
pub fn combine(adv: &Tensor, mrstft: &Tensor, mfcc: &Tensor, w: &LossWeights) -> Result<Tensor> {
    Ok(((adv.affine(w.lambda1, 0.0)? + mrstft.affine(w.lambda2, 0.0)?)? + mfcc.affine(w.lambda3, 0.0)?)?)
}

pub fn combined_generator_loss(adv: f64, mrstft: f64, mfcc: f64, w: &LossWeights) -> Result<f64> {
    for (name, v) in [("adversarial loss", adv), ("stft loss", mrstft), ("mfcc loss", mfcc)] {
        if !v.is_finite() {
            return Err(Error::NonFinite(name));
        }
    }
    Ok(w.lambda1 * adv + w.lambda2 * mrstft + w.lambda3 * mfcc)
}

/// Bundles the waveform reconstruction terms for one sample rate.
pub struct WaveLosses {
    pub mrstft: MultiResStftLoss,
    pub mfcc: Mfcc,
    pub weights: LossWeights,
}

impl WaveLosses {
    pub fn new(sample_rate: u32, set: &StftResolutionSet, weights: LossWeights, dtype: DType, device: &Device) -> Result<Self> {
        weights.validate()?;
        Ok(Self {
            mrstft: MultiResStftLoss::new(set, dtype, device)?,
            mfcc: Mfcc::new(&MelConfig::for_sample_rate(sample_rate), N_MFCC, dtype, device)?,
            weights,
        })
    }
}

fn clip_tensor(c: &WaveformClip) -> Result<Tensor> {
    if c.is_empty() {
        return Err(Error::EmptySignal);
    }
    Ok(Tensor::from_vec(c.samples.clone(), (1, c.len()), &Device::Cpu)?)
}

fn scalar(t: &Tensor) -> Result<f64> {
    Ok(t.to_dtype(DType::F64)?.to_scalar::<f64>()?)
}

pub fn stft_loss_clips(x: &WaveformClip, x_hat: &WaveformClip, cfg: &StftConfig) -> Result<(f64, f64)> {
    x.check_same_shape(x_hat)?;
    let spec = Spectrogram::new(*cfg, DType::F64, &Device::Cpu)?.with_floor(STFT_LOSS_POWER_FLOOR);
    let (sc, mag) = stft_loss_single(&clip_tensor(x)?, &clip_tensor(x_hat)?, &spec)?;
    Ok((scalar(&sc)?, scalar(&mag)?))
}

pub fn multi_res_stft_loss_clips(x: &WaveformClip, x_hat: &WaveformClip, set: &StftResolutionSet) -> Result<f64> {
    x.check_same_shape(x_hat)?;
    let loss = MultiResStftLoss::new(set, DType::F64, &Device::Cpu)?;
    scalar(&loss.forward(&clip_tensor(x)?, &clip_tensor(x_hat)?)?)
}

pub fn mfcc_loss_clips(x: &WaveformClip, x_hat: &WaveformClip) -> Result<f64> {
    x.check_same_shape(x_hat)?;
    let m = Mfcc::new(&MelConfig::for_sample_rate(x.sample_rate), N_MFCC, DType::F64, &Device::Cpu)?;
    scalar(&m.loss(&clip_tensor(x)?, &clip_tensor(x_hat)?)?)
}

/// Mean absolute elementwise difference of two normalized spectrograms.
pub fn l1_mel_loss(x: &LogMelSpec, x_hat: &LogMelSpec) -> Result<f64> {
    if x.frames.dim() != x_hat.frames.dim() {
        return Err(Error::shape(format!(
            "mel shapes {:?} vs {:?}",
            x.frames.dim(),
            x_hat.frames.dim()
        )));
    }
    if x.frames.is_empty() {
        return Err(Error::EmptySignal);
    }
    let sum: f64 = x
        .frames
        .iter()
        .zip(x_hat.frames.iter())
        .map(|(a, b)| (f64::from(*a) - f64::from(*b)).abs())
        .sum();
    Ok(sum / x.frames.len() as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dsp::{magnitude, mfcc, stft};
    use crate::nn::gradcheck::relative_error_piecewise;
    use candle_core::Var;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn noise(n: usize, seed: u64) -> WaveformClip {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        WaveformClip::new((0..n).map(|_| rng.random_range(-0.5..0.5)).collect(), 24_000)
    }

    fn t64(v: Vec<f64>, shape: &[usize]) -> Tensor {
        Tensor::from_vec(v, shape, &Device::Cpu).unwrap()
    }

    fn oracle_stft_loss(x: &WaveformClip, y: &WaveformClip, cfg: &StftConfig) -> (f64, f64) {
        let a = magnitude(&stft(x, cfg).unwrap());
        let b = magnitude(&stft(y, cfg).unwrap());
        let fl = STFT_LOSS_POWER_FLOOR.sqrt();
        let (mut num, mut den, mut l1) = (0.0, 0.0, 0.0);
        for (p, q) in a.iter().zip(b.iter()) {
            let (p, q) = (p.max(fl), q.max(fl));
            num += (p - q).powi(2);
            den += p * p;
            l1 += (p.ln() - q.ln()).abs();
        }
        (num.sqrt() / den.sqrt(), l1 / a.len() as f64)
    }

    #[test]
    fn gan_hand_cases() {
        let ones: Vec<Tensor> = (0..3).map(|k| Tensor::ones(5 + k, DType::F64, &Device::Cpu).unwrap()).collect();
        let zeros: Vec<Tensor> = ones.iter().map(|t| t.zeros_like().unwrap()).collect();
        assert_eq!(scalar(&ls_gan_generator_loss(&ones).unwrap()).unwrap(), 0.0);
        assert_eq!(scalar(&ls_gan_generator_loss(&zeros).unwrap()).unwrap(), 3.0);
        assert_eq!(scalar(&ls_gan_discriminator_loss(&ones, &zeros).unwrap()).unwrap(), 0.0);
        assert_eq!(scalar(&ls_gan_discriminator_loss(&zeros, &ones).unwrap()).unwrap(), 6.0);
        assert!(ls_gan_generator_loss(&[]).is_err());
        assert!(ls_gan_discriminator_loss(&ones, &zeros[..2]).is_err());
    }

    #[test]
    fn gan_matches_scalar_loop() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let maps: Vec<Vec<f64>> = (0..3).map(|k| (0..7 + 3 * k).map(|_| rng.random_range(-2.0..2.0)).collect()).collect();
        let fakes: Vec<Vec<f64>> = maps.iter().map(|m| m.iter().map(|v| v * 0.3 + 0.1).collect()).collect();
        let tr: Vec<Tensor> = maps.iter().map(|m| t64(m.clone(), &[m.len()])).collect();
        let tf: Vec<Tensor> = fakes.iter().map(|m| t64(m.clone(), &[m.len()])).collect();
        let mean = |m: &Vec<f64>, f: &dyn Fn(f64) -> f64| m.iter().map(|&v| f(v)).sum::<f64>() / m.len() as f64;
        let g: f64 = fakes.iter().map(|m| mean(m, &|v| (v - 1.0) * (v - 1.0))).sum();
        let d: f64 = maps.iter().map(|m| mean(m, &|v| (v - 1.0) * (v - 1.0))).sum::<f64>()
            + fakes.iter().map(|m| mean(m, &|v| v * v)).sum::<f64>();
        assert!((scalar(&ls_gan_generator_loss(&tf).unwrap()).unwrap() - g).abs() < 1e-12);
        assert!((scalar(&ls_gan_discriminator_loss(&tr, &tf).unwrap()).unwrap() - d).abs() < 1e-12);
    }

    #[test]
    fn stft_loss_identity_and_half_amplitude() {
        let cfg = StftConfig::new(1024, 120, 600);
        let x = noise(2400, 3);
        assert_eq!(stft_loss_clips(&x, &x, &cfg).unwrap(), (0.0, 0.0));
        let half = WaveformClip::new(x.samples.iter().map(|v| v * 0.5).collect(), 24_000);
        let (sc, mag) = stft_loss_clips(&x, &half, &cfg).unwrap();
        assert!((mag - 2f64.ln()).abs() < 1e-9, "{mag}");
        assert!((sc - 0.5).abs() < 1e-9);
    }

    #[test]
    fn stft_loss_matches_fft_oracle() {
        for (seed, cfg) in StftResolutionSet::default().0.iter().enumerate() {
            let x = noise(2400, seed as u64);
            let y = noise(2400, 100 + seed as u64);
            let (sc, mag) = stft_loss_clips(&x, &y, cfg).unwrap();
            let (osc, omag) = oracle_stft_loss(&x, &y, cfg);
            assert!((sc - osc).abs() < 1e-6 && (mag - omag).abs() < 1e-6);
        }
    }

    #[test]
    fn zero_reference_is_an_error() {
        let cfg = StftConfig::new(512, 50, 240);
        let r = stft_loss_clips(&WaveformClip::silence(1000, 24_000), &noise(1000, 1), &cfg);
        assert!(matches!(r, Err(Error::ZeroEnergyReference)));
    }

    #[test]
    fn multi_res_is_mean_of_singles() {
        let set = StftResolutionSet::default();
        let (x, y) = (noise(3000, 4), noise(3000, 5));
        let m = multi_res_stft_loss_clips(&x, &y, &set).unwrap();
        let singles: f64 = set
            .0
            .iter()
            .map(|c| {
                let (a, b) = stft_loss_clips(&x, &y, c).unwrap();
                a + b
            })
            .sum::<f64>()
            / 3.0;
        assert!((m - singles).abs() < 1e-9);
        assert_eq!(multi_res_stft_loss_clips(&x, &x, &set).unwrap(), 0.0);
        let one = StftResolutionSet(vec![set.0[0]]);
        let (a, b) = stft_loss_clips(&x, &y, &set.0[0]).unwrap();
        assert_eq!(multi_res_stft_loss_clips(&x, &y, &one).unwrap(), a + b);
        assert!(StftResolutionSet(vec![set.0[0], set.0[0]]).validate().is_err());
    }

    #[test]
    fn mfcc_loss_matches_recomputation() {
        let x = noise(4800, 7);
        let s = WaveformClip::silence(4800, 24_000);
        let cfg = MelConfig::default();
        let a = mfcc(&x, &cfg, N_MFCC).unwrap();
        let b = mfcc(&s, &cfg, N_MFCC).unwrap();
        let want = (&a - &b).mapv(f64::abs).mean().unwrap();
        assert!((mfcc_loss_clips(&x, &s).unwrap() - want).abs() < 1e-9);
        assert_eq!(mfcc_loss_clips(&x, &x).unwrap(), 0.0);
        for seed in 0..5 {
            let (p, q) = (noise(2400, seed), noise(2400, seed + 50));
            assert_eq!(mfcc_loss_clips(&p, &q).unwrap(), mfcc_loss_clips(&q, &p).unwrap());
        }
        assert!(mfcc_loss_clips(&x, &noise(100, 1)).is_err());
    }

    #[test]
    fn combined_arithmetic() {
        let w = LossWeights::default();
        assert_eq!(combined_generator_loss(0.0, 0.0, 0.0, &w).unwrap(), 0.0);
        assert_eq!(combined_generator_loss(1.0, 0.5, 0.2, &w).unwrap(), 44.0);
        assert!(combined_generator_loss(f64::NAN, 0.0, 0.0, &w).is_err());
        let w2 = LossWeights { lambda2: 160.0, ..w };
        let d = combined_generator_loss(1.0, 0.5, 0.2, &w2).unwrap() - combined_generator_loss(1.0, 0.5, 0.2, &w).unwrap();
        assert_eq!(d, 40.0);
        assert!(LossWeights { lambda3: 0.0, ..w }.validate().is_err());
    }

    #[test]
    fn mel_l1_cases() {
        let ones = LogMelSpec { frames: ndarray::Array2::from_elem((4, 80), 1.0), frame_rate: 80.0 };
        let neg = LogMelSpec { frames: ndarray::Array2::from_elem((4, 80), -1.0), frame_rate: 80.0 };
        assert_eq!(l1_mel_loss(&ones, &ones).unwrap(), 0.0);
        assert_eq!(l1_mel_loss(&ones, &neg).unwrap(), 2.0);
        let short = LogMelSpec { frames: ndarray::Array2::zeros((3, 80)), frame_rate: 80.0 };
        assert!(l1_mel_loss(&ones, &short).is_err());
    }

    fn signs(a: &Tensor, b: &Tensor) -> Vec<bool> {
        crate::nn::flat_f64(&(a - b).unwrap()).unwrap().iter().map(|v| *v >= 0.0).collect()
    }

    #[test]
    fn gradients_match_finite_differences() {
        let n = 1200;
        for seed in 0..2 {
            let x = t64(noise(n, 11 + seed).samples, &[1, n]);
            let y = Var::from_tensor(&t64(noise(n, 21 + seed).samples, &[1, n])).unwrap();
            let mr = MultiResStftLoss::new(&StftResolutionSet::default(), DType::F64, &Device::Cpu).unwrap();
            let mut f = || mr.forward(&x, y.as_tensor());
            let mut kinks = || -> Result<Vec<bool>> {
                let mut out = Vec::new();
                for s in &mr.specs {
                    out.extend(signs(&s.magnitude(&x)?.log()?, &s.magnitude(y.as_tensor())?.log()?));
                }
                Ok(out)
            };
            let (err, skipped) = relative_error_piecewise(&y, &mut f, Some(&mut kinks), 1e-4, 40).unwrap();
            assert!(err < 1e-3 && skipped <= 4, "{err} {skipped}");
            let m = Mfcc::new(&MelConfig::default(), N_MFCC, DType::F64, &Device::Cpu).unwrap();
            let mut g = || m.loss(&x, y.as_tensor());
            let mut kinks = || -> Result<Vec<bool>> { Ok(signs(&m.forward(&x)?, &m.forward(y.as_tensor())?)) };
            let (err, skipped) = relative_error_piecewise(&y, &mut g, Some(&mut kinks), 1e-4, 40).unwrap();
            assert!(err < 1e-3 && skipped <= 4, "{err} {skipped}");
        }
    }
}
