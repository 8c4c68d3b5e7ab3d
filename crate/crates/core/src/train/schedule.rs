use std::f64::consts::PI;

use candle_core::Tensor;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Learning rate as a function of (fractional) epoch.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum LrSchedule {
    Constant { lr: f64 },
    /// Linear warmup to `base` over `warmup_epochs`, then cosine annealing
    /// with warm restarts; cycle k lasts `t0 * t_mult^k` epochs.
    WarmupCosine {
        base: f64,
        warmup_epochs: usize,
        t0: f64,
        t_mult: f64,
        eta_min: f64,
    },
}

impl LrSchedule {
    pub fn warmup_cosine(base: f64, warmup_epochs: usize) -> Self {
        LrSchedule::WarmupCosine {
            base,
            warmup_epochs,
            t0: 1.0,
            t_mult: 2.0,
            eta_min: 0.0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let ok = match *self {
            LrSchedule::Constant { lr } => lr > 0.0,
            LrSchedule::WarmupCosine {
                base,
                warmup_epochs,
                t0,
                t_mult,
                eta_min,
            } => base > 0.0 && warmup_epochs >= 1 && t0 > 0.0 && t_mult >= 1.0 && (0.0..=base).contains(&eta_min),
        };
        if !ok {
            return Err(Error::config(format!("invalid learning-rate schedule {self:?}")));
        }
        Ok(())
    }

    pub fn base(&self) -> f64 {
        match *self {
            LrSchedule::Constant { lr } => lr,
            LrSchedule::WarmupCosine { base, .. } => base,
        }
    }

    pub fn warmup_epochs(&self) -> usize {
        match *self {
            LrSchedule::Constant { .. } => 0,
            LrSchedule::WarmupCosine { warmup_epochs, .. } => warmup_epochs,
        }
    }

    pub fn lr_at(&self, epoch: f64) -> f64 {
        match *self {
            LrSchedule::Constant { lr } => lr,
            LrSchedule::WarmupCosine {
                base,
                warmup_epochs,
                t0,
                t_mult,
                eta_min,
            } => {
                let w = warmup_epochs as f64;
                if epoch < w {
                    return base * ((epoch + 1.0) / w).min(1.0);
                }
                let (mut start, mut len) = (0.0, t0);
                let e = epoch - w;
                while e >= start + len {
                    start += len;
                    len *= t_mult;
                }
                eta_min + (base - eta_min) * 0.5 * (1.0 + (PI * (e - start) / len).cos())
            }
        }
    }

    /// Epoch offsets after warmup at which the cosine restarts.
    pub fn restarts(&self, count: usize) -> Vec<f64> {
        match *self {
            LrSchedule::Constant { .. } => Vec::new(),
            LrSchedule::WarmupCosine { t0, t_mult, .. } => {
                let (mut at, mut len) = (0.0, t0);
                (0..count)
                    .map(|_| {
                        at += len;
                        len *= t_mult;
                        at
                    })
                    .collect()
            }
        }
    }
}

/// Aligned random crops of (batch, samples) real and generated audio. Clips
/// shorter than `len` are zero-padded to it.
pub fn disc_crop(real: &Tensor, fake: &Tensor, len: usize, rng: &mut impl Rng) -> Result<(Tensor, Tensor)> {
    if real.dims() != fake.dims() {
        return Err(Error::shape(format!("crop inputs differ: {:?} vs {:?}", real.dims(), fake.dims())));
    }
    let total = real.dim(1)?;
    if total <= len {
        let pad = len - total;
        return Ok((real.pad_with_zeros(1, 0, pad)?, fake.pad_with_zeros(1, 0, pad)?));
    }
    let off = rng.random_range(0..=total - len);
    Ok((real.narrow(1, off, len)?, fake.narrow(1, off, len)?))
}

/// Epoch with the lowest validation loss among the first `warmup_epochs`
/// entries (all entries when `warmup_epochs` is 0); ties go to the earliest.
pub fn select_checkpoint(history: &[f64], warmup_epochs: usize) -> Result<usize> {
    if history.is_empty() {
        return Err(Error::config("no validation history to select a checkpoint from"));
    }
    let limit = if warmup_epochs == 0 { history.len() } else { warmup_epochs.min(history.len()) };
    let mut best = 0;
    for i in 1..limit {
        if history[i] < history[best] {
            best = i;
        }
    }
    Ok(best)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::flat_f32;
    use candle_core::Device;
    use proptest::prelude::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn warmup_and_restarts() {
        let s = LrSchedule::warmup_cosine(1e-3, 20);
        assert!((s.lr_at(0.0) - 5e-5).abs() < 1e-18);
        assert!((s.lr_at(19.0) - 1e-3).abs() < 1e-18);
        assert_eq!(s.lr_at(20.0), 1e-3);
        assert_eq!(s.restarts(4), vec![1.0, 3.0, 7.0, 15.0]);
        for r in s.restarts(4) {
            assert_eq!(s.lr_at(20.0 + r), 1e-3);
            assert!(s.lr_at(20.0 + r - 1e-3) < 1e-5);
        }
        assert!((s.lr_at(20.5) - 5e-4).abs() < 1e-15);
        assert!((s.lr_at(22.0) - 5e-4).abs() < 1e-15);
        assert_eq!(LrSchedule::Constant { lr: 1e-4 }.lr_at(7.3), 1e-4);
    }

    proptest! {
        #[test]
        fn lr_bounded(e in 0.0f64..500.0, w in 1usize..30) {
            let s = LrSchedule::warmup_cosine(1e-3, w);
            let lr = s.lr_at(e);
            prop_assert!(lr >= 0.0 && lr <= 1e-3 + 1e-18);
        }
    }

    #[test]
    fn crops_are_aligned_and_seeded() {
        let x: Vec<f32> = (0..2 * 72).map(|i| i as f32).collect();
        let real = Tensor::from_vec(x.clone(), (2, 72), &Device::Cpu).unwrap();
        let fake = (real.clone() * 2.0).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let (r, f) = disc_crop(&real, &fake, 24, &mut rng).unwrap();
        assert_eq!(r.dims(), &[2, 24]);
        let (rv, fv) = (flat_f32(&r).unwrap(), flat_f32(&f).unwrap());
        assert!(rv.iter().zip(&fv).all(|(a, b)| 2.0 * a == *b));
        let mut rng2 = ChaCha8Rng::seed_from_u64(4);
        let (r2, _) = disc_crop(&real, &fake, 24, &mut rng2).unwrap();
        assert_eq!(flat_f32(&r2).unwrap(), rv);
        let (same, _) = disc_crop(&real, &fake, 72, &mut rng).unwrap();
        assert_eq!(flat_f32(&same).unwrap(), x);
        let (padded, _) = disc_crop(&real, &fake, 80, &mut rng).unwrap();
        assert_eq!(padded.dims(), &[2, 80]);
    }

    #[test]
    fn selection_rules() {
        assert_eq!(select_checkpoint(&[0.9, 0.5, 0.7], 3).unwrap(), 1);
        assert_eq!(select_checkpoint(&[0.5, 0.5], 2).unwrap(), 0);
        assert_eq!(select_checkpoint(&[0.9, 0.8, 0.1], 2).unwrap(), 1);
        assert!(select_checkpoint(&[], 2).is_err());
    }
}
