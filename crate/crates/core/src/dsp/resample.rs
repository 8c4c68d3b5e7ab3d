//! Rational-rate resampling with a Kaiser-windowed sinc lowpass.

use std::f64::consts::PI;

fn gcd(a: u64, b: u64) -> u64 {
    if b == 0 {
        a
    } else {
        gcd(b, a % b)
    }
}

/// Zeroth-order modified Bessel function of the first kind.
fn bessel_i0(x: f64) -> f64 {
    let mut sum = 1.0;
    let mut term = 1.0;
    let q = x * x / 4.0;
    for k in 1..200 {
        term *= q / (k * k) as f64;
        sum += term;
        if term < sum * 1e-17 {
            break;
        }
    }
    sum
}

fn kaiser(len: usize, beta: f64) -> Vec<f64> {
    if len == 1 {
        return vec![1.0];
    }
    let denom = bessel_i0(beta);
    (0..len)
        .map(|n| {
            let r = 2.0 * n as f64 / (len - 1) as f64 - 1.0;
            bessel_i0(beta * (1.0 - r * r).max(0.0).sqrt()) / denom
        })
        .collect()
}

fn sinc(x: f64) -> f64 {
    if x == 0.0 {
        1.0
    } else {
        (PI * x).sin() / (PI * x)
    }
}

/// Lowpass for upsampling by `p` then decimating by `q`: 60 dB stopband,
/// cutoff at the narrower of the two Nyquist rates, transition width a tenth
/// of the cutoff. Normalized to unit DC gain.
pub fn design_filter(p: u64, q: u64) -> Vec<f64> {
    let stop = 1.0 / (2 * p.max(q)) as f64;
    let roll_off = stop / 10.0;
    let rejection_db = 60.0;
    let half = ((rejection_db - 8.0) / (28.714 * roll_off)).ceil() as i64;
    let beta = 0.1102 * (rejection_db - 8.7);
    let win = kaiser((2 * half + 1) as usize, beta);
    let mut h: Vec<f64> = (-half..=half)
        .zip(win)
        .map(|(t, w)| w * 2.0 * p as f64 * stop * sinc(2.0 * stop * t as f64))
        .collect();
    let sum: f64 = h.iter().sum();
    for v in &mut h {
        *v /= sum;
    }
    h
}

/// Resamples `x` from `from` Hz to `to` Hz. The output has
/// `ceil(len * p / q)` samples where `p/q` is the reduced rate ratio, and the
/// filter delay is compensated so that output sample m aligns with input
/// time `m * q / p`.
pub fn resample(x: &[f64], from: u32, to: u32) -> Vec<f64> {
    if from == to {
        return x.to_vec();
    }
    let g = gcd(from as u64, to as u64);
    let (p, q) = (to as u64 / g, from as u64 / g);
    let h: Vec<f64> = design_filter(p, q).into_iter().map(|v| v * p as f64).collect();
    let half = ((h.len() - 1) / 2) as i64;
    let n_up = x.len() as i64 * p as i64;
    let n_out = (x.len() as u64 * p).div_ceil(q) as usize;
    let (p, q) = (p as i64, q as i64);
    let mut y = vec![0.0; n_out];
    for (m, out) in y.iter_mut().enumerate() {
        // y[m] = sum_j h[j] * up[m*q + half - j], where up is nonzero only at
        // multiples of p.
        let centre = m as i64 * q + half;
        let j_lo = (centre - (n_up - 1)).max(0);
        let j_hi = centre.min(h.len() as i64 - 1);
        if j_lo > j_hi {
            continue;
        }
        let mut j = j_lo + (centre - j_lo).rem_euclid(p);
        let mut acc = 0.0;
        while j <= j_hi {
            acc += h[j as usize] * x[((centre - j) / p) as usize];
            j += p;
        }
        *out = acc;
    }
    y
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn bessel_known_values() {
        assert!((bessel_i0(0.0) - 1.0).abs() < 1e-15);
        assert!((bessel_i0(1.0) - 1.266_065_877_752_008_4).abs() < 1e-12);
        assert!((bessel_i0(5.0) - 27.239_871_823_604_44).abs() < 1e-9);
    }

    #[test]
    fn output_length() {
        assert_eq!(resample(&vec![0.0; 24000], 24000, 10000).len(), 10000);
        assert_eq!(resample(&vec![0.0; 8001], 8000, 10000).len(), 10002);
    }

    #[test]
    fn tone_survives_resampling() {
        let x: Vec<f64> = (0..24000)
            .map(|i| (2.0 * PI * 300.0 * i as f64 / 24000.0).sin())
            .collect();
        let y = resample(&x, 24000, 10000);
        for (m, v) in y.iter().enumerate().skip(500).take(9000) {
            let want = (2.0 * PI * 300.0 * m as f64 / 10000.0).sin();
            assert!((v - want).abs() < 2e-3, "sample {m}: {v} vs {want}");
        }
    }
}
