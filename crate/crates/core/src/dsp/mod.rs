//! Signal-processing kernels shared by the losses, models, data pipeline and
//! metrics. Everything here works in double precision on plain buffers.

pub mod griffin_lim;
pub mod mel;
pub mod mfcc;
pub mod resample;
pub mod stft;

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub use griffin_lim::{griffin_lim, griffin_lim_traced, mel_to_linear};
pub use mel::{log_mel, log_mel_unclipped, mel_filterbank, LogMelSpec, MelConfig};
pub use mfcc::{dct_matrix, mfcc};
pub use stft::{istft, magnitude, stft, StftConfig, Window};

pub const DEFAULT_SAMPLE_RATE: u32 = 24_000;

/// Mono audio with its sample rate.
#[derive(Debug, Clone, PartialEq)]
pub struct WaveformClip {
    pub samples: Vec<f64>,
    pub sample_rate: u32,
}

impl WaveformClip {
    pub fn new(samples: Vec<f64>, sample_rate: u32) -> Self {
        Self {
            samples,
            sample_rate,
        }
    }

    pub fn silence(len: usize, sample_rate: u32) -> Self {
        Self::new(vec![0.0; len], sample_rate)
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn duration(&self) -> f64 {
        self.samples.len() as f64 / self.sample_rate as f64
    }

    /// Zero-pads or truncates to exactly `len` samples.
    pub fn fit_to(&self, len: usize) -> Self {
        let mut s = self.samples.clone();
        s.resize(len, 0.0);
        Self::new(s, self.sample_rate)
    }

    pub fn samples_f32(&self) -> Vec<f32> {
        self.samples.iter().map(|&v| v as f32).collect()
    }

    pub fn check_same_shape(&self, other: &Self) -> Result<()> {
        if self.sample_rate != other.sample_rate {
            return Err(Error::config(format!(
                "sample rate mismatch: {} vs {}",
                self.sample_rate, other.sample_rate
            )));
        }
        if self.len() != other.len() {
            return Err(Error::shape(format!(
                "length mismatch: {} vs {}",
                self.len(),
                other.len()
            )));
        }
        Ok(())
    }
}

/// Row-major `rows x cols` conversion helpers between ndarray and flat vectors.
pub fn to_array2(rows: usize, cols: usize, data: Vec<f64>) -> Array2<f64> {
    Array2::from_shape_vec((rows, cols), data).expect("row-major buffer of rows*cols")
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum VocoderBackend {
    GriffinLim,
    External,
}
