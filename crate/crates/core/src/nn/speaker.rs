use std::path::Path;

use ndarray::{Array1, Array2};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::dsp::{log_mel, MelConfig, WaveformClip};
use crate::error::{Error, Result};

pub const SPEAKER_DIM: usize = 256;
const STUB_SEED: u64 = 0x5EED_D0EC;

/// Unit-norm speaker identity vector.
#[derive(Debug, Clone, PartialEq)]
pub struct SpeakerEmbedding(pub Vec<f64>);

impl SpeakerEmbedding {
    pub fn dim(&self) -> usize {
        self.0.len()
    }

    pub fn norm(&self) -> f64 {
        self.0.iter().map(|v| v * v).sum::<f64>().sqrt()
    }

    pub fn cosine(&self, other: &Self) -> f64 {
        self.0.iter().zip(&other.0).map(|(a, b)| a * b).sum::<f64>() / (self.norm() * other.norm())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum SpeakerEncoderSpec {
    Stub,
    External { path: std::path::PathBuf },
}

impl Default for SpeakerEncoderSpec {
    fn default() -> Self {
        SpeakerEncoderSpec::Stub
    }
}

impl SpeakerEncoderSpec {
    pub fn id(&self) -> String {
        match self {
            SpeakerEncoderSpec::Stub => "stub".into(),
            SpeakerEncoderSpec::External { path } => format!("external:{}", path.display()),
        }
    }
}

/// Frozen d-vector encoder: per-band log-mel mean and standard deviation,
/// centered, projected linearly to 256 dimensions and L2-normalized. The
/// projection is either a fixed seeded Gaussian matrix or loaded from a file.
pub struct SpeakerEncoder {
    projection: Array2<f64>,
    id: String,
}

impl SpeakerEncoder {
    pub fn stub() -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(STUB_SEED);
        let n_in = 2 * 80;
        let data: Vec<f64> = (0..SPEAKER_DIM * n_in)
            .map(|_| StandardNormal.sample(&mut rng))
            .collect();
        Self {
            projection: Array2::from_shape_vec((SPEAKER_DIM, n_in), data).expect("sized buffer"),
            id: "stub".into(),
        }
    }

    /// Loads a (256, 160) projection stored as a raw tensor file.
    pub fn external(path: &Path) -> Result<Self> {
        let (dims, data) = crate::train::checkpoint::read_tensor_file(path)?;
        if dims != [SPEAKER_DIM, 160] {
            return Err(Error::data(
                path,
                format!("speaker projection must be 256x160, got {dims:?}"),
            ));
        }
        Ok(Self {
            projection: Array2::from_shape_vec((SPEAKER_DIM, 160), data.into_iter().map(f64::from).collect())
                .expect("sized buffer"),
            id: SpeakerEncoderSpec::External { path: path.to_path_buf() }.id(),
        })
    }

    pub fn from_spec(spec: &SpeakerEncoderSpec) -> Result<Self> {
        match spec {
            SpeakerEncoderSpec::Stub => Ok(Self::stub()),
            SpeakerEncoderSpec::External { path } => Self::external(path),
        }
    }

    pub fn id(&self) -> &str {
        &self.id
    }

    pub fn encode(&self, reference: &WaveformClip) -> Result<SpeakerEmbedding> {
        let cfg = MelConfig::for_sample_rate(reference.sample_rate);
        if reference.len() < cfg.stft.win_size {
            return Err(Error::TooShort(format!(
                "speaker reference has {} samples, one mel frame needs {}",
                reference.len(),
                cfg.stft.win_size
            )));
        }
        let mel = log_mel(reference, &cfg)?.frames.mapv(f64::from);
        let mean = mel.mean_axis(ndarray::Axis(0)).expect("non-empty");
        let std = mel.std_axis(ndarray::Axis(0), 0.0);
        let mut stats = Array1::from_iter(mean.iter().chain(std.iter()).copied());
        let centre = stats.mean().unwrap_or(0.0);
        stats.mapv_inplace(|v| v - centre);
        let v = self.projection.dot(&stats);
        let norm = v.dot(&v).sqrt();
        if norm == 0.0 || !norm.is_finite() {
            // Constant spectra carry no identity; use a fixed unit vector.
            let mut e = vec![0.0; SPEAKER_DIM];
            e[0] = 1.0;
            return Ok(SpeakerEmbedding(e));
        }
        Ok(SpeakerEmbedding(v.iter().map(|x| x / norm).collect()))
    }
}
