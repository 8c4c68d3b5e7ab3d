//! Generator and discriminator networks of both families.

pub mod mel;
pub mod vocode;
pub mod wave;

use candle_core::Tensor;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::SPEAKER_DIM;

pub use mel::{MelGenerator, MelGeneratorConfig};
pub use vocode::{run_external, Vocoder};
pub use wave::{Discriminator, DiscriminatorConfig, WaveAudioEncoder, WaveDecoder, WaveGenerator, WaveGeneratorConfig};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Family {
    Wave,
    Mel,
}

impl Family {
    pub fn name(self) -> &'static str {
        match self {
            Family::Wave => "wave",
            Family::Mel => "mel",
        }
    }
}

impl std::str::FromStr for Family {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "wave" => Ok(Family::Wave),
            "mel" => Ok(Family::Mel),
            other => Err(Error::config(format!("unknown model family `{other}` (wave|mel)"))),
        }
    }
}

/// Whether a generator consumes audio (AV2A) or only video (V2A).
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Variant {
    V2a,
    Av2a,
}

impl Variant {
    pub fn name(self) -> &'static str {
        match self {
            Variant::V2a => "v2a",
            Variant::Av2a => "av2a",
        }
    }
}

/// Source frame for each of `t` target steps: `j -> min(round(j*n/t), n-1)`.
pub fn nearest_index(n: usize, t: usize) -> Vec<u32> {
    (0..t)
        .map(|j| {
            let src = ((j * n) as f64 / t as f64).round() as usize;
            src.min(n - 1) as u32
        })
        .collect()
}

/// Nearest-neighbour resampling of (batch, n, d) to (batch, t, d).
pub fn nearest_upsample(x: &Tensor, t: usize) -> Result<Tensor> {
    let n = x.dim(1)?;
    if n == t {
        return Ok(x.clone());
    }
    let idx = Tensor::from_vec(nearest_index(n, t), t, x.device())?;
    Ok(x.index_select(&idx, 1)?)
}

/// (batch, 256) speaker vectors repeated over `n` steps.
pub(crate) fn speaker_steps(spk: &Tensor, n: usize) -> Result<Tensor> {
    let (b, d) = spk.dims2()?;
    if d != SPEAKER_DIM {
        return Err(Error::shape(format!("speaker embedding has {d} dims, expected {SPEAKER_DIM}")));
    }
    Ok(spk.unsqueeze(1)?.broadcast_as((b, n, d))?.contiguous()?)
}

pub(crate) fn zeros_like_steps(reference: &Tensor, n: usize, d: usize) -> Result<Tensor> {
    Ok(Tensor::zeros((reference.dim(0)?, n, d), reference.dtype(), reference.device())?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn nearest_identity_and_mel_ratio() {
        assert_eq!(nearest_index(25, 25), (0..25).collect::<Vec<u32>>());
        let idx = nearest_index(25, 81);
        assert_eq!(idx.len(), 81);
        assert_eq!(*idx.last().unwrap(), 24);
    }

    proptest! {
        #[test]
        fn nearest_is_surjective_up_to_double(n in 1usize..60, extra in 0usize..60) {
            let t = n + extra.min(n);
            let idx = nearest_index(n, t);
            let mut seen = vec![false; n];
            for &i in &idx {
                seen[i as usize] = true;
            }
            prop_assert!(seen.iter().all(|&s| s));
            prop_assert!(idx.windows(2).all(|w| w[0] <= w[1]));
        }
    }
}
