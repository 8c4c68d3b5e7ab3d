//! Raw clip container (`AVCLIP01`) and spectrogram file (`MELSPEC1`).

use std::fs;
use std::path::Path;

use candle_core::{Device, Tensor};
use ndarray::Array2;
use rand::Rng;

use crate::dsp::LogMelSpec;
use crate::error::{Error, Result};

pub const CLIP_MAGIC: &[u8; 8] = b"AVCLIP01";
pub const MEL_MAGIC: &[u8; 8] = b"MELSPEC1";
pub const DEFAULT_FPS: u32 = 25;

/// `n` frames of `h x w x c` 8-bit pixels, row-major per frame.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct VideoClip {
    pub n: usize,
    pub h: usize,
    pub w: usize,
    pub c: usize,
    pub data: Vec<u8>,
    pub fps: u32,
}

impl VideoClip {
    pub fn new(n: usize, h: usize, w: usize, c: usize, data: Vec<u8>) -> Result<Self> {
        if n == 0 || h == 0 || w == 0 || c == 0 {
            return Err(Error::shape(format!("empty clip {n}x{h}x{w}x{c}")));
        }
        if data.len() != n * h * w * c {
            return Err(Error::shape(format!(
                "clip payload has {} bytes, {n}x{h}x{w}x{c} needs {}",
                data.len(),
                n * h * w * c
            )));
        }
        Ok(Self {
            n,
            h,
            w,
            c,
            data,
            fps: DEFAULT_FPS,
        })
    }

    pub fn pixel(&self, frame: usize, y: usize, x: usize, ch: usize) -> u8 {
        self.data[((frame * self.h + y) * self.w + x) * self.c + ch]
    }

    /// Mirrors every frame left to right.
    pub fn flipped(&self) -> Self {
        let mut out = self.clone();
        let (w, c) = (self.w, self.c);
        for row in out.data.chunks_exact_mut(w * c) {
            for x in 0..w / 2 {
                for ch in 0..c {
                    row.swap(x * c + ch, (w - 1 - x) * c + ch);
                }
            }
        }
        out
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut buf = Vec::with_capacity(24 + self.data.len());
        buf.extend_from_slice(CLIP_MAGIC);
        for d in [self.n, self.h, self.w, self.c] {
            buf.extend_from_slice(&(d as u32).to_le_bytes());
        }
        buf.extend_from_slice(&self.data);
        buf
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        check_magic(bytes, CLIP_MAGIC, "clip container")?;
        let dims: Vec<usize> = (0..4)
            .map(|i| read_u32(bytes, 8 + 4 * i, "clip container").map(|v| v as usize))
            .collect::<Result<_>>()?;
        let need = 24 + dims.iter().product::<usize>();
        check_len(bytes, need, "clip container")?;
        Self::new(dims[0], dims[1], dims[2], dims[3], bytes[24..].to_vec()).map_err(|e| Error::Parse {
            what: "clip container",
            offset: 8,
            msg: e.to_string(),
        })
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        create_parent(path)?;
        fs::write(path, self.to_bytes())?;
        Ok(())
    }

    pub fn read(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).map_err(|e| Error::data(path, e.to_string()))?;
        Self::from_bytes(&bytes).map_err(|e| Error::data(path, e.to_string()))
    }

    /// (n, c, h, w) float tensor with pixels mapped to [-1, 1].
    pub fn to_tensor(&self) -> Result<Tensor> {
        let mut out = vec![0f32; self.data.len()];
        for f in 0..self.n {
            for y in 0..self.h {
                for x in 0..self.w {
                    for ch in 0..self.c {
                        let v = self.pixel(f, y, x, ch) as f32 / 127.5 - 1.0;
                        out[((f * self.c + ch) * self.h + y) * self.w + x] = v;
                    }
                }
            }
        }
        Ok(Tensor::from_vec(out, (self.n, self.c, self.h, self.w), &Device::Cpu)?)
    }
}

/// Normalized (n, c, h, w) frames. During training one Bernoulli(0.5) draw
/// decides whether the whole clip is mirrored.
pub fn preprocess_frames(clip: &VideoClip, training: bool, rng: &mut impl Rng) -> Result<(Tensor, bool)> {
    let flip = training && rng.random_bool(0.5);
    let t = if flip { clip.flipped().to_tensor()? } else { clip.to_tensor()? };
    Ok((t, flip))
}

pub fn mel_to_bytes(spec: &LogMelSpec) -> Vec<u8> {
    let (t, m) = spec.frames.dim();
    let mut buf = Vec::with_capacity(16 + 4 * t * m);
    buf.extend_from_slice(MEL_MAGIC);
    buf.extend_from_slice(&(t as u32).to_le_bytes());
    buf.extend_from_slice(&(m as u32).to_le_bytes());
    for v in spec.frames.iter() {
        buf.extend_from_slice(&v.to_le_bytes());
    }
    buf
}

/// Parses a spectrogram file. The frame rate is not stored and is supplied
/// by the caller.
pub fn mel_from_bytes(bytes: &[u8], frame_rate: f64) -> Result<LogMelSpec> {
    check_magic(bytes, MEL_MAGIC, "mel file")?;
    let t = read_u32(bytes, 8, "mel file")? as usize;
    let m = read_u32(bytes, 12, "mel file")? as usize;
    check_len(bytes, 16 + 4 * t * m, "mel file")?;
    let data: Vec<f32> = bytes[16..]
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
        .collect();
    Ok(LogMelSpec {
        frames: Array2::from_shape_vec((t, m), data).expect("sized payload"),
        frame_rate,
    })
}

pub fn write_mel(path: &Path, spec: &LogMelSpec) -> Result<()> {
    create_parent(path)?;
    fs::write(path, mel_to_bytes(spec))?;
    Ok(())
}

pub fn read_mel(path: &Path, frame_rate: f64) -> Result<LogMelSpec> {
    let bytes = fs::read(path).map_err(|e| Error::data(path, e.to_string()))?;
    mel_from_bytes(&bytes, frame_rate).map_err(|e| Error::data(path, e.to_string()))
}

pub(crate) fn create_parent(path: &Path) -> Result<()> {
    if let Some(dir) = path.parent() {
        if !dir.as_os_str().is_empty() {
            fs::create_dir_all(dir)?;
        }
    }
    Ok(())
}

fn check_magic(bytes: &[u8], magic: &[u8; 8], what: &'static str) -> Result<()> {
    if bytes.len() < 8 {
        return Err(Error::Parse {
            what,
            offset: bytes.len() as u64,
            msg: format!("truncated magic, missing {} bytes", 8 - bytes.len()),
        });
    }
    if &bytes[..8] != magic {
        return Err(Error::Parse {
            what,
            offset: 0,
            msg: format!("bad magic {:?}", String::from_utf8_lossy(&bytes[..8])),
        });
    }
    Ok(())
}

fn read_u32(bytes: &[u8], offset: usize, what: &'static str) -> Result<u32> {
    match bytes.get(offset..offset + 4) {
        Some(b) => Ok(u32::from_le_bytes(b.try_into().expect("4 bytes"))),
        None => Err(Error::Parse {
            what,
            offset: bytes.len() as u64,
            msg: format!("truncated header, missing {} bytes", offset + 4 - bytes.len()),
        }),
    }
}

fn check_len(bytes: &[u8], need: usize, what: &'static str) -> Result<()> {
    if bytes.len() < need {
        return Err(Error::Parse {
            what,
            offset: bytes.len() as u64,
            msg: format!("truncated payload, missing {} bytes", need - bytes.len()),
        });
    }
    if bytes.len() > need {
        return Err(Error::Parse {
            what,
            offset: need as u64,
            msg: format!("{} trailing bytes", bytes.len() - need),
        });
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn clip(n: usize, h: usize, w: usize) -> VideoClip {
        let data = (0..n * h * w * 3).map(|i| (i * 37 % 256) as u8).collect();
        VideoClip::new(n, h, w, 3, data).unwrap()
    }

    proptest! {
        #[test]
        fn clip_round_trip(n in 1usize..4, h in 1usize..6, w in 1usize..6, seed in any::<u8>()) {
            let data: Vec<u8> = (0..n * h * w * 3).map(|i| (i as u8).wrapping_mul(seed)).collect();
            let c = VideoClip::new(n, h, w, 3, data).unwrap();
            let bytes = c.to_bytes();
            let back = VideoClip::from_bytes(&bytes).unwrap();
            prop_assert_eq!(back.to_bytes(), bytes);
        }

        #[test]
        fn mel_round_trip(t in 1usize..20, vals in proptest::collection::vec(-1f32..1f32, 80)) {
            let frames = Array2::from_shape_fn((t, 80), |(i, j)| vals[j] * (i as f32 + 1.0).recip());
            let spec = LogMelSpec { frames, frame_rate: 80.0 };
            let back = mel_from_bytes(&mel_to_bytes(&spec), 80.0).unwrap();
            prop_assert!(back.frames.iter().zip(spec.frames.iter()).all(|(a, b)| a.to_bits() == b.to_bits()));
        }
    }

    #[test]
    fn truncation_and_magic_errors() {
        let bytes = clip(2, 3, 4).to_bytes();
        let err = VideoClip::from_bytes(&bytes[..bytes.len() - 5]).unwrap_err();
        assert!(err.to_string().contains("missing 5 bytes"), "{err}");
        let err = VideoClip::from_bytes(&bytes[..10]).unwrap_err();
        assert!(err.to_string().contains("missing 2 bytes"), "{err}");
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(matches!(VideoClip::from_bytes(&bad), Err(Error::Parse { offset: 0, .. })));
        let spec = LogMelSpec { frames: Array2::zeros((3, 80)), frame_rate: 80.0 };
        let mb = mel_to_bytes(&spec);
        let err = mel_from_bytes(&mb[..mb.len() - 4], 80.0).unwrap_err();
        assert!(err.to_string().contains("missing 4 bytes"), "{err}");
    }

    #[test]
    fn flip_is_involution_and_normalization_bounded() {
        let c = clip(2, 3, 5);
        assert_eq!(c.flipped().flipped(), c);
        assert_ne!(c.flipped(), c);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let t = c.to_tensor().unwrap();
        assert_eq!(t.dims(), &[2, 3, 3, 5]);
        let v = crate::nn::flat_f32(&t).unwrap();
        assert!(v.iter().all(|x| (-1.0..=1.0).contains(x)));
        for _ in 0..20 {
            assert!(!preprocess_frames(&c, false, &mut rng).unwrap().1);
        }
    }

    #[test]
    fn flips_are_seeded() {
        let c = clip(1, 2, 2);
        let draw = |seed| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            (0..32).map(|_| preprocess_frames(&c, true, &mut rng).unwrap().1).collect::<Vec<_>>()
        };
        assert_eq!(draw(5), draw(5));
        let flips = draw(5).iter().filter(|&&f| f).count();
        assert!((6..=26).contains(&flips));
    }
}
