use std::path::Path;

use hound::{SampleFormat, WavReader, WavSpec, WavWriter};

use super::formats::create_parent;
use crate::dsp::WaveformClip;
use crate::error::{Error, Result};

/// Reads 16-bit PCM or 32-bit float WAV; multi-channel input is averaged.
pub fn read_wav(path: &Path) -> Result<WaveformClip> {
    let mut reader = WavReader::open(path).map_err(|e| Error::data(path, e.to_string()))?;
    let spec = reader.spec();
    let interleaved: Vec<f64> = match (spec.sample_format, spec.bits_per_sample) {
        (SampleFormat::Int, 16) => reader
            .samples::<i16>()
            .map(|s| s.map(|v| v as f64 / 32768.0))
            .collect::<std::result::Result<_, _>>()?,
        (SampleFormat::Float, 32) => reader
            .samples::<f32>()
            .map(|s| s.map(f64::from))
            .collect::<std::result::Result<_, _>>()?,
        (fmt, bits) => {
            return Err(Error::data(
                path,
                format!("unsupported WAV encoding {fmt:?} {bits}-bit (16-bit PCM or 32-bit float)"),
            ))
        }
    };
    let ch = spec.channels as usize;
    let samples = interleaved
        .chunks_exact(ch)
        .map(|frame| frame.iter().sum::<f64>() / ch as f64)
        .collect();
    Ok(WaveformClip::new(samples, spec.sample_rate))
}

/// Writes mono 32-bit float at the clip's sample rate.
pub fn write_wav(path: &Path, clip: &WaveformClip) -> Result<()> {
    create_parent(path)?;
    let spec = WavSpec {
        channels: 1,
        sample_rate: clip.sample_rate,
        bits_per_sample: 32,
        sample_format: SampleFormat::Float,
    };
    let mut w = WavWriter::create(path, spec)?;
    for &s in &clip.samples {
        w.write_sample(s as f32)?;
    }
    w.finalize()?;
    Ok(())
}
