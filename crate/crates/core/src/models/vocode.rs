//! Mel to waveform conversion: Griffin-Lim, or an external command.

use std::path::Path;
use std::process::Command;

use crate::data::{read_wav, write_mel};
use crate::dsp::{griffin_lim, LogMelSpec, MelConfig, VocoderBackend, WaveformClip};
use crate::dsp::resample::resample;
use crate::error::{Error, Result};

pub const GRIFFIN_LIM_ITERS: usize = 60;

#[derive(Debug, Clone, PartialEq)]
pub struct Vocoder {
    pub backend: VocoderBackend,
    /// Program and leading arguments for the external backend; the mel file
    /// and output WAV paths are appended.
    pub command: Option<String>,
    pub iters: usize,
}

impl Vocoder {
    pub fn griffin_lim() -> Self {
        Self {
            backend: VocoderBackend::GriffinLim,
            command: None,
            iters: GRIFFIN_LIM_ITERS,
        }
    }

    pub fn external(command: impl Into<String>) -> Self {
        Self {
            backend: VocoderBackend::External,
            command: Some(command.into()),
            iters: GRIFFIN_LIM_ITERS,
        }
    }

    /// Waveform at `cfg.sample_rate`.
    pub fn vocode(&self, mel: &LogMelSpec, cfg: &MelConfig) -> Result<WaveformClip> {
        match self.backend {
            VocoderBackend::GriffinLim => griffin_lim(mel, cfg, self.iters),
            VocoderBackend::External => {
                let cmd = self
                    .command
                    .as_deref()
                    .ok_or_else(|| Error::config("external vocoder needs a command"))?;
                let dir = tempfile::tempdir()?;
                let (mel_path, wav_path) = (dir.path().join("in.mel"), dir.path().join("out.wav"));
                write_mel(&mel_path, mel)?;
                run_external(cmd, &[&mel_path, &wav_path])?;
                let w = read_wav(&wav_path)?;
                Ok(if w.sample_rate == cfg.sample_rate {
                    w
                } else {
                    WaveformClip::new(resample(&w.samples, w.sample_rate, cfg.sample_rate), cfg.sample_rate)
                })
            }
        }
    }
}

/// Runs `cmd` (split on whitespace) with `args` appended. Returns stdout.
pub fn run_external(cmd: &str, args: &[&Path]) -> Result<String> {
    let mut parts = cmd.split_whitespace();
    let program = parts.next().ok_or_else(|| Error::config("empty external command"))?;
    let out = Command::new(program)
        .args(parts)
        .args(args)
        .output()
        .map_err(|e| Error::External {
            command: cmd.to_string(),
            status: "not started".into(),
            stderr: e.to_string(),
        })?;
    if !out.status.success() {
        return Err(Error::External {
            command: cmd.to_string(),
            status: out.status.to_string(),
            stderr: String::from_utf8_lossy(&out.stderr).trim().to_string(),
        });
    }
    Ok(String::from_utf8_lossy(&out.stdout).into_owned())
}
