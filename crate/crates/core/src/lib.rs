//! Video-to-speech synthesis with self-synthesized audio inputs.
//!
//! A video-to-audio (V2A) generator produces speech from silent lip video.
//! Its output then serves as the audio input of an audio-visual (AV2A) model
//! built from the V2A weights and trained with modality dropout. Both a raw
//! waveform family (adversarial) and a mel-spectrogram family (L1) exist.

pub mod bootstrap;
pub mod data;
pub mod dsp;
pub mod error;
pub mod eval;
pub mod loss;
pub mod models;
pub mod nn;
pub mod train;

pub use error::{Error, ErrorKind, Result};
