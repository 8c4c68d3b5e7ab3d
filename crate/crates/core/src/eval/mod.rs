//! Intelligibility metrics, word error rate and the evaluation report.

pub mod stoi;
pub mod wer;

use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::bootstrap::speaker_encoder_of;
use crate::data::{write_wav, Manifest, Split};
use crate::dsp::{log_mel, LogMelSpec, MelConfig, WaveformClip};
use crate::error::{Error, Result};
use crate::loss::l1_mel_loss;
use crate::models::{run_external, Family, Variant, Vocoder};
use crate::nn::{flat_f32, ModalityMode};
use crate::train::batch::{Dataset, Needs};
use crate::train::checkpoint::load_checkpoint;
use crate::train::run::generate;

pub use stoi::stoi;
pub use wer::{edit_distance, tokens, wer};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClipMetrics {
    pub id: String,
    pub stoi: Option<f64>,
    pub estoi: Option<f64>,
    pub wer: Option<f64>,
    pub mel_l1: f64,
    pub hypothesis: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub clips: usize,
    pub mean_stoi: Option<f64>,
    pub mean_estoi: Option<f64>,
    pub mean_wer: Option<f64>,
    pub mean_mel_l1: f64,
    /// Clips too short for STOI after silence removal.
    pub skipped_stoi: usize,
    /// Clips whose transcriber run failed.
    pub skipped_wer: usize,
    pub speaker_fallbacks: usize,
    /// Always absent: PESQ is not computed.
    pub pesq: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub clips: Vec<ClipMetrics>,
    pub summary: Summary,
}

impl MetricReport {
    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)? + "\n")
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        crate::data::formats::create_parent(path)?;
        std::fs::write(path, self.to_json()?)?;
        Ok(())
    }
}

/// One generated clip next to its reference.
pub struct EvalItem {
    pub id: String,
    pub reference: WaveformClip,
    pub generated: WaveformClip,
    /// Compared directly for mel-family models instead of re-analysing the
    /// vocoded waveform.
    pub generated_mel: Option<LogMelSpec>,
    pub transcript: Option<String>,
}

fn mean(v: impl Iterator<Item = f64>) -> Option<f64> {
    let (s, n) = v.fold((0.0, 0usize), |(s, n), x| (s + x, n + 1));
    (n > 0).then(|| s / n as f64)
}

fn transcribe(cmd: &str, clip: &WaveformClip) -> Result<String> {
    let dir = tempfile::tempdir()?;
    let p = dir.path().join("clip.wav");
    write_wav(&p, clip)?;
    run_external(cmd, &[&p])
}

pub fn evaluate_items(items: &[EvalItem], transcriber: Option<&str>, speaker_fallbacks: usize) -> Result<MetricReport> {
    if items.is_empty() {
        return Err(Error::config("nothing to evaluate"));
    }
    let mut clips = Vec::with_capacity(items.len());
    let (mut skipped_stoi, mut skipped_wer) = (0, 0);
    for it in items {
        let generated = it.generated.fit_to(it.reference.len());
        let (s, e) = match (stoi(&it.reference, &generated, false), stoi(&it.reference, &generated, true)) {
            (Ok(s), Ok(e)) => (Some(s), Some(e)),
            (Err(Error::TooShort(m)), _) | (_, Err(Error::TooShort(m))) => {
                log::warn!("{}: {m}", it.id);
                skipped_stoi += 1;
                (None, None)
            }
            (Err(err), _) | (_, Err(err)) => return Err(err),
        };
        let cfg = MelConfig::for_sample_rate(it.reference.sample_rate);
        let truth = log_mel(&it.reference, &cfg)?;
        let mel_l1 = match &it.generated_mel {
            Some(m) => l1_mel_loss(&truth, m)?,
            None => l1_mel_loss(&truth, &log_mel(&generated, &cfg)?)?,
        };
        let (mut w, mut hypothesis) = (None, None);
        if let (Some(cmd), Some(reference)) = (transcriber, &it.transcript) {
            match transcribe(cmd, &generated) {
                Ok(text) => {
                    w = Some(wer(&tokens(reference), &tokens(&text))?);
                    hypothesis = Some(text.trim().to_string());
                }
                Err(err) => {
                    log::warn!("{}: transcriber failed: {err}", it.id);
                    skipped_wer += 1;
                }
            }
        }
        clips.push(ClipMetrics {
            id: it.id.clone(),
            stoi: s,
            estoi: e,
            wer: w,
            mel_l1,
            hypothesis,
        });
    }
    let summary = Summary {
        clips: clips.len(),
        mean_stoi: mean(clips.iter().filter_map(|c| c.stoi)),
        mean_estoi: mean(clips.iter().filter_map(|c| c.estoi)),
        mean_wer: mean(clips.iter().filter_map(|c| c.wer)),
        mean_mel_l1: mean(clips.iter().map(|c| c.mel_l1)).expect("non-empty"),
        skipped_stoi,
        skipped_wer,
        speaker_fallbacks,
        pesq: None,
    };
    Ok(MetricReport { clips, summary })
}

/// Runs a checkpoint over the rows of `split` (all rows when `None`) and
/// scores its outputs against the ground-truth audio. AV2A models use the
/// synthesized audio of each row; mel outputs go through `vocoder`.
pub fn evaluate_checkpoint(
    checkpoint: &Path,
    manifest: &Manifest,
    split: Option<Split>,
    vocoder: &Vocoder,
    transcriber: Option<&str>,
    seed: u64,
) -> Result<MetricReport> {
    let (bundle, state) = load_checkpoint(checkpoint)?;
    let rows = match split {
        Some(s) => manifest.split(s),
        None => (0..manifest.rows.len()).collect(),
    };
    if rows.is_empty() {
        return Err(Error::config("no manifest rows to evaluate"));
    }
    let synth = (bundle.variant == Variant::Av2a).then(|| bundle.family());
    let needs = Needs { audio: true, synth };
    let speaker = speaker_encoder_of(&state)?;
    let mut data = Dataset::load(manifest, &rows, bundle.sample_rate(), needs, &speaker)?;
    let mut items = Vec::with_capacity(rows.len());
    for (k, &row) in rows.iter().enumerate() {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(row as u64);
        let batch = data.batch(&[k], false, None, &mut rng)?;
        let out = generate(&bundle, &batch, ModalityMode::AV)?.get(0)?;
        let reference = data.clips[k].audio.clone().expect("loaded with audio");
        let (generated, generated_mel) = match bundle.family() {
            Family::Wave => (
                WaveformClip::new(flat_f32(&out)?.into_iter().map(f64::from).collect(), data.sample_rate),
                None,
            ),
            Family::Mel => {
                let (t, m) = out.dims2()?;
                let spec = LogMelSpec {
                    frames: ndarray::Array2::from_shape_vec((t, m), flat_f32(&out)?).expect("sized"),
                    frame_rate: data.mel.frame_rate(),
                };
                (vocoder.vocode(&spec, &data.mel)?, Some(spec))
            }
        };
        items.push(EvalItem {
            id: manifest.rows[row].id.clone(),
            reference,
            generated,
            generated_mel,
            transcript: manifest.rows[row].transcript.clone(),
        });
    }
    evaluate_items(&items, transcriber, data.fallbacks)
}

#[cfg(test)]
mod tests {
    use super::stoi::tests::{speech_like, white};
    use super::*;

    fn item(id: &str, seed: u64, same: bool) -> EvalItem {
        let reference = speech_like(seed, 16_000, 1.5);
        let generated = if same { reference.clone() } else { white(seed + 7, reference.len(), 16_000, 0.1) };
        EvalItem {
            id: id.into(),
            reference,
            generated,
            generated_mel: None,
            transcript: Some("bin blue at f two now".into()),
        }
    }

    #[test]
    fn perfect_outputs_score_perfectly() {
        let items: Vec<_> = (0..3).map(|i| item(&format!("c{i}"), i, true)).collect();
        let r = evaluate_items(&items, None, 0).unwrap();
        assert!((r.summary.mean_stoi.unwrap() - 1.0).abs() < 1e-6);
        assert_eq!(r.summary.mean_mel_l1, 0.0);
        assert_eq!(r.summary.mean_wer, None);
        assert_eq!(r.summary.pesq, None);
        assert!(r.to_json().unwrap().contains("\"pesq\": null"));
    }

    #[test]
    fn means_are_recomputable_and_transcriber_failures_are_skipped() {
        let items: Vec<_> = (0..4).map(|i| item(&format!("c{i}"), i, i % 2 == 0)).collect();
        let dir = tempfile::tempdir().unwrap();
        let script = dir.path().join("asr.sh");
        std::fs::write(&script, "echo bin blue at f two please\n").unwrap();
        let r = evaluate_items(&items, Some(&format!("sh {}", script.display())), 1).unwrap();
        let m = r.clips.iter().map(|c| c.stoi.unwrap()).sum::<f64>() / 4.0;
        assert!((r.summary.mean_stoi.unwrap() - m).abs() < 1e-12);
        let l = r.clips.iter().map(|c| c.mel_l1).sum::<f64>() / 4.0;
        assert!((r.summary.mean_mel_l1 - l).abs() < 1e-12);
        assert!((r.summary.mean_wer.unwrap() - 1.0 / 6.0).abs() < 1e-12);
        assert_eq!(r.clips[0].hypothesis.as_deref(), Some("bin blue at f two please"));

        let r = evaluate_items(&items, Some("false"), 0).unwrap();
        assert_eq!((r.summary.skipped_wer, r.summary.mean_wer), (4, None));
        assert!(r.clips.iter().all(|c| c.stoi.is_some()));

        let a = evaluate_items(&items, None, 0).unwrap().to_json().unwrap();
        let b = evaluate_items(&items, None, 0).unwrap().to_json().unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn short_clips_are_counted_not_fatal() {
        let mut it = item("short", 1, true);
        it.reference = WaveformClip::new(it.reference.samples[..3000].to_vec(), 16_000);
        it.generated = it.reference.clone();
        let r = evaluate_items(&[it, item("ok", 2, true)], None, 0).unwrap();
        assert_eq!(r.summary.skipped_stoi, 1);
        assert_eq!(r.clips[0].stoi, None);
        assert!((r.summary.mean_stoi.unwrap() - 1.0).abs() < 1e-6);
    }
}
