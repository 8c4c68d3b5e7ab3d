//! Synthesize input audio with a trained V2A model and build an AV2A model
//! from its weights.

use std::path::{Path, PathBuf};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::data::{write_mel, write_wav, Manifest, ManifestRow};
use crate::dsp::{LogMelSpec, WaveformClip};
use crate::error::{Error, Result};
use crate::models::{Family, Variant};
use crate::nn::{flat_f32, ModalityMode, SpeakerEncoder, SpeakerEncoderSpec};
use crate::train::batch::{Dataset, Needs};
use crate::train::bundle::{submodule, Bundle};
use crate::train::checkpoint::{load_checkpoint, TrainState};
use crate::train::run::generate;

/// Submodules copied from the V2A model.
pub const TRANSPLANTED: [&str; 3] = ["video_encoder", "decoder", "discriminator"];

/// Builds an AV2A model of the same family whose video encoder, decoder and
/// discriminator are copies of `v2a`. Batch-norm running statistics of the
/// copied layers seed all three per-mode sets. The audio encoder and the
/// temporal module keep their fresh initialization from `seed`.
pub fn transplant(v2a: &Bundle, seed: u64) -> Result<Bundle> {
    if v2a.variant != Variant::V2a {
        return Err(Error::config("transplant source must be a V2A model"));
    }
    let av = Bundle::build(&v2a.model, Variant::Av2a, seed)?;
    let mut filled = std::collections::BTreeSet::new();
    for (name, var, _) in v2a.store.iter() {
        if !TRANSPLANTED.contains(&submodule(name)) {
            continue;
        }
        let targets: Vec<String> = if av.store.get(name).is_some() {
            vec![name.to_string()]
        } else {
            ModalityMode::ALL.iter().map(|m| format!("{name}.{}", m.suffix())).collect()
        };
        for t in targets {
            av.store.set(&t, var.as_tensor())?;
            filled.insert(t);
        }
    }
    if let Some(missing) = av.names_in(&TRANSPLANTED).into_iter().find(|n| !filled.contains(n)) {
        return Err(Error::shape(format!("transplant left {missing} without a source tensor")));
    }
    Ok(av)
}

/// Loads a V2A checkpoint, checks its family and transplants it.
pub fn build_av2a_from_v2a(checkpoint: &Path, family: Option<Family>, seed: u64) -> Result<(Bundle, TrainState)> {
    let (v2a, state) = load_checkpoint(checkpoint)?;
    if let Some(f) = family {
        if f != v2a.family() {
            return Err(Error::config(format!(
                "checkpoint is a {} model, expected {}",
                v2a.family().name(),
                f.name()
            )));
        }
    }
    let av = transplant(&v2a, seed)?;
    Ok((av, state))
}

pub fn speaker_encoder_of(state: &TrainState) -> Result<SpeakerEncoder> {
    let spec: SpeakerEncoderSpec = state
        .train_config
        .get("speaker_encoder")
        .map(|v| serde_json::from_value(v.clone()))
        .transpose()?
        .unwrap_or_default();
    SpeakerEncoder::from_spec(&spec)
}

fn absolute(manifest: &Manifest, p: &Path) -> PathBuf {
    let r = manifest.resolve(p);
    r.canonicalize().unwrap_or(r)
}

/// Runs a V2A model over every row and writes `synth/<id>.wav` (waveform
/// family) or `synth/<id>.mel` (mel family) plus `manifest.jsonl` under
/// `out_dir`. Original paths in the new manifest are absolute.
pub fn synthesize_dataset(checkpoint: &Path, manifest: &Manifest, out_dir: &Path, seed: u64) -> Result<Manifest> {
    let (bundle, state) = load_checkpoint(checkpoint)?;
    if bundle.variant != Variant::V2a {
        return Err(Error::config("synthesis needs a V2A checkpoint"));
    }
    let failed: Vec<String> = manifest
        .rows
        .iter()
        .filter_map(|r| {
            let p = manifest.resolve(&r.video_path);
            crate::data::VideoClip::read(&p).err().map(|e| format!("{}: {e}", r.id))
        })
        .collect();
    if !failed.is_empty() {
        return Err(Error::data(
            &manifest.base_dir,
            format!("{} of {} rows failed: {}", failed.len(), manifest.rows.len(), failed.join("; ")),
        ));
    }
    let speaker = speaker_encoder_of(&state)?;
    let rows: Vec<usize> = (0..manifest.rows.len()).collect();
    let needs = Needs { audio: false, synth: None };
    let mut data = Dataset::load(manifest, &rows, bundle.sample_rate(), needs, &speaker)?;
    let synth_dir = out_dir.join("synth");
    std::fs::create_dir_all(&synth_dir)?;
    let mut out_rows = Vec::with_capacity(manifest.rows.len());
    for (i, r) in manifest.rows.iter().enumerate() {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(i as u64);
        let batch = data.batch(&[i], false, None, &mut rng)?;
        let out = generate(&bundle, &batch, ModalityMode::V)?.get(0)?;
        let rel = match bundle.family() {
            Family::Wave => {
                let rel = PathBuf::from("synth").join(format!("{}.wav", r.id));
                let w = WaveformClip::new(flat_f32(&out)?.into_iter().map(f64::from).collect(), data.sample_rate);
                write_wav(&out_dir.join(&rel), &w)?;
                rel
            }
            Family::Mel => {
                let rel = PathBuf::from("synth").join(format!("{}.mel", r.id));
                let (t, m) = out.dims2()?;
                let spec = LogMelSpec {
                    frames: ndarray::Array2::from_shape_vec((t, m), flat_f32(&out)?).expect("sized"),
                    frame_rate: data.mel.frame_rate(),
                };
                write_mel(&out_dir.join(&rel), &spec)?;
                rel
            }
        };
        out_rows.push(ManifestRow {
            video_path: absolute(manifest, &r.video_path),
            audio_path: r.audio_path.as_ref().map(|p| absolute(manifest, p)),
            synth_audio_path: Some(rel),
            ..r.clone()
        });
    }
    if data.fallbacks > 0 {
        log::warn!("{} rows used their own audio as speaker reference", data.fallbacks);
    }
    let out = Manifest::new(out_rows, out_dir.to_path_buf())?;
    out.save(&out_dir.join("manifest.jsonl"))?;
    Ok(out)
}
