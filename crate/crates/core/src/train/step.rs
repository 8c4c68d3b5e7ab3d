//! One optimizer step per branch, routed per modality mode.

use candle_core::{DType, Tensor};
use rand::RngCore;

use super::batch::{tensor_hash, Batch};
use super::bundle::{submodule, Bundle, Generator};
use super::checkpoint::TrainState;
use super::config::TrainProcedure;
use super::optim::{Adam, AdamConfig};
use super::schedule::disc_crop;
use crate::error::{Error, Result};
use crate::loss::{combine, l1_loss, ls_gan_discriminator_loss, ls_gan_generator_loss, WaveLosses};
use crate::models::Variant;
use crate::nn::{Ctx, ModalityMode};

pub const GENERATOR_OPT: &str = "generator";
pub const DISCRIMINATOR_OPT: &str = "discriminator";

#[derive(Debug, Clone, PartialEq)]
pub struct BranchReport {
    pub mode: ModalityMode,
    /// Generator objective of the branch.
    pub loss: f64,
    pub d_loss: Option<f64>,
    /// Adversarial, multi-resolution STFT and MFCC terms (waveform family).
    pub terms: Option<[f64; 3]>,
    /// SHA-256 of the audio-encoder input, when the branch used one.
    pub audio_input_hash: Option<String>,
    pub updated: Vec<String>,
}

/// Generator submodules a branch may update.
pub fn branch_modules(mode: ModalityMode) -> &'static [&'static str] {
    match mode {
        ModalityMode::AV => &["video_encoder", "audio_encoder", "temporal", "decoder"],
        ModalityMode::V => &["video_encoder", "temporal", "decoder"],
        ModalityMode::A => &["audio_encoder", "temporal", "decoder"],
    }
}

/// Branch list for a model: V2A always trains the visual-only branch.
pub fn branches(variant: Variant, procedure: Option<TrainProcedure>) -> Result<&'static [ModalityMode]> {
    match (variant, procedure) {
        (Variant::V2a, _) => Ok(&[ModalityMode::V]),
        (Variant::Av2a, Some(p)) => Ok(p.branches()),
        (Variant::Av2a, None) => Err(Error::config("audio-visual training needs a procedure")),
    }
}

/// Audio fed to the audio encoder in `mode`: synthesized audio, or ground
/// truth in the audio-only branch of the ground-truth procedure.
fn audio_input<'a>(
    mode: ModalityMode,
    procedure: Option<TrainProcedure>,
    synth: Option<&'a Tensor>,
    truth: Option<&'a Tensor>,
) -> Result<Option<&'a Tensor>> {
    if !mode.uses_audio() {
        return Ok(None);
    }
    if mode == ModalityMode::A && procedure.is_some_and(TrainProcedure::gt_audio) {
        return truth
            .map(Some)
            .ok_or_else(|| Error::config("ground-truth audio missing for the audio-only branch (audio_path)"));
    }
    synth
        .map(Some)
        .ok_or_else(|| Error::config("synthesized audio missing (synth_audio_path)"))
}

fn optimizer<'a>(state: &'a mut TrainState, name: &str, cfg: AdamConfig) -> Result<&'a mut Adam> {
    if !state.optimizers.contains_key(name) {
        state.optimizers.insert(name.to_string(), Adam::new(cfg)?);
    }
    Ok(state.optimizers.get_mut(name).expect("inserted"))
}

fn scalar(t: &Tensor) -> Result<f64> {
    let v = t.to_dtype(DType::F64)?.to_scalar::<f64>()?;
    if !v.is_finite() {
        return Err(Error::NonFinite("training loss"));
    }
    Ok(v)
}

pub struct WaveStepConfig<'a> {
    pub losses: &'a WaveLosses,
    pub adam: AdamConfig,
    pub lr: f64,
    pub crop_len: usize,
    pub gan: bool,
}

/// Discriminator update on aligned random crops of real and generated
/// audio, then a generator update restricted to the submodules of `mode`.
pub fn train_branch_wave(
    bundle: &Bundle,
    state: &mut TrainState,
    batch: &Batch,
    mode: ModalityMode,
    procedure: Option<TrainProcedure>,
    cfg: &WaveStepConfig,
) -> Result<BranchReport> {
    let Generator::Wave(gen) = &bundle.gen else {
        return Err(Error::config("waveform step on a mel-family model"));
    };
    let disc = bundle.disc.as_ref().ok_or_else(|| Error::config("waveform model without discriminator"))?;
    let real = batch.audio.as_ref().ok_or_else(|| Error::config("ground-truth audio missing (audio_path)"))?;
    let input = audio_input(mode, procedure, batch.synth_wave.as_ref(), batch.audio.as_ref())?;
    let audio_input_hash = input.map(tensor_hash).transpose()?;
    let ctx = Ctx::train(mode, state.rng.next_u64());
    let fake = gen.forward(&batch.frames, input, &batch.spk, &ctx)?;
    let d_loss = if cfg.gan {
        let (rc, fc) = disc_crop(real, &fake.detach(), cfg.crop_len, &mut state.rng)?;
        let d = ls_gan_discriminator_loss(&disc.forward(&rc)?, &disc.forward(&fc)?)?;
        let grads = d.backward()?;
        let lr = cfg.lr;
        optimizer(state, DISCRIMINATOR_OPT, cfg.adam)?.step(&bundle.store, &grads, &|n: &str| {
            (submodule(n) == "discriminator").then_some(lr)
        })?;
        Some(scalar(&d)?)
    } else {
        None
    };
    let adv = if cfg.gan {
        let (_, fc) = disc_crop(real, &fake, cfg.crop_len, &mut state.rng)?;
        ls_gan_generator_loss(&disc.forward(&fc)?)?
    } else {
        Tensor::zeros((), fake.dtype(), fake.device())?
    };
    let mr = cfg.losses.mrstft.forward(real, &fake)?;
    let mf = cfg.losses.mfcc.loss(real, &fake)?;
    let total = combine(&adv, &mr, &mf, &cfg.losses.weights)?;
    let grads = total.backward()?;
    let allowed = branch_modules(mode);
    let lr = cfg.lr;
    let updated = optimizer(state, GENERATOR_OPT, cfg.adam)?.step(&bundle.store, &grads, &|n: &str| {
        allowed.contains(&submodule(n)).then_some(lr)
    })?;
    state.schedule.step += 1;
    Ok(BranchReport {
        mode,
        loss: scalar(&total)?,
        d_loss,
        terms: Some([scalar(&adv)?, scalar(&mr)?, scalar(&mf)?]),
        audio_input_hash,
        updated,
    })
}

/// Every branch of the procedure in order.
pub fn train_step_wave(
    bundle: &Bundle,
    state: &mut TrainState,
    batch: &Batch,
    procedure: Option<TrainProcedure>,
    cfg: &WaveStepConfig,
) -> Result<Vec<BranchReport>> {
    branches(bundle.variant, procedure)?
        .iter()
        .map(|&mode| train_branch_wave(bundle, state, batch, mode, procedure, cfg))
        .collect()
}

pub struct MelStepConfig {
    pub adam: AdamConfig,
    pub lr: f64,
    /// 1: only the audio encoder and temporal module train. 2: everything,
    /// with the video encoder at `frontend_lr`. V2A models ignore stages.
    pub stage: u8,
    pub frontend_lr: f64,
}

/// Mel-family learning rate of `name`, or `None` when frozen.
pub fn mel_lr(name: &str, variant: Variant, cfg: &MelStepConfig) -> Option<f64> {
    let sub = submodule(name);
    match (variant, cfg.stage) {
        (Variant::V2a, _) => Some(cfg.lr),
        (Variant::Av2a, 1) => matches!(sub, "audio_encoder" | "temporal").then_some(cfg.lr),
        (Variant::Av2a, _) => Some(if sub == "video_encoder" { cfg.frontend_lr } else { cfg.lr }),
    }
}

/// L1 spectrogram reconstruction for one branch.
pub fn train_branch_mel(
    bundle: &Bundle,
    state: &mut TrainState,
    batch: &Batch,
    mode: ModalityMode,
    procedure: Option<TrainProcedure>,
    cfg: &MelStepConfig,
) -> Result<BranchReport> {
    let Generator::Mel(gen) = &bundle.gen else {
        return Err(Error::config("mel step on a waveform-family model"));
    };
    if bundle.variant == Variant::Av2a && cfg.stage == 2 && state.selected_epoch.is_none() {
        return Err(Error::config("stage 2 needs a selected stage-1 checkpoint"));
    }
    let target = batch
        .target_mel
        .as_ref()
        .ok_or_else(|| Error::config("ground-truth audio missing (audio_path)"))?;
    let input = audio_input(mode, procedure, batch.synth_mel.as_ref(), batch.target_mel.as_ref())?;
    let audio_input_hash = input.map(tensor_hash).transpose()?;
    let mut ctx = Ctx::train(mode, state.rng.next_u64());
    ctx.frozen_video = mel_lr("video_encoder", bundle.variant, cfg).is_none();
    let out = gen.forward(&batch.frames, input, &batch.spk, batch.mel_frames, &mut ctx)?;
    let loss = l1_loss(&out, target)?;
    let grads = loss.backward()?;
    let allowed = branch_modules(mode);
    let variant = bundle.variant;
    let updated = optimizer(state, GENERATOR_OPT, cfg.adam)?.step(&bundle.store, &grads, &|n: &str| {
        if !allowed.contains(&submodule(n)) {
            return None;
        }
        mel_lr(n, variant, cfg)
    })?;
    state.schedule.step += 1;
    Ok(BranchReport {
        mode,
        loss: scalar(&loss)?,
        d_loss: None,
        terms: None,
        audio_input_hash,
        updated,
    })
}

pub fn train_step_mel(
    bundle: &Bundle,
    state: &mut TrainState,
    batch: &Batch,
    procedure: Option<TrainProcedure>,
    cfg: &MelStepConfig,
) -> Result<Vec<BranchReport>> {
    branches(bundle.variant, procedure)?
        .iter()
        .map(|&mode| train_branch_mel(bundle, state, batch, mode, procedure, cfg))
        .collect()
}
