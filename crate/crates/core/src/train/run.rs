//! Epoch loops for V2A and AV2A training with validation-based selection.

use candle_core::Tensor;
use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::batch::{Batch, Dataset};
use super::bundle::{Bundle, Generator};
use super::checkpoint::TrainState;
use super::config::{TrainConfig, TrainProcedure};
use super::optim::Adam;
use super::schedule::{select_checkpoint, LrSchedule};
use super::step::{train_step_mel, train_step_wave, BranchReport, MelStepConfig, WaveStepConfig, GENERATOR_OPT};
use crate::dsp::{log_mel, LogMelSpec, WaveformClip};
use crate::error::{Error, Result};
use crate::loss::{l1_mel_loss, WaveLosses};
use crate::models::{Family, Variant};
use crate::nn::{flat_f32, Ctx, ModalityMode};

const VAL_SEED: u64 = 0x5A11_DA7E;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub epoch: usize,
    pub stage: Option<u8>,
    pub lr: f64,
    pub steps: u64,
    pub train_loss: f64,
    pub val_mel_l1: f64,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct RunLog {
    pub epochs: Vec<EpochLog>,
    pub selected_epoch: Option<usize>,
}

/// Eval-mode generator output for a batch: (batch, samples) for the
/// waveform family, (batch, T', n_mels) for the mel family.
pub fn generate(bundle: &Bundle, batch: &Batch, mode: ModalityMode) -> Result<Tensor> {
    let mode = if bundle.variant == Variant::V2a { ModalityMode::V } else { mode };
    match &bundle.gen {
        Generator::Wave(g) => {
            let input = if g.is_av() && mode.uses_audio() { batch.synth_wave.as_ref() } else { None };
            g.forward(&batch.frames, input, &batch.spk, &Ctx::eval(mode))
        }
        Generator::Mel(g) => {
            let input = if g.is_av() && mode.uses_audio() { batch.synth_mel.as_ref() } else { None };
            g.forward(&batch.frames, input, &batch.spk, batch.mel_frames, &mut Ctx::eval(mode))
        }
    }
}

/// Per-clip log-mel of a generated batch.
pub fn output_mels(bundle: &Bundle, out: &Tensor, data: &Dataset) -> Result<Vec<LogMelSpec>> {
    let b = out.dim(0)?;
    (0..b)
        .map(|i| {
            let row = out.get(i)?;
            match bundle.family() {
                Family::Wave => {
                    let w = WaveformClip::new(flat_f32(&row)?.into_iter().map(f64::from).collect(), data.sample_rate);
                    log_mel(&w, &data.mel)
                }
                Family::Mel => {
                    let (t, m) = row.dims2()?;
                    Ok(LogMelSpec {
                        frames: ndarray::Array2::from_shape_vec((t, m), flat_f32(&row)?).expect("sized"),
                        frame_rate: data.mel.frame_rate(),
                    })
                }
            }
        })
        .collect()
}

/// Mean mel L1 over the clips of `data`, one clip at a time, with fixed
/// speaker-reference draws.
pub fn validation_mel_l1(bundle: &Bundle, data: &mut Dataset, mode: ModalityMode) -> Result<f64> {
    if data.is_empty() {
        return Err(Error::config("validation set is empty"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(VAL_SEED);
    let mut total = 0.0;
    for i in 0..data.len() {
        let batch = data.batch(&[i], false, None, &mut rng)?;
        let out = generate(bundle, &batch, mode)?;
        let target = batch.target_mel.as_ref().ok_or_else(|| Error::config("validation needs audio_path"))?;
        let (t, m) = (target.dim(1)?, target.dim(2)?);
        let truth = LogMelSpec {
            frames: ndarray::Array2::from_shape_vec((t, m), flat_f32(target)?).expect("sized"),
            frame_rate: data.mel.frame_rate(),
        };
        total += l1_mel_loss(&truth, &output_mels(bundle, &out, data)?[0])?;
    }
    Ok(total / data.len() as f64)
}

fn mean_loss(reports: &[BranchReport]) -> f64 {
    reports.iter().map(|r| r.loss).sum::<f64>() / reports.len() as f64
}

/// One pass over `train` in a seeded order per epoch, then validation.
struct Loop<'a> {
    bundle: &'a Bundle,
    cfg: &'a TrainConfig,
    procedure: Option<TrainProcedure>,
    wave_losses: Option<WaveLosses>,
}

impl Loop<'_> {
    fn batch_size(&self) -> usize {
        match self.bundle.family() {
            Family::Wave => self.cfg.wave_optim.batch_size,
            Family::Mel => self.cfg.mel_optim.batch_size,
        }
    }

    fn max_frames(&self) -> usize {
        let secs = match self.bundle.family() {
            Family::Wave => self.cfg.wave_optim.max_clip_seconds,
            Family::Mel => self.cfg.mel_optim.max_clip_seconds,
        };
        (secs * crate::data::DEFAULT_FPS as f64).round().max(1.0) as usize
    }

    fn val_mode(&self) -> ModalityMode {
        match self.bundle.variant {
            Variant::V2a => ModalityMode::V,
            Variant::Av2a => ModalityMode::AV,
        }
    }

    #[allow(clippy::too_many_arguments)]
    fn epochs(
        &self,
        state: &mut TrainState,
        train: &mut Dataset,
        val: &mut Dataset,
        epochs: usize,
        stage: Option<u8>,
        frontend_lr: f64,
        log: &mut RunLog,
        on_epoch: &mut dyn FnMut(usize, f64, &TrainState) -> Result<()>,
    ) -> Result<()> {
        let bs = self.batch_size();
        let max_frames = self.max_frames();
        let n_batches = train.len().div_ceil(bs);
        let mut budget = self.cfg.max_steps.unwrap_or(usize::MAX);
        for _ in 0..epochs {
            if budget == 0 {
                break;
            }
            let epoch = state.schedule.epoch;
            let mut order: Vec<usize> = (0..train.len()).collect();
            for i in (1..order.len()).rev() {
                let j = (state.rng.next_u64() % (i as u64 + 1)) as usize;
                order.swap(i, j);
            }
            let (mut sum, mut count, mut lr) = (0.0, 0usize, 0.0);
            for (k, chunk) in order.chunks(bs).enumerate() {
                if budget == 0 {
                    break;
                }
                lr = state.schedule.schedule.lr_at(epoch as f64 + k as f64 / n_batches as f64);
                let mut rng = ChaCha8Rng::seed_from_u64(state.rng.next_u64());
                let batch = train.batch(chunk, true, Some(max_frames), &mut rng)?;
                let reports = match self.bundle.family() {
                    Family::Wave => {
                        let w = &self.cfg.wave_optim;
                        let sc = WaveStepConfig {
                            losses: self.wave_losses.as_ref().expect("wave losses"),
                            adam: w.adam(),
                            lr,
                            crop_len: (w.disc_crop_seconds * train.sample_rate as f64).round() as usize,
                            gan: self.cfg.gan,
                        };
                        train_step_wave(self.bundle, state, &batch, self.procedure, &sc)?
                    }
                    Family::Mel => {
                        let sc = MelStepConfig {
                            adam: self.cfg.mel_optim.adam(),
                            lr,
                            stage: stage.unwrap_or(1),
                            frontend_lr,
                        };
                        train_step_mel(self.bundle, state, &batch, self.procedure, &sc)?
                    }
                };
                sum += mean_loss(&reports);
                count += 1;
                budget -= 1;
            }
            let val_loss = validation_mel_l1(self.bundle, val, self.val_mode())?;
            state.val_history.push(val_loss);
            let entry = EpochLog {
                epoch,
                stage,
                lr,
                steps: state.schedule.step,
                train_loss: sum / count.max(1) as f64,
                val_mel_l1: val_loss,
            };
            log::info!(
                "epoch {epoch} stage {stage:?}: train {:.5} val mel-L1 {:.5} lr {lr:.3e}",
                entry.train_loss,
                val_loss
            );
            log.epochs.push(entry);
            state.schedule.epoch += 1;
            on_epoch(epoch, val_loss, state)?;
        }
        Ok(())
    }
}

fn deep_copy(bundle: &Bundle) -> Result<Vec<(String, Tensor)>> {
    bundle
        .store
        .iter()
        .map(|(n, v, _)| Ok((n.to_string(), v.as_tensor().copy()?)))
        .collect()
}

fn restore(bundle: &Bundle, snap: &[(String, Tensor)]) -> Result<()> {
    snap.iter().try_for_each(|(n, t)| bundle.store.set(n, t))
}

/// Trains `bundle` in place. V2A models and waveform-family AV2A models run
/// `cfg.epochs` epochs. Mel-family AV2A runs stage 1, picks the epoch with
/// the lowest validation loss inside the warmup, restores it and continues
/// the schedule from there in stage 2.
pub fn run_training(
    bundle: &Bundle,
    state: &mut TrainState,
    cfg: &TrainConfig,
    train: &mut Dataset,
    val: &mut Dataset,
    procedure: Option<TrainProcedure>,
) -> Result<RunLog> {
    cfg.validate()?;
    if train.is_empty() {
        return Err(Error::config("training set is empty"));
    }
    if bundle.variant == Variant::Av2a && procedure.is_none() {
        return Err(Error::config("audio-visual training needs a procedure"));
    }
    state.procedure = procedure;
    let wave_losses = match bundle.family() {
        Family::Wave => Some(WaveLosses::new(
            bundle.sample_rate(),
            &cfg.resolutions(bundle.sample_rate()),
            cfg.loss,
            candle_core::DType::F32,
            &candle_core::Device::Cpu,
        )?),
        Family::Mel => None,
    };
    let lp = Loop {
        bundle,
        cfg,
        procedure,
        wave_losses,
    };
    let mut log = RunLog::default();
    let mut none = |_: usize, _: f64, _: &TrainState| Ok(());
    match (bundle.family(), bundle.variant) {
        (Family::Wave, _) => {
            state.schedule.schedule = LrSchedule::Constant { lr: cfg.wave_optim.lr };
            lp.epochs(state, train, val, cfg.epochs, None, 0.0, &mut log, &mut none)?;
        }
        (Family::Mel, Variant::V2a) => {
            state.schedule.schedule = cfg.mel_optim.schedule(cfg.seen_speakers);
            lp.epochs(state, train, val, cfg.epochs, None, 0.0, &mut log, &mut none)?;
        }
        (Family::Mel, Variant::Av2a) => {
            let schedule = cfg.mel_optim.schedule(cfg.seen_speakers);
            state.schedule.schedule = schedule;
            state.stage = Some(1);
            let warmup = schedule.warmup_epochs();
            let start_epoch = state.schedule.epoch;
            let mut best: Option<(f64, Vec<(String, Tensor)>)> = None;
            let mut keep = |epoch: usize, val_loss: f64, _: &TrainState| -> Result<()> {
                if epoch - start_epoch < warmup && best.as_ref().is_none_or(|(b, _)| val_loss < *b) {
                    best = Some((val_loss, deep_copy(bundle)?));
                }
                Ok(())
            };
            lp.epochs(state, train, val, cfg.stage1_epochs, Some(1), 0.0, &mut log, &mut keep)?;
            let stage1 = &state.val_history[state.val_history.len() - log.epochs.len()..];
            let selected = start_epoch + select_checkpoint(stage1, warmup)?;
            let (_, snap) = best.expect("at least one stage-1 epoch");
            restore(bundle, &snap)?;
            state.selected_epoch = Some(selected);
            log.selected_epoch = Some(selected);
            log::info!("selected stage-1 epoch {selected}");
            if cfg.stage2_epochs > 0 {
                state.stage = Some(2);
                state.schedule.epoch = selected + 1;
                state.optimizers.insert(GENERATOR_OPT.to_string(), Adam::new(cfg.mel_optim.adam())?);
                let frontend = cfg.mel_optim.frontend_lr(cfg.seen_speakers);
                lp.epochs(state, train, val, cfg.stage2_epochs, Some(2), frontend, &mut log, &mut none)?;
            }
        }
    }
    Ok(log)
}
