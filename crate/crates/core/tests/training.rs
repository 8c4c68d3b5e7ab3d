use std::collections::BTreeMap;
use std::path::Path;

use avsynth::bootstrap::{synthesize_dataset, transplant};
use avsynth::data::{generate_synthetic_corpus, Manifest, SyntheticSpec};
use avsynth::models::{Family, Variant};
use avsynth::nn::{Kind, ModalityMode, SpeakerEncoder};
use avsynth::train::batch::tensor_hash;
use avsynth::train::bundle::submodule;
use avsynth::train::checkpoint::{load_checkpoint, save_checkpoint};
use avsynth::train::{
    branch_modules, run_training, train_branch_mel, train_step_mel, train_step_wave, Bundle, Dataset, LrSchedule, MelStepConfig,
    Needs, TrainConfig, TrainProcedure, TrainState, WaveStepConfig,
};
use avsynth::loss::WaveLosses;
use candle_core::{DType, Device};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn corpus(dir: &Path) -> Manifest {
    let spec = SyntheticSpec {
        speakers: 2,
        clips_per_speaker: 2,
        seconds: 0.32,
        seed: 5,
        sample_rate: 8000,
        ..SyntheticSpec::default()
    };
    generate_synthetic_corpus(&spec, &dir.join("data"), false).unwrap()
}

/// Corpus with synthesized inputs from an untrained V2A model of `family`.
fn bootstrapped(dir: &Path, family: Family, cfg: &TrainConfig) -> (Manifest, Bundle) {
    let m = corpus(dir);
    let v2a = Bundle::build(&cfg.model(family), Variant::V2a, 1).unwrap();
    let ckpt = dir.join(format!("{}-v2a", family.name()));
    save_checkpoint(&ckpt, &v2a, &TrainState::new(0, LrSchedule::Constant { lr: 1e-4 })).unwrap();
    let synth = synthesize_dataset(&ckpt, &m, &dir.join(format!("{}-synth", family.name())), 9).unwrap();
    (synth, v2a)
}

fn dataset(m: &Manifest, family: Family) -> Dataset {
    let rows: Vec<usize> = (0..m.rows.len()).collect();
    let needs = Needs { audio: true, synth: Some(family) };
    Dataset::load(m, &rows, 8000, needs, &SpeakerEncoder::stub()).unwrap()
}

fn param_bits(b: &Bundle) -> BTreeMap<String, Vec<u32>> {
    b.store
        .iter()
        .filter(|(_, _, k)| *k == Kind::Param)
        .map(|(n, v, _)| {
            let bits = avsynth::nn::flat_f32(v.as_tensor()).unwrap().iter().map(|x| x.to_bits()).collect();
            (n.to_string(), bits)
        })
        .collect()
}

fn changed(before: &BTreeMap<String, Vec<u32>>, after: &BTreeMap<String, Vec<u32>>) -> Vec<String> {
    before.iter().filter(|(n, v)| after[*n] != **v).map(|(n, _)| n.clone()).collect()
}

#[test]
fn synthesize_writes_one_artifact_per_row() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = TrainConfig::default();
    for family in [Family::Wave, Family::Mel] {
        let (synth, _) = bootstrapped(dir.path(), family, &cfg);
        assert_eq!(synth.rows.len(), 4);
        for r in &synth.rows {
            let p = synth.resolve(r.synth_audio_path.as_ref().unwrap());
            assert!(p.exists(), "{}", p.display());
            assert!(r.video_path.is_absolute());
        }
        let reloaded = Manifest::load(&dir.path().join(format!("{}-synth/manifest.jsonl", family.name()))).unwrap();
        assert_eq!(reloaded.rows, synth.rows);
        if family == Family::Mel {
            let mel = avsynth::data::read_mel(&synth.resolve(synth.rows[0].synth_audio_path.as_ref().unwrap()), 100.0)
                .unwrap();
            assert_eq!(mel.n_frames(), 1 + 8 * 320 / 100);
        }
        std::fs::remove_dir_all(dir.path().join("data")).unwrap();
    }
}

#[test]
fn synthesis_is_deterministic_and_reports_missing_video() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = TrainConfig::default();
    let m = corpus(dir.path());
    let v2a = Bundle::build(&cfg.model(Family::Wave), Variant::V2a, 1).unwrap();
    let ckpt = dir.path().join("ckpt");
    save_checkpoint(&ckpt, &v2a, &TrainState::new(0, LrSchedule::Constant { lr: 1e-4 })).unwrap();
    let a = synthesize_dataset(&ckpt, &m, &dir.path().join("a"), 3).unwrap();
    let b = synthesize_dataset(&ckpt, &m, &dir.path().join("b"), 3).unwrap();
    for (ra, rb) in a.rows.iter().zip(&b.rows) {
        let fa = std::fs::read(a.resolve(ra.synth_audio_path.as_ref().unwrap())).unwrap();
        let fb = std::fs::read(b.resolve(rb.synth_audio_path.as_ref().unwrap())).unwrap();
        assert_eq!(fa, fb);
    }
    std::fs::remove_file(m.resolve(&m.rows[1].video_path)).unwrap();
    let err = synthesize_dataset(&ckpt, &m, &dir.path().join("c"), 3).unwrap_err();
    let msg = err.to_string();
    assert!(msg.contains(&m.rows[1].id) && msg.contains("1 of 4 rows failed"), "{msg}");
}

#[test]
fn wave_branches_route_gradients() {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = TrainConfig::default();
    cfg.wave_optim.disc_crop_seconds = 0.1;
    let (m, v2a) = bootstrapped(dir.path(), Family::Wave, &cfg);
    let mut data = dataset(&m, Family::Wave);
    let av = transplant(&v2a, 2).unwrap();
    let losses = WaveLosses::new(8000, &cfg.resolutions(8000), cfg.loss, DType::F32, &Device::Cpu).unwrap();
    let sc = WaveStepConfig {
        losses: &losses,
        adam: cfg.wave_optim.adam(),
        lr: 1e-3,
        crop_len: 800,
        gan: true,
    };
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let batch = data.batch(&[0, 1], true, None, &mut rng).unwrap();
    let mut state = TrainState::new(4, LrSchedule::Constant { lr: 1e-3 });
    let reports = train_step_wave(&av, &mut state, &batch, Some(TrainProcedure::ModalityDropoutGt), &sc).unwrap();
    let modes: Vec<_> = reports.iter().map(|r| r.mode).collect();
    assert_eq!(modes, [ModalityMode::AV, ModalityMode::V, ModalityMode::A]);
    for r in &reports {
        let subs: std::collections::BTreeSet<_> = r.updated.iter().map(|n| submodule(n)).collect();
        let expected: std::collections::BTreeSet<_> = branch_modules(r.mode).iter().copied().collect();
        assert_eq!(subs, expected, "{:?}", r.mode);
        assert!(r.d_loss.is_some() && r.terms.is_some());
    }
    assert_eq!(reports[1].audio_input_hash, None);
    assert_eq!(reports[0].audio_input_hash.as_deref(), Some(&*tensor_hash(batch.synth_wave.as_ref().unwrap()).unwrap()));
    assert_eq!(reports[2].audio_input_hash.as_deref(), Some(&*tensor_hash(batch.audio.as_ref().unwrap()).unwrap()));
    let reports = train_step_wave(&av, &mut state, &batch, Some(TrainProcedure::ModalityDropout), &sc).unwrap();
    assert_eq!(reports[2].audio_input_hash, reports[0].audio_input_hash);
    let reports = train_step_wave(&av, &mut state, &batch, Some(TrainProcedure::Baseline), &sc).unwrap();
    assert_eq!(reports.len(), 1);
}

#[test]
fn mel_branch_steps_leave_masked_encoder_bit_identical() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = TrainConfig::default();
    let (m, v2a) = bootstrapped(dir.path(), Family::Mel, &cfg);
    let mut data = dataset(&m, Family::Mel);
    let av = transplant(&v2a, 2).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let batch = data.batch(&[0, 2], true, None, &mut rng).unwrap();
    let mut state = TrainState::new(4, LrSchedule::Constant { lr: 1e-3 });
    state.selected_epoch = Some(0);
    let stage2 = MelStepConfig {
        adam: cfg.mel_optim.adam(),
        lr: 1e-3,
        stage: 2,
        frontend_lr: 1e-4,
    };
    let reports = train_step_mel(&av, &mut state, &batch, Some(TrainProcedure::ModalityDropoutGt), &stage2).unwrap();
    for r in &reports {
        for n in &r.updated {
            assert!(branch_modules(r.mode).contains(&submodule(n)), "{:?} updated {n}", r.mode);
        }
    }
    assert!(reports[1].updated.iter().all(|n| submodule(n) != "audio_encoder"));
    assert!(reports[2].updated.iter().all(|n| submodule(n) != "video_encoder"));
    assert_eq!(reports[2].audio_input_hash.as_deref(), Some(&*tensor_hash(batch.target_mel.as_ref().unwrap()).unwrap()));

    let stage1 = MelStepConfig { stage: 1, ..stage2 };
    let before = param_bits(&av);
    train_step_mel(&av, &mut state, &batch, Some(TrainProcedure::ModalityDropout), &stage1).unwrap();
    let moved = changed(&before, &param_bits(&av));
    assert!(!moved.is_empty());
    for n in &moved {
        assert!(matches!(submodule(n), "audio_encoder" | "temporal"), "stage 1 moved {n}");
    }
    assert!(moved.iter().any(|n| submodule(n) == "audio_encoder"));

    let mut fresh = TrainState::new(4, LrSchedule::Constant { lr: 1e-3 });
    assert!(train_step_mel(&av, &mut fresh, &batch, Some(TrainProcedure::Baseline), &stage2).is_err());
}

#[test]
fn v_branch_alone_keeps_audio_encoder_bit_identical() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = TrainConfig::default();
    let (m, v2a) = bootstrapped(dir.path(), Family::Mel, &cfg);
    let mut data = dataset(&m, Family::Mel);
    let av = transplant(&v2a, 2).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let batch = data.batch(&[1, 3], false, None, &mut rng).unwrap();
    let sc = MelStepConfig {
        adam: cfg.mel_optim.adam(),
        lr: 1e-3,
        stage: 2,
        frontend_lr: 1e-3,
    };
    for (mode, frozen) in [(ModalityMode::V, "audio_encoder"), (ModalityMode::A, "video_encoder")] {
        let before = param_bits(&av);
        let mut state = TrainState::new(4, LrSchedule::Constant { lr: 1e-3 });
        state.selected_epoch = Some(0);
        train_branch_mel(&av, &mut state, &batch, mode, Some(TrainProcedure::ModalityDropout), &sc).unwrap();
        let moved = changed(&before, &param_bits(&av));
        assert!(moved.iter().all(|n| submodule(n) != frozen), "{mode:?} moved {frozen}");
        assert!(moved.iter().any(|n| submodule(n) == "decoder"));
    }
}

#[test]
fn mel_two_stage_run_is_deterministic_and_selects_within_warmup() {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = TrainConfig::default();
    cfg.stage1_epochs = 3;
    cfg.stage2_epochs = 2;
    cfg.mel_optim.warmup_epochs = 2;
    cfg.mel_optim.batch_size = 2;
    let (m, v2a) = bootstrapped(dir.path(), Family::Mel, &cfg);
    let run = || {
        let mut train = dataset(&m, Family::Mel);
        let mut val = dataset(&m, Family::Mel);
        let av = transplant(&v2a, 2).unwrap();
        let mut state = TrainState::new(7, LrSchedule::Constant { lr: 1.0 });
        let log = run_training(&av, &mut state, &cfg, &mut train, &mut val, Some(TrainProcedure::ModalityDropout))
            .unwrap();
        (log, param_bits(&av), state)
    };
    let (log_a, bits_a, state) = run();
    let (log_b, bits_b, _) = run();
    assert_eq!(log_a, log_b);
    assert_eq!(bits_a, bits_b);
    let sel = log_a.selected_epoch.unwrap();
    assert!(sel < 2);
    assert_eq!(log_a.epochs.len(), 5);
    assert_eq!(log_a.epochs[3].epoch, sel + 1);
    assert_eq!(state.stage, Some(2));

    let ckpt = dir.path().join("av");
    let av = transplant(&v2a, 2).unwrap();
    save_checkpoint(&ckpt, &av, &state).unwrap();
    let (back, st) = load_checkpoint(&ckpt).unwrap();
    assert_eq!(param_bits(&back), param_bits(&av));
    assert_eq!(st.val_history, state.val_history);
}

#[test]
fn wave_run_is_deterministic() {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = TrainConfig::default();
    cfg.epochs = 2;
    cfg.wave_optim.batch_size = 2;
    cfg.wave_optim.disc_crop_seconds = 0.1;
    let (m, _) = bootstrapped(dir.path(), Family::Wave, &cfg);
    let run = || {
        let mut train = dataset(&m, Family::Wave);
        let mut val = dataset(&m, Family::Wave);
        let v2a = Bundle::build(&cfg.model(Family::Wave), Variant::V2a, 1).unwrap();
        let mut state = TrainState::new(7, LrSchedule::Constant { lr: 1.0 });
        run_training(&v2a, &mut state, &cfg, &mut train, &mut val, None).unwrap()
    };
    let a = run();
    assert_eq!(a, run());
    assert_eq!(a.epochs.len(), 2);
    assert!(a.epochs.iter().all(|e| e.val_mel_l1.is_finite() && e.lr == 1e-4));
}
