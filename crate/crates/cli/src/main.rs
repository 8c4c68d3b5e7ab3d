use std::path::{Path, PathBuf};
use std::process::ExitCode;

use avsynth::bootstrap::{build_av2a_from_v2a, synthesize_dataset};
use avsynth::data::{generate_synthetic_corpus, Manifest, Split, SyntheticSpec};
use avsynth::eval::evaluate_checkpoint;
use avsynth::models::{Family, Variant, Vocoder};
use avsynth::nn::SpeakerEncoder;
use avsynth::train::checkpoint::{config_digest, read_meta};
use avsynth::train::{
    run_training, save_checkpoint, Bundle, Dataset, LrSchedule, ModelConfig, Needs, RunLog, TrainConfig, TrainProcedure,
    TrainState,
};
use avsynth::{Error, ErrorKind, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::Serialize;

#[derive(Parser)]
#[command(name = "avsynth", version, about = "Video-to-speech synthesis with self-synthesized audio inputs")]
struct Cli {
    /// Worker threads for tensor kernels. Results are bit-reproducible at 1.
    #[arg(long, global = true, default_value_t = 1)]
    threads: usize,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic paired video/audio corpus.
    MakeData {
        #[arg(long, default_value_t = 4)]
        speakers: usize,
        #[arg(long, default_value_t = 5)]
        clips: usize,
        #[arg(long, default_value_t = 1.0)]
        seconds: f64,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = 24_000)]
        sample_rate: u32,
        /// Replace a non-empty output directory.
        #[arg(long)]
        overwrite: bool,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train a video-only model.
    TrainV2a {
        #[arg(long)]
        family: FamilyArg,
        #[command(flatten)]
        train: TrainArgs,
    },
    /// Run a V2A checkpoint over a manifest and write its outputs.
    Synthesize {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Build an audio-visual model from a V2A checkpoint and train it.
    TrainAv2a {
        #[arg(long)]
        from_v2a: PathBuf,
        #[arg(long)]
        procedure: ProcedureArg,
        #[command(flatten)]
        train: TrainArgs,
    },
    /// Score a checkpoint against ground-truth audio.
    Evaluate {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long, value_enum, default_value_t = VocoderArg::GriffinLim)]
        vocoder: VocoderArg,
        /// Command for `--vocoder external`; receives the mel and WAV paths.
        #[arg(long)]
        vocoder_cmd: Option<String>,
        /// Command receiving a WAV path and printing its transcript.
        #[arg(long)]
        transcriber: Option<String>,
        #[arg(long, value_enum, default_value_t = SplitArg::Test)]
        split: SplitArg,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        report: PathBuf,
    },
    /// Print named tensors, shapes and the config digest of a checkpoint.
    Inspect {
        #[arg(long)]
        checkpoint: PathBuf,
        /// Accepted for uniformity; inspection is deterministic.
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
}

#[derive(Args)]
struct TrainArgs {
    /// JSON training config; unknown keys are rejected.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    out: PathBuf,
    /// Overrides `init_seed`.
    #[arg(long)]
    seed: Option<u64>,
    /// Overrides `epochs`.
    #[arg(long)]
    epochs: Option<usize>,
    /// Overrides `max_steps`.
    #[arg(long)]
    max_steps: Option<usize>,
}

#[derive(Clone, Copy, ValueEnum)]
enum FamilyArg {
    Wave,
    Mel,
}

impl From<FamilyArg> for Family {
    fn from(f: FamilyArg) -> Self {
        match f {
            FamilyArg::Wave => Family::Wave,
            FamilyArg::Mel => Family::Mel,
        }
    }
}

#[derive(Clone, Copy, ValueEnum)]
enum ProcedureArg {
    Baseline,
    Mdrop,
    MdropGt,
}

impl From<ProcedureArg> for TrainProcedure {
    fn from(p: ProcedureArg) -> Self {
        match p {
            ProcedureArg::Baseline => TrainProcedure::Baseline,
            ProcedureArg::Mdrop => TrainProcedure::ModalityDropout,
            ProcedureArg::MdropGt => TrainProcedure::ModalityDropoutGt,
        }
    }
}

#[derive(Clone, Copy, PartialEq, ValueEnum)]
enum VocoderArg {
    GriffinLim,
    External,
}

#[derive(Clone, Copy, ValueEnum)]
enum SplitArg {
    Train,
    Val,
    Test,
    All,
}

impl SplitArg {
    fn split(self) -> Option<Split> {
        match self {
            SplitArg::Train => Some(Split::Train),
            SplitArg::Val => Some(Split::Val),
            SplitArg::Test => Some(Split::Test),
            SplitArg::All => None,
        }
    }
}

fn write_json(path: &Path, value: &impl Serialize) -> Result<()> {
    if let Some(p) = path.parent() {
        std::fs::create_dir_all(p)?;
    }
    std::fs::write(path, serde_json::to_string_pretty(value)? + "\n")?;
    Ok(())
}

/// A checkpoint directory, or a run directory holding one in `checkpoint/`.
fn checkpoint_dir(p: &Path) -> PathBuf {
    let inner = p.join("checkpoint");
    if !p.join("meta.json").exists() && inner.join("meta.json").exists() {
        inner
    } else {
        p.to_path_buf()
    }
}

fn load_config(args: &TrainArgs) -> Result<TrainConfig> {
    let mut cfg = match &args.config {
        Some(p) => {
            let text = std::fs::read_to_string(p).map_err(|e| Error::config(format!("{}: {e}", p.display())))?;
            TrainConfig::from_json(&text)?
        }
        None => TrainConfig::default(),
    };
    if let Some(s) = args.seed {
        cfg.init_seed = s;
    }
    if let Some(e) = args.epochs {
        cfg.epochs = e;
    }
    if args.max_steps.is_some() {
        cfg.max_steps = args.max_steps;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn load_manifest(p: &Path) -> Result<Manifest> {
    Manifest::load(p)
}

/// Training and validation rows. Without validation rows the training rows
/// are scored instead.
fn split_rows(m: &Manifest) -> Result<(Vec<usize>, Vec<usize>)> {
    let train = m.split(Split::Train);
    if train.is_empty() {
        return Err(Error::data(&m.base_dir, "manifest has no training rows"));
    }
    let val = m.split(Split::Val);
    if val.is_empty() {
        log::warn!("no validation rows; validating on the training rows");
        return Ok((train.clone(), train));
    }
    Ok((train, val))
}

fn train(
    bundle: &Bundle,
    mut state: TrainState,
    cfg: &TrainConfig,
    manifest: &Manifest,
    needs: Needs,
    procedure: Option<TrainProcedure>,
    out: &Path,
) -> Result<()> {
    let speaker = SpeakerEncoder::from_spec(&cfg.speaker_encoder)?;
    let (train_rows, val_rows) = split_rows(manifest)?;
    let sr = bundle.sample_rate();
    let mut train_set = Dataset::load(manifest, &train_rows, sr, needs, &speaker)?;
    let mut val_set = Dataset::load(manifest, &val_rows, sr, needs, &speaker)?;
    state.train_config = serde_json::to_value(cfg)?;
    state.speaker_encoder_id = speaker.id().to_string();
    std::fs::create_dir_all(out)?;
    write_json(&out.join("config.json"), cfg)?;
    let log: RunLog = run_training(bundle, &mut state, cfg, &mut train_set, &mut val_set, procedure)?;
    write_json(&out.join("train_log.json"), &log)?;
    save_checkpoint(&out.join("checkpoint"), bundle, &state)
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::MakeData {
            speakers,
            clips,
            seconds,
            seed,
            sample_rate,
            overwrite,
            out,
        } => {
            let spec = SyntheticSpec {
                speakers,
                clips_per_speaker: clips,
                seconds,
                seed,
                sample_rate,
                ..SyntheticSpec::default()
            };
            let m = generate_synthetic_corpus(&spec, &out, overwrite)?;
            write_json(&out.join("config.json"), &spec)?;
            log::info!("wrote {} clips to {}", m.rows.len(), out.display());
        }
        Command::TrainV2a { family, train: args } => {
            let cfg = load_config(&args)?;
            let manifest = load_manifest(&args.data)?;
            manifest.require_all("audio_path")?;
            let bundle = Bundle::build(&cfg.model(family.into()), Variant::V2a, cfg.init_seed)?;
            let state = TrainState::new(cfg.init_seed, LrSchedule::Constant { lr: cfg.wave_optim.lr });
            let needs = Needs { audio: true, synth: None };
            train(&bundle, state, &cfg, &manifest, needs, None, &args.out)?;
        }
        Command::Synthesize { checkpoint, data, seed, out } => {
            let manifest = load_manifest(&data)?;
            let ckpt = checkpoint_dir(&checkpoint);
            synthesize_dataset(&ckpt, &manifest, &out, seed)?;
            let echo = serde_json::json!({
                "checkpoint": ckpt.canonicalize()?,
                "data": data,
                "seed": seed,
            });
            write_json(&out.join("config.json"), &echo)?;
        }
        Command::TrainAv2a {
            from_v2a,
            procedure,
            train: args,
        } => {
            let procedure = TrainProcedure::from(procedure);
            let mut cfg = load_config(&args)?;
            let manifest = load_manifest(&args.data)?;
            manifest.require_all("synth_audio_path")?;
            if procedure.gt_audio() {
                manifest.require_all("audio_path")?;
            }
            let (bundle, v2a_state) = build_av2a_from_v2a(&checkpoint_dir(&from_v2a), None, cfg.init_seed)?;
            // The architecture is fixed by the source model.
            match &bundle.model {
                ModelConfig::Wave(w) => cfg.wave = w.clone(),
                ModelConfig::Mel(m) => cfg.mel = m.clone(),
            }
            if args.config.is_none() {
                // Same speaker encoder as the model that synthesized the inputs.
                if let Some(v) = v2a_state.train_config.get("speaker_encoder") {
                    cfg.speaker_encoder = serde_json::from_value(v.clone())?;
                }
            }
            let state = TrainState::new(cfg.init_seed, LrSchedule::Constant { lr: cfg.wave_optim.lr });
            let needs = Needs {
                audio: true,
                synth: Some(bundle.family()),
            };
            train(&bundle, state, &cfg, &manifest, needs, Some(procedure), &args.out)?;
        }
        Command::Evaluate {
            checkpoint,
            data,
            vocoder,
            vocoder_cmd,
            transcriber,
            split,
            seed,
            report,
        } => {
            let voc = match (vocoder, &vocoder_cmd) {
                (VocoderArg::GriffinLim, _) => Vocoder::griffin_lim(),
                (VocoderArg::External, Some(cmd)) => Vocoder::external(cmd.clone()),
                (VocoderArg::External, None) => return Err(Error::config("--vocoder external needs --vocoder-cmd")),
            };
            let manifest = load_manifest(&data)?;
            let r = evaluate_checkpoint(
                &checkpoint_dir(&checkpoint),
                &manifest,
                split.split(),
                &voc,
                transcriber.as_deref(),
                seed,
            )?;
            r.write(&report)?;
        }
        Command::Inspect { checkpoint, .. } => {
            let meta = read_meta(&checkpoint_dir(&checkpoint))?;
            let digest = config_digest(&meta.model, &meta.train_config)?;
            println!("variant\t{}", meta.variant.name());
            println!("family\t{}", meta.model.family().name());
            println!("config_digest\t{digest}");
            for (name, dims) in &meta.tensors {
                let shape: Vec<String> = dims.iter().map(|d| d.to_string()).collect();
                println!("{name}\t[{}]", shape.join(", "));
            }
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    let threads = cli.threads.max(1).to_string();
    std::env::set_var("RAYON_NUM_THREADS", &threads);
    std::env::set_var("CANDLE_NUM_THREADS", &threads);
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            let (code, kind) = match e.kind() {
                ErrorKind::Config => (2, "config"),
                ErrorKind::Data => (3, "data"),
                ErrorKind::Runtime => (4, "runtime"),
            };
            let msg = e.to_string().replace('\n', " ");
            eprintln!("error[{kind}]: {msg}");
            ExitCode::from(code)
        }
    }
}
