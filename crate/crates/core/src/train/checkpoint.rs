use std::collections::BTreeMap;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use candle_core::{Device, Tensor};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::bundle::{submodule, Bundle, ModelConfig};
use super::config::TrainProcedure;
use super::optim::{Adam, AdamConfig, Moments};
use super::schedule::LrSchedule;
use crate::error::{Error, Result};
use crate::models::Variant;
use crate::nn::flat_f32;

/// Writes `data` with a header of little-endian u32 rank followed by the
/// u32 dimensions, then the f32 payload.
pub fn write_tensor_file(path: &Path, dims: &[usize], data: &[f32]) -> Result<()> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir)?;
    }
    let mut buf = Vec::with_capacity(4 * (1 + dims.len() + data.len()));
    buf.extend_from_slice(&(dims.len() as u32).to_le_bytes());
    for &d in dims {
        buf.extend_from_slice(&(d as u32).to_le_bytes());
    }
    for v in data {
        buf.extend_from_slice(&v.to_le_bytes());
    }
    fs::File::create(path)?.write_all(&buf)?;
    Ok(())
}

pub fn read_tensor_file(path: &Path) -> Result<(Vec<usize>, Vec<f32>)> {
    let bytes = fs::read(path).map_err(|e| Error::data(path, e.to_string()))?;
    parse_tensor(&bytes).map_err(|e| match e {
        Error::Parse { offset, msg, .. } => Error::data(path, format!("at byte {offset}: {msg}")),
        other => other,
    })
}

fn u32_at(bytes: &[u8], offset: usize) -> Result<u32> {
    bytes
        .get(offset..offset + 4)
        .map(|b| u32::from_le_bytes(b.try_into().expect("4 bytes")))
        .ok_or_else(|| Error::Parse {
            what: "tensor file",
            offset: bytes.len() as u64,
            msg: format!("truncated header, missing {} bytes", offset + 4 - bytes.len()),
        })
}

pub fn parse_tensor(bytes: &[u8]) -> Result<(Vec<usize>, Vec<f32>)> {
    let rank = u32_at(bytes, 0)? as usize;
    let dims: Vec<usize> = (0..rank)
        .map(|i| u32_at(bytes, 4 + 4 * i).map(|d| d as usize))
        .collect::<Result<_>>()?;
    let start = 4 + 4 * rank;
    let n: usize = dims.iter().product();
    let need = start + 4 * n;
    if bytes.len() != need {
        return Err(Error::Parse {
            what: "tensor file",
            offset: bytes.len().min(need) as u64,
            msg: if bytes.len() < need {
                format!("truncated payload, missing {} bytes", need - bytes.len())
            } else {
                format!("{} trailing bytes", bytes.len() - need)
            },
        });
    }
    let data = bytes[start..]
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
        .collect();
    Ok((dims, data))
}

pub const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OptimizerMeta {
    pub config: AdamConfig,
    pub steps: BTreeMap<String, u64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScheduleState {
    pub epoch: usize,
    pub step: u64,
    pub schedule: LrSchedule,
}

/// Contents of `meta.json`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CheckpointMeta {
    pub format_version: u32,
    pub variant: Variant,
    pub model: ModelConfig,
    pub init_seed: u64,
    pub config_digest: String,
    pub train_config: serde_json::Value,
    pub procedure: Option<TrainProcedure>,
    pub stage: Option<u8>,
    pub schedule: ScheduleState,
    pub optimizers: BTreeMap<String, OptimizerMeta>,
    /// ChaCha8 seed, stream and word position, hex encoded.
    pub rng: String,
    pub val_history: Vec<f64>,
    pub selected_epoch: Option<usize>,
    pub speaker_encoder_id: String,
    pub tensors: BTreeMap<String, Vec<usize>>,
}

/// Mutable training state saved alongside the weights.
pub struct TrainState {
    pub optimizers: BTreeMap<String, Adam>,
    pub rng: ChaCha8Rng,
    pub schedule: ScheduleState,
    pub val_history: Vec<f64>,
    pub selected_epoch: Option<usize>,
    pub stage: Option<u8>,
    pub procedure: Option<TrainProcedure>,
    pub train_config: serde_json::Value,
    pub speaker_encoder_id: String,
}

impl TrainState {
    pub fn new(seed: u64, schedule: LrSchedule) -> Self {
        Self {
            optimizers: BTreeMap::new(),
            rng: ChaCha8Rng::seed_from_u64(seed),
            schedule: ScheduleState {
                epoch: 0,
                step: 0,
                schedule,
            },
            val_history: Vec::new(),
            selected_epoch: None,
            stage: None,
            procedure: None,
            train_config: serde_json::Value::Null,
            speaker_encoder_id: "stub".into(),
        }
    }
}

pub fn rng_to_hex(rng: &ChaCha8Rng) -> String {
    let mut b = rng.get_seed().to_vec();
    b.extend_from_slice(&rng.get_stream().to_le_bytes());
    b.extend_from_slice(&rng.get_word_pos().to_le_bytes());
    hex::encode(b)
}

pub fn rng_from_hex(s: &str) -> Result<ChaCha8Rng> {
    let b = hex::decode(s).map_err(|e| Error::config(format!("rng state: {e}")))?;
    if b.len() != 32 + 8 + 16 {
        return Err(Error::config(format!("rng state has {} bytes, expected 56", b.len())));
    }
    let mut rng = ChaCha8Rng::from_seed(b[..32].try_into().expect("32 bytes"));
    rng.set_stream(u64::from_le_bytes(b[32..40].try_into().expect("8 bytes")));
    rng.set_word_pos(u128::from_le_bytes(b[40..56].try_into().expect("16 bytes")));
    Ok(rng)
}

/// SHA-256 of the model and training configuration JSON.
pub fn config_digest(model: &ModelConfig, train: &serde_json::Value) -> Result<String> {
    let text = serde_json::to_string(&(model, train))?;
    Ok(hex::encode(Sha256::digest(text.as_bytes())))
}

fn tensor_path(dir: &Path, name: &str) -> PathBuf {
    let sub = submodule(name);
    let rest = name.strip_prefix(sub).and_then(|r| r.strip_prefix('.')).unwrap_or(name);
    dir.join(sub).join(format!("{rest}.f32"))
}

fn moment_path(dir: &Path, opt: &str, name: &str, which: &str) -> PathBuf {
    dir.join("optim").join(opt).join(format!("{name}.{which}.f32"))
}

fn save_tensor(path: &Path, t: &Tensor) -> Result<()> {
    write_tensor_file(path, t.dims(), &flat_f32(t)?)
}

fn load_tensor(path: &Path) -> Result<Tensor> {
    let (dims, data) = read_tensor_file(path)?;
    Ok(Tensor::from_vec(data, dims.as_slice(), &Device::Cpu)?)
}

/// Writes `meta.json` plus one tensor file per named tensor and optimizer
/// moment. An existing checkpoint directory is replaced.
pub fn save_checkpoint(dir: &Path, bundle: &Bundle, state: &TrainState) -> Result<()> {
    if dir.exists() {
        fs::remove_dir_all(dir)?;
    }
    fs::create_dir_all(dir)?;
    let mut tensors = BTreeMap::new();
    for (name, var, _) in bundle.store.iter() {
        save_tensor(&tensor_path(dir, name), var.as_tensor())?;
        tensors.insert(name.to_string(), var.dims().to_vec());
    }
    let mut optimizers = BTreeMap::new();
    for (opt_name, opt) in &state.optimizers {
        let mut steps = BTreeMap::new();
        for (name, m) in &opt.state {
            save_tensor(&moment_path(dir, opt_name, name, "m"), &m.m)?;
            save_tensor(&moment_path(dir, opt_name, name, "v"), &m.v)?;
            steps.insert(name.clone(), m.step);
        }
        optimizers.insert(opt_name.clone(), OptimizerMeta { config: opt.cfg, steps });
    }
    let meta = CheckpointMeta {
        format_version: FORMAT_VERSION,
        variant: bundle.variant,
        model: bundle.model.clone(),
        init_seed: bundle.init_seed,
        config_digest: config_digest(&bundle.model, &state.train_config)?,
        train_config: state.train_config.clone(),
        procedure: state.procedure,
        stage: state.stage,
        schedule: state.schedule.clone(),
        optimizers,
        rng: rng_to_hex(&state.rng),
        val_history: state.val_history.clone(),
        selected_epoch: state.selected_epoch,
        speaker_encoder_id: state.speaker_encoder_id.clone(),
        tensors,
    };
    let mut text = serde_json::to_string_pretty(&meta)?;
    text.push('\n');
    fs::write(dir.join("meta.json"), text)?;
    Ok(())
}

pub fn read_meta(dir: &Path) -> Result<CheckpointMeta> {
    let p = dir.join("meta.json");
    let text = fs::read_to_string(&p).map_err(|e| Error::data(&p, e.to_string()))?;
    let meta: CheckpointMeta = serde_json::from_str(&text).map_err(|e| Error::data(&p, e.to_string()))?;
    if meta.format_version != FORMAT_VERSION {
        return Err(Error::data(&p, format!("unsupported checkpoint version {}", meta.format_version)));
    }
    Ok(meta)
}

/// Rebuilds the model from `meta.json` and loads every tensor and the
/// training state.
pub fn load_checkpoint(dir: &Path) -> Result<(Bundle, TrainState)> {
    let meta = read_meta(dir)?;
    let bundle = Bundle::build(&meta.model, meta.variant, meta.init_seed)?;
    let expected: BTreeMap<String, Vec<usize>> = bundle
        .store
        .iter()
        .map(|(n, v, _)| (n.to_string(), v.dims().to_vec()))
        .collect();
    if expected != meta.tensors {
        let missing: Vec<_> = expected.keys().filter(|k| !meta.tensors.contains_key(*k)).collect();
        let extra: Vec<_> = meta.tensors.keys().filter(|k| !expected.contains_key(*k)).collect();
        return Err(Error::data(
            dir,
            format!("tensor list does not match the model (missing {missing:?}, unexpected {extra:?}, or shape change)"),
        ));
    }
    for name in expected.keys() {
        bundle.store.set(name, &load_tensor(&tensor_path(dir, name))?)?;
    }
    let mut optimizers = BTreeMap::new();
    for (opt_name, om) in &meta.optimizers {
        let mut opt = Adam::new(om.config)?;
        for (name, &step) in &om.steps {
            let m = load_tensor(&moment_path(dir, opt_name, name, "m"))?;
            let v = load_tensor(&moment_path(dir, opt_name, name, "v"))?;
            opt.state.insert(name.clone(), Moments { m, v, step });
        }
        optimizers.insert(opt_name.clone(), opt);
    }
    let state = TrainState {
        optimizers,
        rng: rng_from_hex(&meta.rng)?,
        schedule: meta.schedule.clone(),
        val_history: meta.val_history.clone(),
        selected_epoch: meta.selected_epoch,
        stage: meta.stage,
        procedure: meta.procedure,
        train_config: meta.train_config.clone(),
        speaker_encoder_id: meta.speaker_encoder_id.clone(),
    };
    Ok((bundle, state))
}
