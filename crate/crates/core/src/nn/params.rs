use std::collections::BTreeMap;

use candle_core::{DType, Device, Tensor, Var};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Bernoulli, Distribution};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum ModalityMode {
    #[serde(rename = "av")]
    AV,
    #[serde(rename = "v")]
    V,
    #[serde(rename = "a")]
    A,
}

impl ModalityMode {
    pub const ALL: [ModalityMode; 3] = [ModalityMode::AV, ModalityMode::V, ModalityMode::A];

    pub fn index(self) -> usize {
        match self {
            ModalityMode::AV => 0,
            ModalityMode::V => 1,
            ModalityMode::A => 2,
        }
    }

    pub fn suffix(self) -> &'static str {
        match self {
            ModalityMode::AV => "av",
            ModalityMode::V => "v",
            ModalityMode::A => "a",
        }
    }

    pub fn uses_audio(self) -> bool {
        self != ModalityMode::V
    }

    pub fn uses_video(self) -> bool {
        self != ModalityMode::A
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Kind {
    Param,
    Buffer,
}

/// Named tensors of one model. Layers keep clones of the `Var` handles, so
/// writing through the store (loading, transplanting, optimizer steps)
/// updates the layers in place.
pub struct ParamStore {
    entries: BTreeMap<String, (Var, Kind)>,
    dtype: DType,
    device: Device,
    rng: ChaCha8Rng,
}

impl ParamStore {
    pub fn new(dtype: DType, seed: u64) -> Self {
        Self {
            entries: BTreeMap::new(),
            dtype,
            device: Device::Cpu,
            rng: ChaCha8Rng::seed_from_u64(seed),
        }
    }

    pub fn dtype(&self) -> DType {
        self.dtype
    }

    pub fn device(&self) -> &Device {
        &self.device
    }

    pub fn root(&mut self) -> Scope<'_> {
        Scope {
            store: self,
            prefix: String::new(),
        }
    }

    pub fn get(&self, name: &str) -> Option<&Var> {
        self.entries.get(name).map(|(v, _)| v)
    }

    pub fn kind(&self, name: &str) -> Option<Kind> {
        self.entries.get(name).map(|(_, k)| *k)
    }

    /// All entries in name order.
    pub fn iter(&self) -> impl Iterator<Item = (&str, &Var, Kind)> {
        self.entries.iter().map(|(n, (v, k))| (n.as_str(), v, *k))
    }

    /// Trainable parameters in name order.
    pub fn params(&self) -> impl Iterator<Item = (&str, &Var)> {
        self.iter()
            .filter(|(_, _, k)| *k == Kind::Param)
            .map(|(n, v, _)| (n, v))
    }

    pub fn names(&self) -> Vec<String> {
        self.entries.keys().cloned().collect()
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Overwrites an entry, converting to the store dtype.
    pub fn set(&self, name: &str, value: &Tensor) -> Result<()> {
        let var = self
            .get(name)
            .ok_or_else(|| Error::shape(format!("no tensor named {name}")))?;
        if var.dims() != value.dims() {
            return Err(Error::shape(format!(
                "{name}: expected {:?}, got {:?}",
                var.dims(),
                value.dims()
            )));
        }
        var.set(&value.to_dtype(self.dtype)?.contiguous()?)?;
        Ok(())
    }

    /// Values of every entry as f32 vectors, for snapshot comparisons.
    pub fn snapshot(&self) -> Result<BTreeMap<String, Vec<f32>>> {
        self.entries
            .iter()
            .map(|(n, (v, _))| Ok((n.clone(), flat_f32(v.as_tensor())?)))
            .collect()
    }

    fn insert(&mut self, name: String, t: Tensor, kind: Kind) -> Result<Var> {
        if self.entries.contains_key(&name) {
            return Err(Error::shape(format!("duplicate tensor name {name}")));
        }
        let var = Var::from_tensor(&t.to_dtype(self.dtype)?)?;
        self.entries.insert(name, (var.clone(), kind));
        Ok(var)
    }
}

pub fn flat_f32(t: &Tensor) -> Result<Vec<f32>> {
    Ok(t.flatten_all()?.to_dtype(DType::F32)?.to_vec1::<f32>()?)
}

pub fn flat_f64(t: &Tensor) -> Result<Vec<f64>> {
    Ok(t.flatten_all()?.to_dtype(DType::F64)?.to_vec1::<f64>()?)
}

/// A name prefix into a [`ParamStore`] used while building layers.
pub struct Scope<'a> {
    store: &'a mut ParamStore,
    prefix: String,
}

impl<'a> Scope<'a> {
    pub fn sub(&mut self, name: &str) -> Scope<'_> {
        let prefix = if self.prefix.is_empty() {
            name.to_string()
        } else {
            format!("{}.{}", self.prefix, name)
        };
        Scope {
            store: self.store,
            prefix,
        }
    }

    pub fn path(&self, name: &str) -> String {
        if self.prefix.is_empty() {
            name.to_string()
        } else {
            format!("{}.{}", self.prefix, name)
        }
    }

    pub fn dtype(&self) -> DType {
        self.store.dtype
    }

    pub fn tensor(&self, data: Vec<f64>, shape: &[usize]) -> Result<Tensor> {
        Ok(Tensor::from_vec(data, shape, &self.store.device)?.to_dtype(self.store.dtype)?)
    }

    pub fn from_values(&mut self, name: &str, shape: &[usize], data: Vec<f64>, kind: Kind) -> Result<Var> {
        let t = Tensor::from_vec(data, shape, &self.store.device)?;
        let path = self.path(name);
        self.store.insert(path, t, kind)
    }

    /// Parameter drawn from U(-bound, bound).
    pub fn uniform(&mut self, name: &str, shape: &[usize], bound: f64) -> Result<Var> {
        let n: usize = shape.iter().product();
        let data: Vec<f64> = (0..n)
            .map(|_| self.store.rng.random_range(-bound..=bound))
            .collect();
        self.from_values(name, shape, data, Kind::Param)
    }

    /// Parameter drawn from N(0, std^2).
    pub fn normal(&mut self, name: &str, shape: &[usize], std: f64) -> Result<Var> {
        let n: usize = shape.iter().product();
        let dist = rand_distr::Normal::new(0.0, std).map_err(|e| Error::config(e.to_string()))?;
        let data: Vec<f64> = (0..n).map(|_| dist.sample(&mut self.store.rng)).collect();
        self.from_values(name, shape, data, Kind::Param)
    }

    pub fn constant(&mut self, name: &str, shape: &[usize], value: f64, kind: Kind) -> Result<Var> {
        let n: usize = shape.iter().product();
        self.from_values(name, shape, vec![value; n], kind)
    }
}

/// Per-forward state: train/eval switch, active modality, dropout RNG.
pub struct Ctx {
    pub training: bool,
    pub mode: ModalityMode,
    /// Cut the graph after the video encoder when it is not being trained.
    pub frozen_video: bool,
    rng: ChaCha8Rng,
}

impl Ctx {
    pub fn train(mode: ModalityMode, seed: u64) -> Self {
        Self {
            training: true,
            mode,
            frozen_video: false,
            rng: ChaCha8Rng::seed_from_u64(seed),
        }
    }

    pub fn eval(mode: ModalityMode) -> Self {
        Self {
            training: false,
            mode,
            frozen_video: false,
            rng: ChaCha8Rng::seed_from_u64(0),
        }
    }

    pub fn rng(&mut self) -> &mut ChaCha8Rng {
        &mut self.rng
    }

    /// Inverted dropout; identity in eval mode or when `p == 0`.
    pub fn dropout(&mut self, x: &Tensor, p: f64) -> Result<Tensor> {
        if !self.training || p <= 0.0 {
            return Ok(x.clone());
        }
        let keep = Bernoulli::new(1.0 - p).map_err(|e| Error::config(e.to_string()))?;
        let scale = 1.0 / (1.0 - p);
        let mask: Vec<f64> = (0..x.elem_count())
            .map(|_| if keep.sample(&mut self.rng) { scale } else { 0.0 })
            .collect();
        let mask = Tensor::from_vec(mask, x.dims(), x.device())?.to_dtype(x.dtype())?;
        Ok(x.mul(&mask)?)
    }
}
