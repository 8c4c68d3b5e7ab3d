use candle_core::DType;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::models::{
    Discriminator, DiscriminatorConfig, Family, MelGenerator, MelGeneratorConfig, Variant, WaveGenerator,
    WaveGeneratorConfig,
};
use crate::nn::ParamStore;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct WaveModelConfig {
    pub generator: WaveGeneratorConfig,
    pub discriminator: DiscriminatorConfig,
}

impl WaveModelConfig {
    pub fn tiny() -> Self {
        Self {
            generator: WaveGeneratorConfig::tiny(),
            discriminator: DiscriminatorConfig::tiny(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "family", rename_all = "snake_case")]
pub enum ModelConfig {
    Wave(WaveModelConfig),
    Mel(MelGeneratorConfig),
}

impl ModelConfig {
    pub fn family(&self) -> Family {
        match self {
            ModelConfig::Wave(_) => Family::Wave,
            ModelConfig::Mel(_) => Family::Mel,
        }
    }

    pub fn sample_rate(&self) -> u32 {
        match self {
            ModelConfig::Wave(w) => w.generator.sample_rate,
            ModelConfig::Mel(m) => m.sample_rate,
        }
    }
}

pub enum Generator {
    Wave(WaveGenerator),
    Mel(MelGenerator),
}

/// A generator (and for the wave family its discriminator) with the store
/// holding every named tensor. Top-level names are the submodules
/// `video_encoder`, `audio_encoder`, `temporal`, `decoder`, `discriminator`.
pub struct Bundle {
    pub model: ModelConfig,
    pub variant: Variant,
    pub init_seed: u64,
    pub store: ParamStore,
    pub gen: Generator,
    pub disc: Option<Discriminator>,
}

pub const SUBMODULES: [&str; 5] = ["video_encoder", "audio_encoder", "temporal", "decoder", "discriminator"];

pub fn submodule(name: &str) -> &str {
    name.split('.').next().unwrap_or(name)
}

impl Bundle {
    pub fn build(model: &ModelConfig, variant: Variant, seed: u64) -> Result<Self> {
        let mut store = ParamStore::new(DType::F32, seed);
        let (gen, disc) = match model {
            ModelConfig::Wave(w) => {
                let g = match variant {
                    Variant::V2a => WaveGenerator::v2a(&mut store.root(), &w.generator)?,
                    Variant::Av2a => WaveGenerator::av2a(&mut store.root(), &w.generator)?,
                };
                let d = Discriminator::new(&mut store.root().sub("discriminator"), &w.discriminator)?;
                (Generator::Wave(g), Some(d))
            }
            ModelConfig::Mel(m) => {
                let g = match variant {
                    Variant::V2a => MelGenerator::v2a(&mut store.root(), m)?,
                    Variant::Av2a => MelGenerator::av2a(&mut store.root(), m)?,
                };
                (Generator::Mel(g), None)
            }
        };
        Ok(Self {
            model: model.clone(),
            variant,
            init_seed: seed,
            store,
            gen,
            disc,
        })
    }

    pub fn family(&self) -> Family {
        self.model.family()
    }

    pub fn sample_rate(&self) -> u32 {
        self.model.sample_rate()
    }

    pub fn wave(&self) -> Result<&WaveGenerator> {
        match &self.gen {
            Generator::Wave(g) => Ok(g),
            Generator::Mel(_) => Err(Error::config("expected a waveform-family model")),
        }
    }

    pub fn mel(&self) -> Result<&MelGenerator> {
        match &self.gen {
            Generator::Mel(g) => Ok(g),
            Generator::Wave(_) => Err(Error::config("expected a mel-family model")),
        }
    }

    /// Parameter names belonging to the given submodules.
    pub fn names_in(&self, subs: &[&str]) -> Vec<String> {
        self.store
            .names()
            .into_iter()
            .filter(|n| subs.contains(&submodule(n)))
            .collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn submodule_layout() {
        let b = Bundle::build(&ModelConfig::Wave(WaveModelConfig::tiny()), Variant::Av2a, 0).unwrap();
        for n in b.store.names() {
            assert!(SUBMODULES.contains(&submodule(&n)), "{n}");
        }
        for s in SUBMODULES {
            assert!(!b.names_in(&[s]).is_empty(), "{s}");
        }
        let m = Bundle::build(&ModelConfig::Mel(MelGeneratorConfig::tiny()), Variant::V2a, 0).unwrap();
        assert!(m.names_in(&["audio_encoder", "discriminator"]).is_empty());
        let json = serde_json::to_string(&ModelConfig::Mel(MelGeneratorConfig::tiny())).unwrap();
        assert!(json.starts_with("{\"family\":\"mel\""));
        let back: ModelConfig = serde_json::from_str(&json).unwrap();
        assert_eq!(back.family(), Family::Mel);
        assert!(serde_json::from_str::<ModelConfig>(&json.replace("\"fps\"", "\"fpz\"")).is_err());
    }
}
