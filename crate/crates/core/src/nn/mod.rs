//! Differentiable building blocks on top of candle tensors.

pub mod conformer;
pub mod gradcheck;
pub mod layers;
pub mod params;
pub mod speaker;
pub mod video_encoder;

pub use conformer::{ConformerBlock, ConformerConfig};
pub use layers::{BatchNorm, StatSets};
pub use params::{flat_f32, flat_f64, Ctx, Kind, ModalityMode, ParamStore, Scope};
pub use speaker::{SpeakerEmbedding, SpeakerEncoder, SpeakerEncoderSpec, SPEAKER_DIM};
pub use video_encoder::VideoEncoder;
