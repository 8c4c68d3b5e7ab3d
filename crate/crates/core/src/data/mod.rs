//! Clip formats, manifests, pre-processing and the synthetic corpus.

pub mod formats;
pub mod manifest;
pub mod synthetic;
pub mod wav;

pub use formats::{preprocess_frames, read_mel, write_mel, VideoClip, DEFAULT_FPS};
pub use manifest::{pick_speaker_reference, Manifest, ManifestRow, Split};
pub use synthetic::{generate_synthetic_corpus, SyntheticSpec};
pub use wav::{read_wav, write_wav};
