//! Synthetic speaker/face corpus, two-speaker mixing, and WAV/PGM/manifest I/O.

mod dataset;
mod face;
mod pgm;
mod speaker;
mod wav;

pub use dataset::{
    build_dataset, gain_linear, mix_clips, DatasetConfig, Manifest, ManifestRecord, MixtureSample,
    PairClass, Split, MANIFEST_FILE,
};
pub use face::{nearest_template, render_face, render_face_template, FaceConfig, FaceImage};
pub use pgm::{parse_pgm, pgm_bytes, pgm_read, pgm_write};
pub use speaker::{
    make_speaker, render_utterance, speaker_from_id, RegisterClass, SpeakerProfile, TimbreWeights,
    LATENT_DIM,
};
pub use wav::{parse_wav, wav_bytes, wav_read, wav_write};
