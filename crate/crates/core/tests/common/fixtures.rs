//! Small corpora and models shared by the integration suites.

use std::path::Path;

use avsep::biometric::BiometricConfig;
use avsep::corpus::{build_dataset, DatasetConfig, Manifest};
use avsep::separation::{FusionMode, SeparatorConfig, SeparatorKind};

pub fn small_dataset_config(seed: u64) -> DatasetConfig {
    DatasetConfig {
        seed,
        seen_speakers_per_class: 4,
        unseen_speakers_per_class: 4,
        train_mixtures: 24,
        eval_per_pair_class: 2,
        duration_s: 1.0,
        ..DatasetConfig::default()
    }
}

pub fn small_dataset(dir: &Path, seed: u64) -> Manifest {
    build_dataset(&small_dataset_config(seed), dir).unwrap()
}

pub fn narrow_identity() -> BiometricConfig {
    BiometricConfig {
        embed_dim: 16,
        face_channels: 8,
        speech_channels: 8,
        ..BiometricConfig::default()
    }
}

pub fn narrow_separator(kind: SeparatorKind, fusion: FusionMode) -> SeparatorConfig {
    SeparatorConfig {
        kind,
        fusion,
        audio_channels: 12,
        visual_channels: 8,
        res_blocks: 1,
        mask_blocks: 2,
        identity: narrow_identity(),
        ..SeparatorConfig::default()
    }
}
