//! A miniature end-to-end run (corpus → identity model → separator → separation →
//! evaluation) whose every artifact is compared byte for byte across runs.

use std::fs;
use std::path::{Path, PathBuf};

use avsep::biometric::{train_biometric, BiometricModel, BiometricTrainConfig, IdentityPools};
use avsep::corpus::{wav_write, Split};
use avsep::dsp::DspConfig;
use avsep::eval::{evaluate_suite, write_eval_outputs, EvalOptions};
use avsep::separation::{separate, FusionMode, SeparateOptions, SeparatorKind, SeparatorModel};
use avsep::training::{train_separator, write_loss_curve, Checkpoint, SeparationData, TrainConfig};

use super::fixtures::{narrow_identity, narrow_separator, small_dataset};

pub const STEPS: usize = 6;

/// Runs the pipeline under `dir` and returns the checkpoint paths (identity, separator).
pub fn run_pipeline(dir: &Path, seed: u64) -> (PathBuf, PathBuf) {
    let dsp = DspConfig::default();
    let manifest = small_dataset(&dir.join("data"), seed);
    let pools = IdentityPools::from_manifest(&manifest, Split::Train, &dsp).unwrap();
    let mut bio = BiometricModel::new(narrow_identity(), seed + 1).unwrap();
    let bcfg = BiometricTrainConfig { steps: STEPS, batch: 4, ..BiometricTrainConfig::default() };
    train_biometric(&mut bio, &pools, &bcfg, seed + 2).unwrap();
    let bio_path = dir.join("biometric.ckpt");
    bio.to_checkpoint(STEPS as u64, seed).unwrap().save(&bio_path).unwrap();

    let data = SeparationData::load(&manifest, Split::Train, &dsp, Some(&bio), false).unwrap();
    let mut sep = SeparatorModel::new(narrow_separator(SeparatorKind::Conditioned, FusionMode::Attention), seed + 3).unwrap();
    sep.load_identity_speech(&bio).unwrap();
    let tcfg = TrainConfig { steps: STEPS, batch: 4, crop_frames: 32, log_every: 1, ..TrainConfig::default() };
    let history = train_separator(&mut sep, &data, &tcfg, seed + 4, |_, _| Ok(())).unwrap();
    write_loss_curve(&dir.join("loss_curve.tsv"), &history).unwrap();
    let sep_path = dir.join("separator.ckpt");
    sep.to_checkpoint(STEPS as u64, seed).unwrap().save(&sep_path).unwrap();

    let record = manifest.split(Split::Seen).next().unwrap();
    let sample = manifest.load_sample(record).unwrap();
    let out = separate(&sep, Some(&bio), &sample.mixture, Some(&sample.face), &SeparateOptions { gl_iters: 8, ..SeparateOptions::default() }).unwrap();
    wav_write(&dir.join("separated.wav"), &out.clip).unwrap();

    let opts = EvalOptions { gl_iters: 4, ..EvalOptions::default() };
    let (records, report) = evaluate_suite(&sep, Some(&bio), &manifest, &Split::EVAL, &opts).unwrap();
    write_eval_outputs(&dir.join("eval"), "reproducibility", &records, &report).unwrap();
    (bio_path, sep_path)
}

fn files_under(root: &Path) -> Vec<PathBuf> {
    let mut out = Vec::new();
    let mut stack = vec![root.to_path_buf()];
    while let Some(d) = stack.pop() {
        for e in fs::read_dir(&d).unwrap() {
            let p = e.unwrap().path();
            if p.is_dir() {
                stack.push(p);
            } else {
                out.push(p.strip_prefix(root).unwrap().to_path_buf());
            }
        }
    }
    out.sort();
    out
}

/// `Ok(count)` when both trees hold the same files with identical bytes.
pub fn compare_trees(a: &Path, b: &Path) -> Result<usize, String> {
    let (fa, fb) = (files_under(a), files_under(b));
    if fa != fb {
        return Err(format!("file lists differ: {} vs {} files", fa.len(), fb.len()));
    }
    for f in &fa {
        if fs::read(a.join(f)).unwrap() != fs::read(b.join(f)).unwrap() {
            return Err(format!("{} differs", f.display()));
        }
    }
    Ok(fa.len())
}

/// Single-byte flips at evenly spaced offsets and every truncation class must be rejected.
pub fn corruption_rejections(path: &Path) -> (usize, usize) {
    let bytes = fs::read(path).unwrap();
    let mut tried = 0;
    let mut rejected = 0;
    let stride = (bytes.len() / 97).max(1);
    for i in (0..bytes.len()).step_by(stride).chain([bytes.len() - 1]) {
        let mut bad = bytes.clone();
        bad[i] ^= 0x5A;
        tried += 1;
        rejected += usize::from(Checkpoint::from_bytes(&bad).is_err());
    }
    for cut in [0, 3, 6, 10, bytes.len() / 2, bytes.len() - 8, bytes.len() - 1] {
        tried += 1;
        rejected += usize::from(Checkpoint::from_bytes(&bytes[..cut]).is_err());
    }
    let mut extended = bytes.clone();
    extended.push(0);
    tried += 1;
    rejected += usize::from(Checkpoint::from_bytes(&extended).is_err());
    (tried, rejected)
}
