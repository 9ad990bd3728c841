//! Separator and PIT-baseline training loops.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::biometric::BiometricModel;
use crate::corpus::{gain_linear, Manifest, MixtureSample, Split};
use crate::dsp::{mel_filterbank, stft, AudioClip, DspConfig};
use crate::error::{Error, Result};
use crate::numerics::{Ctx, Graph, OptimizerConfig, OptimizerState, ParamId, Tensor, Var};
use crate::separation::{log_input, SeparatorKind, SeparatorModel};
use crate::training::losses::{
    loss_srl_graph, loss_ss_graph, loss_total_graph, mel_kernel, pit_loss_graph, LOSS_FLOOR,
};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub steps: usize,
    pub batch: usize,
    /// Training crops in frames; evaluation always uses whole clips.
    pub crop_frames: usize,
    /// Weight of the speaker-representation loss (1 in the unweighted sum).
    pub lambda_srl: f64,
    /// Let gradients reach the hosted speech identity extractor.
    pub train_identity: bool,
    pub bn_momentum: f64,
    pub log_every: usize,
    pub optimizer: OptimizerConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            steps: 3000,
            batch: 16,
            crop_frames: 64,
            lambda_srl: 1.0,
            train_identity: false,
            bn_momentum: 0.1,
            log_every: 10,
            optimizer: OptimizerConfig::default(),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LossReport {
    pub step: usize,
    pub l_ss: f64,
    pub l_srl: f64,
    pub l_tot: f64,
}

/// Magnitude grids (f32, bin-major) of one mixture and its references.
#[derive(Clone, Debug)]
pub struct SepItem {
    pub mix: Vec<f32>,
    pub target: Vec<f32>,
    /// Magnitude of the interferer as it occurs in the mixture (gain applied).
    pub interferer: Option<Vec<f32>>,
    pub face_emb: Option<Vec<f32>>,
    pub n_frames: usize,
}

#[derive(Clone, Debug)]
pub struct SeparationData {
    pub bins: usize,
    pub items: Vec<SepItem>,
}

fn mag32(clip: &AudioClip, dsp: &DspConfig) -> Result<(Vec<f32>, usize)> {
    let s = stft(clip, dsp)?;
    Ok((s.magnitude().iter().map(|&v| v as f32).collect(), s.n_frames))
}

impl SeparationData {
    pub fn from_samples(
        samples: &[MixtureSample],
        dsp: &DspConfig,
        bio: Option<&BiometricModel>,
        with_interferer: bool,
    ) -> Result<Self> {
        let items = samples
            .par_iter()
            .map(|s| item_of(s, dsp, bio, with_interferer))
            .collect::<Result<_>>()?;
        Ok(Self {
            bins: dsp.freq_bins(),
            items,
        })
    }

    /// Loads every record of a split from disk.
    pub fn load(
        manifest: &Manifest,
        split: Split,
        dsp: &DspConfig,
        bio: Option<&BiometricModel>,
        with_interferer: bool,
    ) -> Result<Self> {
        let records: Vec<_> = manifest.split(split).collect();
        if records.is_empty() {
            return Err(Error::Config(format!("manifest has no `{split}` records")));
        }
        let items = records
            .par_iter()
            .map(|r| item_of(&manifest.load_sample(r)?, dsp, bio, with_interferer))
            .collect::<Result<_>>()?;
        Ok(Self {
            bins: dsp.freq_bins(),
            items,
        })
    }
}

fn item_of(s: &MixtureSample, dsp: &DspConfig, bio: Option<&BiometricModel>, with_interferer: bool) -> Result<SepItem> {
    let (mix, n_frames) = mag32(&s.mixture, dsp)?;
    let (target, _) = mag32(&s.target_ref, dsp)?;
    let interferer = if with_interferer {
        let g = gain_linear(s.gain_db);
        let scaled = AudioClip::new(s.interferer_ref.samples.iter().map(|v| g * v).collect(), s.interferer_ref.sample_rate);
        Some(mag32(&scaled, dsp)?.0)
    } else {
        None
    };
    let face_emb = match bio {
        Some(b) => Some(b.face_embeddings(&[&s.face])?.remove(0)),
        None => None,
    };
    Ok(SepItem {
        mix,
        target,
        interferer,
        face_emb,
        n_frames,
    })
}

fn crop_into(out: &mut Vec<f32>, grid: &[f32], bins: usize, n_frames: usize, start: usize, len: usize) {
    for k in 0..bins {
        out.extend_from_slice(&grid[k * n_frames + start..k * n_frames + start + len]);
    }
}

fn log_floor32(v: &[f32]) -> Vec<f32> {
    v.iter().map(|&x| x.max(LOSS_FLOOR as f32).ln()).collect()
}

/// One minibatch laid out as `[B, bins, T]` tensors.
struct Batch {
    mix: Tensor<f32>,
    target: Tensor<f32>,
    interferer: Option<Tensor<f32>>,
    emb: Option<Tensor<f32>>,
}

fn gather(data: &SeparationData, picks: &[(usize, usize)], len: usize) -> Result<Batch> {
    let (b, bins) = (picks.len(), data.bins);
    let mut mix = Vec::with_capacity(b * bins * len);
    let mut target = Vec::with_capacity(b * bins * len);
    let mut inter = Vec::new();
    let mut emb = Vec::new();
    for &(i, start) in picks {
        let it = &data.items[i];
        crop_into(&mut mix, &it.mix, bins, it.n_frames, start, len);
        crop_into(&mut target, &it.target, bins, it.n_frames, start, len);
        if let Some(x) = &it.interferer {
            crop_into(&mut inter, x, bins, it.n_frames, start, len);
        }
        if let Some(e) = &it.face_emb {
            emb.extend_from_slice(e);
        }
    }
    let shape = [b, bins, len];
    Ok(Batch {
        mix: Tensor::new(&shape, mix)?,
        target: Tensor::new(&shape, target)?,
        interferer: if inter.is_empty() { None } else { Some(Tensor::new(&shape, inter)?) },
        emb: if emb.is_empty() {
            None
        } else {
            let d = emb.len() / b;
            Some(Tensor::new(&[b, d], emb)?)
        },
    })
}

/// Forward pass to the losses. Returns `(l_ss, l_srl, l_tot)` variables.
fn forward_losses(
    g: &mut Graph<f32>,
    model: &SeparatorModel,
    batch: Batch,
    ctx: Ctx,
    cfg: &TrainConfig,
    mel: Option<(Var, Var)>,
) -> Result<(Var, Option<Var>, Var)> {
    let dsp = &model.config.dsp;
    let shape = batch.mix.shape().to_vec();
    let log_mix = Tensor::new(&shape, log_input_f32(batch.mix.data()))?;
    let x = g.input(log_mix, false);
    let mix = g.constant(batch.mix);
    let tlog = g.constant(Tensor::new(&shape, log_floor32(batch.target.data()))?);
    match model.config.kind {
        SeparatorKind::Conditioned => {
            let emb = batch
                .emb
                .ok_or_else(|| Error::Config("conditioned training data lacks face embeddings".into()))?;
            let e = g.input(emb, false);
            let mask = model.net.masks(g, &model.store, ctx, model.config.fusion, x, Some(e))?;
            let l_ss = loss_ss_graph(g, mask, mix, tlog)?;
            let stream = model.net.srl.as_ref().expect("conditioned model hosts an identity stream");
            let mel = mel.expect("mel kernel for conditioned model");
            let masked = g.mul(mask, mix)?;
            let tmag = g.constant(batch.target);
            let srl_ctx = Ctx {
                train: false,
                trainable: ctx.trainable && cfg.train_identity,
            };
            let l_srl = loss_srl_graph(g, stream, &model.store, srl_ctx, masked, tmag, mel, dsp)?;
            let l_tot = loss_total_graph(g, l_ss, l_srl, cfg.lambda_srl)?;
            Ok((l_ss, Some(l_srl), l_tot))
        }
        SeparatorKind::Pit => {
            let inter = batch
                .interferer
                .ok_or_else(|| Error::Config("PIT training data lacks interferer references".into()))?;
            let ilog = g.constant(Tensor::new(&shape, log_floor32(inter.data()))?);
            let masks = model.net.masks(g, &model.store, ctx, model.config.fusion, x, None)?;
            let (l, _) = pit_loss_graph(g, masks, mix, (tlog, ilog))?;
            Ok((l, None, l))
        }
    }
}

fn log_input_f32(mag: &[f32]) -> Vec<f32> {
    let v: Vec<f64> = mag.iter().map(|&x| x as f64).collect();
    log_input(&v)
}

/// Parameters the optimizer updates: everything but the hosted identity extractor,
/// unless it is explicitly unfrozen.
pub fn trainable_ids(model: &SeparatorModel, cfg: &TrainConfig) -> Vec<ParamId> {
    model
        .store
        .weight_ids()
        .into_iter()
        .filter(|&id| cfg.train_identity || !model.store.name(id).starts_with("srl."))
        .collect()
}

/// Minibatch training on random crops. `on_step` runs after every optimizer step;
/// the returned history keeps every `log_every`-th report and the last.
pub fn train_separator(
    model: &mut SeparatorModel,
    data: &SeparationData,
    cfg: &TrainConfig,
    seed: u64,
    mut on_step: impl FnMut(&LossReport, &SeparatorModel) -> Result<()>,
) -> Result<Vec<LossReport>> {
    if data.items.is_empty() {
        return Err(Error::Config("no training samples".into()));
    }
    if data.bins != model.config.dsp.freq_bins() {
        return Err(Error::dim("train_separator", &[model.config.dsp.freq_bins()], &[data.bins]));
    }
    let min_frames = data.items.iter().map(|i| i.n_frames).min().unwrap_or(0);
    let len = cfg.crop_frames.min(min_frames);
    if len == 0 || cfg.batch == 0 {
        return Err(Error::Config("crop length and batch size must be positive".into()));
    }
    let fb = mel_filterbank(&model.config.dsp)?;
    let mut opt = OptimizerState::new(&model.store, trainable_ids(model, cfg), cfg.optimizer.clone());
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut history = Vec::new();
    for step in 0..cfg.steps {
        let picks: Vec<(usize, usize)> = (0..cfg.batch)
            .map(|_| {
                let i = rng.random_range(0..data.items.len());
                (i, rng.random_range(0..=data.items[i].n_frames - len))
            })
            .collect();
        let batch = gather(data, &picks, len)?;
        let mut g = Graph::new();
        let mel = match model.config.kind {
            SeparatorKind::Conditioned => Some(mel_kernel(&mut g, &fb)?),
            SeparatorKind::Pit => None,
        };
        let (l_ss, l_srl, l_tot) = forward_losses(&mut g, model, batch, Ctx::TRAIN, cfg, mel)?;
        let report = LossReport {
            step,
            l_ss: g.scalar(l_ss) as f64,
            l_srl: l_srl.map_or(0.0, |v| g.scalar(v) as f64),
            l_tot: g.scalar(l_tot) as f64,
        };
        if !report.l_tot.is_finite() {
            return Err(Error::NonFinite(format!("training loss at step {step}")));
        }
        g.backward(l_tot)?;
        let grads = g.param_grads();
        opt.step(&mut model.store, &grads)?;
        let updates = g.take_stat_updates();
        model.store.apply_stat_updates(&updates, cfg.bn_momentum);
        if step % cfg.log_every.max(1) == 0 || step + 1 == cfg.steps {
            log::debug!(
                "step {step}: l_ss {:.4} l_srl {:.4} l_tot {:.4}",
                report.l_ss,
                report.l_srl,
                report.l_tot
            );
            history.push(report);
        }
        on_step(&report, model)?;
    }
    Ok(history)
}

/// Eval-mode losses over whole clips, averaged over samples.
pub fn evaluate_losses(model: &SeparatorModel, data: &SeparationData, cfg: &TrainConfig) -> Result<LossReport> {
    if data.items.is_empty() {
        return Err(Error::Config("no evaluation samples".into()));
    }
    let fb = mel_filterbank(&model.config.dsp)?;
    let parts: Vec<(f64, f64, f64)> = (0..data.items.len())
        .into_par_iter()
        .map(|i| {
            let it = &data.items[i];
            let batch = gather(data, &[(i, 0)], it.n_frames)?;
            let mut g = Graph::new();
            let mel = match model.config.kind {
                SeparatorKind::Conditioned => Some(mel_kernel(&mut g, &fb)?),
                SeparatorKind::Pit => None,
            };
            let (a, b, c) = forward_losses(&mut g, model, batch, Ctx::EVAL, cfg, mel)?;
            Ok((
                g.scalar(a) as f64,
                b.map_or(0.0, |v| g.scalar(v) as f64),
                g.scalar(c) as f64,
            ))
        })
        .collect::<Result<_>>()?;
    let n = parts.len() as f64;
    Ok(LossReport {
        step: 0,
        l_ss: parts.iter().map(|p| p.0).sum::<f64>() / n,
        l_srl: parts.iter().map(|p| p.1).sum::<f64>() / n,
        l_tot: parts.iter().map(|p| p.2).sum::<f64>() / n,
    })
}

pub const LOSS_CURVE_HEADER: &str = "step\tl_ss\tl_srl\tl_tot";

pub fn loss_curve_text(reports: &[LossReport]) -> String {
    let mut out = format!("{LOSS_CURVE_HEADER}\n");
    for r in reports {
        let _ = writeln!(out, "{}\t{:.6}\t{:.6}\t{:.6}", r.step, r.l_ss, r.l_srl, r.l_tot);
    }
    out
}

pub fn write_loss_curve(path: &Path, reports: &[LossReport]) -> Result<()> {
    fs::write(path, loss_curve_text(reports)).map_err(|e| Error::io(path, e))
}
