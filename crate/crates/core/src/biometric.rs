//! Cross-modal identity embeddings: a face stream and a speech stream mapped into one
//! unit-norm space and trained with an N-way matching objective.

use std::collections::BTreeMap;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::corpus::{FaceImage, Manifest, Split};
use crate::dsp::{log_mel, mel_filterbank, stft, AudioClip, DspConfig, LogMel};
use crate::error::{Error, Result};
use crate::numerics::layers::{ConvBlock, Dense};
use crate::numerics::{Ctx, Graph, OptimizerConfig, OptimizerState, ParamStore, Real, Tensor, Var};

/// Shortest log-mel sequence the speech stream accepts (three halvings).
pub const MIN_FRAMES: usize = 8;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct BiometricConfig {
    /// Embedding dimension (512 at full scale).
    pub embed_dim: usize,
    pub face_size: usize,
    pub face_channels: usize,
    pub speech_channels: usize,
    pub n_mels: usize,
    pub kernel: usize,
    pub temperature: f64,
    /// Candidates per matching trial (200 at full scale).
    pub n_way: usize,
}

impl Default for BiometricConfig {
    fn default() -> Self {
        Self {
            embed_dim: 64,
            face_size: 32,
            face_channels: 48,
            speech_channels: 64,
            n_mels: 40,
            kernel: 5,
            temperature: 0.1,
            n_way: 4,
        }
    }
}

impl BiometricConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n_way < 2 {
            return Err(Error::Config(format!("n_way must be at least 2, got {}", self.n_way)));
        }
        if !(self.temperature > 0.0 && self.temperature.is_finite()) {
            return Err(Error::Config(format!("temperature {} must be positive", self.temperature)));
        }
        if self.face_size < MIN_FRAMES {
            return Err(Error::Config(format!("face_size {} is below {MIN_FRAMES}", self.face_size)));
        }
        if self.kernel % 2 == 0 {
            return Err(Error::Config(format!("kernel {} must be odd", self.kernel)));
        }
        if self.embed_dim == 0 || self.face_channels == 0 || self.speech_channels == 0 || self.n_mels == 0 {
            return Err(Error::Config("biometric widths must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Modality {
    Face,
    Speech,
}

#[derive(Clone, Debug, PartialEq)]
pub struct IdentityEmbedding {
    pub values: Vec<f64>,
    pub modality: Modality,
}

/// Three conv+pool stages, temporal mean, linear projection, L2 normalization.
#[derive(Clone, Debug)]
pub struct Stream {
    pub blocks: Vec<ConvBlock>,
    pub proj: Dense,
}

impl Stream {
    pub fn new<T: Real, R: Rng>(
        store: &mut ParamStore<T>,
        name: &str,
        cin: usize,
        channels: usize,
        embed_dim: usize,
        kernel: usize,
        rng: &mut R,
    ) -> Result<Self> {
        let mut blocks = Vec::with_capacity(3);
        for i in 0..3 {
            let c_in = if i == 0 { cin } else { channels };
            blocks.push(ConvBlock::new(store, &format!("{name}.conv{i}"), c_in, channels, kernel, rng)?);
        }
        let proj = Dense::new(store, &format!("{name}.proj"), channels, embed_dim, rng)?;
        Ok(Self { blocks, proj })
    }

    /// `[B, Cin, T] -> [B, D]`, unit-norm rows.
    pub fn forward<T: Real>(&self, g: &mut Graph<T>, p: &ParamStore<T>, ctx: Ctx, x: Var) -> Result<Var> {
        let mut h = x;
        for b in &self.blocks {
            h = b.forward(g, p, ctx, h)?;
            h = g.avg_pool2(h)?;
        }
        let pooled = g.mean_time(h)?;
        let e = self.proj.forward(g, p, ctx, pooled)?;
        g.l2_normalize(e)
    }
}

#[derive(Clone, Debug)]
pub struct BiometricNet {
    /// Treats image rows as channels and columns as the sequence axis.
    pub face: Stream,
    /// Consumes `[B, n_mels, T]` log-mel features.
    pub speech: Stream,
}

impl BiometricNet {
    pub fn new<T: Real, R: Rng>(store: &mut ParamStore<T>, cfg: &BiometricConfig, rng: &mut R) -> Result<Self> {
        cfg.validate()?;
        Ok(Self {
            face: Stream::new(store, "face", cfg.face_size, cfg.face_channels, cfg.embed_dim, cfg.kernel, rng)?,
            speech: Stream::new(store, "speech", cfg.n_mels, cfg.speech_channels, cfg.embed_dim, cfg.kernel, rng)?,
        })
    }
}

/// Builds only a speech stream under `name` (used to host a frozen copy elsewhere).
pub fn speech_stream<T: Real, R: Rng>(
    store: &mut ParamStore<T>,
    name: &str,
    cfg: &BiometricConfig,
    rng: &mut R,
) -> Result<Stream> {
    Stream::new(store, name, cfg.n_mels, cfg.speech_channels, cfg.embed_dim, cfg.kernel, rng)
}

#[derive(Clone, Debug)]
pub struct BiometricModel {
    pub config: BiometricConfig,
    pub net: BiometricNet,
    pub store: ParamStore<f32>,
}

impl BiometricModel {
    pub fn new(config: BiometricConfig, seed: u64) -> Result<Self> {
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let net = BiometricNet::new(&mut store, &config, &mut rng)?;
        Ok(Self { config, net, store })
    }

    fn face_tensor(&self, faces: &[&FaceImage]) -> Result<Tensor<f32>> {
        let n = self.config.face_size;
        let mut data = Vec::with_capacity(faces.len() * n * n);
        for f in faces {
            if f.size != n {
                return Err(Error::Config(format!(
                    "face image is {0}×{0} but the model expects {n}×{n}",
                    f.size
                )));
            }
            data.extend(f.pixels.iter().map(|&v| v as f32));
        }
        Tensor::new(&[faces.len(), n, n], data)
    }

    /// Eval-mode face embeddings for a batch of images.
    pub fn face_embeddings(&self, faces: &[&FaceImage]) -> Result<Vec<Vec<f32>>> {
        if faces.is_empty() {
            return Ok(Vec::new());
        }
        let mut g = Graph::new();
        let x = g.input(self.face_tensor(faces)?, false);
        let e = self.net.face.forward(&mut g, &self.store, Ctx::EVAL, x)?;
        Ok(g.value(e).data().chunks(self.config.embed_dim).map(<[f32]>::to_vec).collect())
    }

    /// Eval-mode speech embeddings for equal-length log-mel inputs.
    pub fn speech_embeddings(&self, feats: &[&LogMel]) -> Result<Vec<Vec<f32>>> {
        if feats.is_empty() {
            return Ok(Vec::new());
        }
        let t = feats[0].n_frames;
        let mut data = Vec::with_capacity(feats.len() * self.config.n_mels * t);
        for f in feats {
            check_feats(f, &self.config)?;
            if f.n_frames != t {
                return Err(Error::Argument("speech batch mixes sequence lengths".into()));
            }
            data.extend(f.data.iter().map(|&v| v as f32));
        }
        let mut g = Graph::new();
        let x = g.input(Tensor::new(&[feats.len(), self.config.n_mels, t], data)?, false);
        let e = self.net.speech.forward(&mut g, &self.store, Ctx::EVAL, x)?;
        Ok(g.value(e).data().chunks(self.config.embed_dim).map(<[f32]>::to_vec).collect())
    }
}

fn check_feats(f: &LogMel, cfg: &BiometricConfig) -> Result<()> {
    if f.n_mels != cfg.n_mels {
        return Err(Error::Config(format!("log-mel has {} bands, model expects {}", f.n_mels, cfg.n_mels)));
    }
    if f.n_frames < MIN_FRAMES {
        return Err(Error::Argument(format!(
            "speech input has {} frames, at least {MIN_FRAMES} required",
            f.n_frames
        )));
    }
    Ok(())
}

fn to_embedding(v: &[f32], modality: Modality) -> IdentityEmbedding {
    IdentityEmbedding {
        values: v.iter().map(|&x| x as f64).collect(),
        modality,
    }
}

pub fn face_identity_extract(model: &BiometricModel, img: &FaceImage) -> Result<IdentityEmbedding> {
    let e = model.face_embeddings(&[img])?;
    Ok(to_embedding(&e[0], Modality::Face))
}

pub fn speech_identity_extract(model: &BiometricModel, feats: &LogMel) -> Result<IdentityEmbedding> {
    let e = model.speech_embeddings(&[feats])?;
    Ok(to_embedding(&e[0], Modality::Speech))
}

/// Natural-log mel features of a clip at the given analysis settings.
pub fn clip_log_mel(clip: &AudioClip, cfg: &DspConfig) -> Result<LogMel> {
    let spec = stft(clip, cfg)?;
    let fb = mel_filterbank(cfg)?;
    log_mel(&spec.magnitude(), spec.n_frames, &fb, cfg)
}

/// Softmax cross-entropy over `cos(face, audio_i) / temperature` with the true index.
pub fn nway_matching_loss(
    face: &[f64],
    audio: &[Vec<f64>],
    true_idx: usize,
    temperature: f64,
) -> Result<f64> {
    if audio.len() < 2 {
        return Err(Error::Config(format!("matching needs N ≥ 2 candidates, got {}", audio.len())));
    }
    if true_idx >= audio.len() {
        return Err(Error::Argument(format!("true index {true_idx} out of range for {} candidates", audio.len())));
    }
    if !(temperature > 0.0) {
        return Err(Error::Config(format!("temperature {temperature} must be positive")));
    }
    let logits: Vec<f64> = audio
        .iter()
        .map(|a| crate::numerics::cosine_similarity(face, a) / temperature)
        .collect();
    let m = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let lz = logits.iter().map(|l| (l - m).exp()).sum::<f64>().ln() + m;
    Ok(lz - logits[true_idx])
}

/// Differentiable N-way loss: `faces: [B, D]`, `audio: [B·N, D]` grouped per face.
pub fn nway_matching_loss_graph<T: Real>(
    g: &mut Graph<T>,
    faces: Var,
    audio: Var,
    targets: &[usize],
    n_way: usize,
    temperature: f64,
) -> Result<Var> {
    let b = targets.len();
    let rep = g.repeat_rows(faces, n_way)?;
    let cos = g.cosine_rows(rep, audio)?;
    let logits = g.scale(cos, T::lit(1.0 / temperature));
    let logits = g.reshape(logits, &[b, n_way])?;
    g.softmax_cross_entropy(logits, targets)
}

/// One matching trial on precomputed embeddings.
#[derive(Clone, Debug)]
pub struct MatchTrial {
    pub face: Vec<f64>,
    pub candidates: Vec<Vec<f64>>,
    pub true_idx: usize,
}

/// Fraction of trials whose highest-cosine candidate is the true one (ties: lowest index).
pub fn matching_accuracy(trials: &[MatchTrial]) -> f64 {
    if trials.is_empty() {
        return 0.0;
    }
    let mut correct = 0usize;
    for (k, t) in trials.iter().enumerate() {
        let sims: Vec<f64> = t
            .candidates
            .iter()
            .map(|c| crate::numerics::cosine_similarity(&t.face, c))
            .collect();
        let best = sims.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let winners: Vec<usize> = (0..sims.len()).filter(|&i| sims[i] == best).collect();
        if winners.len() > 1 {
            log::info!("matching trial {k}: tie between candidates {winners:?}, picking {}", winners[0]);
        }
        if winners.first() == Some(&t.true_idx) {
            correct += 1;
        }
    }
    correct as f64 / trials.len() as f64
}

/// Per-speaker pools of log-mel clips and face images.
#[derive(Clone, Debug, Default)]
pub struct IdentityPools {
    pub speakers: Vec<String>,
    pub clips: Vec<Vec<LogMel>>,
    pub faces: Vec<Vec<FaceImage>>,
}

impl IdentityPools {
    /// Collects every target/interferer clip and target face of a manifest split.
    pub fn from_manifest(manifest: &Manifest, split: Split, dsp: &DspConfig) -> Result<Self> {
        let records: Vec<_> = manifest.split(split).collect();
        let loaded: Vec<_> = records
            .par_iter()
            .map(|r| -> Result<_> {
                let s = manifest.load_sample(r)?;
                Ok((
                    clip_log_mel(&s.target_ref, dsp)?,
                    clip_log_mel(&s.interferer_ref, dsp)?,
                    s.face,
                ))
            })
            .collect::<Result<_>>()?;
        let mut by_id: BTreeMap<&str, (Vec<LogMel>, Vec<FaceImage>)> = BTreeMap::new();
        for (r, (t, i, f)) in records.iter().zip(loaded) {
            let e = by_id.entry(r.target_id.as_str()).or_default();
            e.0.push(t);
            e.1.push(f);
            by_id.entry(r.interferer_id.as_str()).or_default().0.push(i);
        }
        let mut pools = IdentityPools::default();
        for (id, (clips, faces)) in by_id {
            pools.speakers.push(id.to_string());
            pools.clips.push(clips);
            pools.faces.push(faces);
        }
        Ok(pools)
    }

    /// Speakers with at least one face and one clip.
    fn anchors(&self) -> Vec<usize> {
        (0..self.speakers.len())
            .filter(|&i| !self.faces[i].is_empty() && !self.clips[i].is_empty())
            .collect()
    }

    /// Seeded matching trials: a face, one clip of the same speaker and `n_way − 1`
    /// clips of distinct other speakers, true position uniform.
    pub fn trials(&self, n_way: usize, count: usize, seed: u64) -> Result<Vec<RawTrial<'_>>> {
        let anchors = self.anchors();
        let with_clips: Vec<usize> = (0..self.speakers.len()).filter(|&i| !self.clips[i].is_empty()).collect();
        if anchors.is_empty() || with_clips.len() < n_way {
            return Err(Error::Config(format!(
                "need at least {n_way} speakers with clips, found {}",
                with_clips.len()
            )));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut out = Vec::with_capacity(count);
        for _ in 0..count {
            let s = anchors[rng.random_range(0..anchors.len())];
            let face = &self.faces[s][rng.random_range(0..self.faces[s].len())];
            let mut others: Vec<usize> = with_clips.iter().copied().filter(|&o| o != s).collect();
            others.shuffle(&mut rng);
            let true_idx = rng.random_range(0..n_way);
            let mut candidates = Vec::with_capacity(n_way);
            let mut it = others.into_iter();
            for k in 0..n_way {
                let who = if k == true_idx { s } else { it.next().expect("enough speakers") };
                candidates.push(&self.clips[who][rng.random_range(0..self.clips[who].len())]);
            }
            out.push(RawTrial {
                face,
                candidates,
                true_idx,
            });
        }
        Ok(out)
    }
}

#[derive(Clone, Debug)]
pub struct RawTrial<'a> {
    pub face: &'a FaceImage,
    pub candidates: Vec<&'a LogMel>,
    pub true_idx: usize,
}

/// Embeds raw trials with the model (eval mode).
pub fn embed_trials(model: &BiometricModel, trials: &[RawTrial<'_>]) -> Result<Vec<MatchTrial>> {
    trials
        .par_iter()
        .map(|t| {
            let face = model.face_embeddings(&[t.face])?.remove(0);
            let cands = model.speech_embeddings(&t.candidates)?;
            Ok(MatchTrial {
                face: face.iter().map(|&v| v as f64).collect(),
                candidates: cands
                    .iter()
                    .map(|c| c.iter().map(|&v| v as f64).collect())
                    .collect(),
                true_idx: t.true_idx,
            })
        })
        .collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct BiometricTrainConfig {
    pub steps: usize,
    /// Faces per minibatch; each brings `n_way` audio candidates.
    pub batch: usize,
    /// Random crop length of training clips in frames.
    pub crop_frames: usize,
    pub bn_momentum: f64,
    pub log_every: usize,
    pub optimizer: OptimizerConfig,
}

impl Default for BiometricTrainConfig {
    fn default() -> Self {
        Self {
            steps: 600,
            batch: 16,
            crop_frames: 96,
            bn_momentum: 0.1,
            log_every: 10,
            optimizer: OptimizerConfig::default(),
        }
    }
}

fn crop(f: &LogMel, start: usize, len: usize) -> impl Iterator<Item = f32> + '_ {
    (0..f.n_mels).flat_map(move |m| {
        f.data[m * f.n_frames + start..m * f.n_frames + start + len]
            .iter()
            .map(|&v| v as f32)
    })
}

/// Trains both streams on matching minibatches. Returns `(step, loss)` pairs every
/// `log_every` steps and at the final step.
pub fn train_biometric(
    model: &mut BiometricModel,
    pools: &IdentityPools,
    cfg: &BiometricTrainConfig,
    seed: u64,
) -> Result<Vec<(usize, f64)>> {
    let n_way = model.config.n_way;
    let anchors = pools.anchors();
    let with_clips: Vec<usize> = (0..pools.speakers.len()).filter(|&i| !pools.clips[i].is_empty()).collect();
    if with_clips.len() < n_way || anchors.is_empty() {
        return Err(Error::Config(format!(
            "biometric training needs at least {n_way} speakers with clips and faces, found {}",
            with_clips.len()
        )));
    }
    let min_len = pools.clips.iter().flatten().map(|c| c.n_frames).min().unwrap_or(0);
    let crop_len = cfg.crop_frames.min(min_len);
    if crop_len < MIN_FRAMES {
        return Err(Error::Config(format!("clips are too short to crop ({min_len} frames)")));
    }
    let mut opt = OptimizerState::for_all_weights(&model.store, cfg.optimizer.clone());
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (nm, size) = (model.config.n_mels, model.config.face_size);
    let mut history = Vec::new();
    for step in 0..cfg.steps {
        let mut face_data = Vec::with_capacity(cfg.batch * size * size);
        let mut audio_data = Vec::with_capacity(cfg.batch * n_way * nm * crop_len);
        let mut targets = Vec::with_capacity(cfg.batch);
        for _ in 0..cfg.batch {
            let s = anchors[rng.random_range(0..anchors.len())];
            let face = &pools.faces[s][rng.random_range(0..pools.faces[s].len())];
            face_data.extend(face.pixels.iter().map(|&v| v as f32));
            let mut others: Vec<usize> = with_clips.iter().copied().filter(|&o| o != s).collect();
            others.shuffle(&mut rng);
            let true_idx = rng.random_range(0..n_way);
            let mut it = others.into_iter();
            for k in 0..n_way {
                let who = if k == true_idx { s } else { it.next().expect("enough speakers") };
                let clip = &pools.clips[who][rng.random_range(0..pools.clips[who].len())];
                let start = rng.random_range(0..=clip.n_frames - crop_len);
                audio_data.extend(crop(clip, start, crop_len));
            }
            targets.push(true_idx);
        }
        let mut g = Graph::new();
        let faces = g.input(Tensor::new(&[cfg.batch, size, size], face_data)?, false);
        let audio = g.input(Tensor::new(&[cfg.batch * n_way, nm, crop_len], audio_data)?, false);
        let fe = model.net.face.forward(&mut g, &model.store, Ctx::TRAIN, faces)?;
        let ae = model.net.speech.forward(&mut g, &model.store, Ctx::TRAIN, audio)?;
        let loss = nway_matching_loss_graph(&mut g, fe, ae, &targets, n_way, model.config.temperature)?;
        let value = g.scalar(loss) as f64;
        if !value.is_finite() {
            return Err(Error::NonFinite(format!("biometric loss at step {step}")));
        }
        g.backward(loss)?;
        let grads = g.param_grads();
        opt.step(&mut model.store, &grads)?;
        let updates = g.take_stat_updates();
        model.store.apply_stat_updates(&updates, cfg.bn_momentum);
        if step % cfg.log_every.max(1) == 0 || step + 1 == cfg.steps {
            log::debug!("biometric step {step}: loss {value:.4}");
            history.push((step, value));
        }
    }
    Ok(history)
}
