//! The face-conditioned separator: speech encoder, identity head, temporal attention,
//! fusion, mask estimator, and the waveform-to-waveform separation path.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::biometric::{speech_stream, BiometricConfig, BiometricModel, Stream};
use crate::corpus::FaceImage;
use crate::dsp::{griffin_lim, stft, AudioClip, DspConfig, DEFAULT_GL_ITERS};
use crate::error::{Error, Result};
use crate::numerics::layers::{Conv1d, ConvBlock, FcBlock, ResBlock};
use crate::numerics::{Ctx, Graph, ParamStore, Real, Tensor, Var};

/// Floor applied before taking the log of encoder inputs.
pub const LOG_FLOOR: f64 = 1e-3;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum FusionMode {
    /// The identity vector is concatenated to every frame.
    Uniform,
    /// The identity vector is scaled per frame by a learned weight before concatenation.
    Attention,
}

impl std::str::FromStr for FusionMode {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "uniform" => Ok(FusionMode::Uniform),
            "attention" => Ok(FusionMode::Attention),
            _ => Err(Error::Argument(format!("unknown fusion mode `{s}` (uniform|attention)"))),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SeparatorKind {
    /// One mask for the speaker designated by a face.
    Conditioned,
    /// Two masks, audio only, trained permutation-invariantly.
    Pit,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SeparatorConfig {
    pub kind: SeparatorKind,
    pub fusion: FusionMode,
    /// Encoder width (1536 at full scale).
    pub audio_channels: usize,
    /// Identity-vector width (512 at full scale).
    pub visual_channels: usize,
    pub res_blocks: usize,
    /// Mask-estimator conv blocks (15 at full scale).
    pub mask_blocks: usize,
    pub kernel: usize,
    pub dsp: DspConfig,
    /// Shape of the identity extractor whose embeddings condition the model and whose
    /// speech stream is hosted (frozen) for the representation loss.
    pub identity: BiometricConfig,
}

impl Default for SeparatorConfig {
    fn default() -> Self {
        Self {
            kind: SeparatorKind::Conditioned,
            fusion: FusionMode::Attention,
            audio_channels: 96,
            visual_channels: 64,
            res_blocks: 4,
            mask_blocks: 6,
            kernel: 5,
            dsp: DspConfig::default(),
            identity: BiometricConfig::default(),
        }
    }
}

impl SeparatorConfig {
    pub fn validate(&self) -> Result<()> {
        self.dsp.validate()?;
        self.identity.validate()?;
        if self.kernel % 2 == 0 {
            return Err(Error::Config(format!("kernel {} must be odd", self.kernel)));
        }
        if self.audio_channels == 0 || self.visual_channels == 0 || self.mask_blocks == 0 {
            return Err(Error::Config("separator widths and depths must be positive".into()));
        }
        if self.identity.n_mels != self.dsp.n_mels {
            return Err(Error::Config(format!(
                "identity extractor expects {} mel bands, dsp config has {}",
                self.identity.n_mels, self.dsp.n_mels
            )));
        }
        Ok(())
    }

    pub fn outputs(&self) -> usize {
        match self.kind {
            SeparatorKind::Conditioned => 1,
            SeparatorKind::Pit => 2,
        }
    }
}

#[derive(Clone, Debug)]
pub struct SeparatorNet {
    pub encoder_in: ConvBlock,
    pub res: Vec<ResBlock>,
    /// Per-frame FCBlock (kernel-1 ConvBlock).
    pub encoder_out: ConvBlock,
    pub image_head: Vec<FcBlock>,
    /// Per-frame dense + sigmoid; present in attention mode only.
    pub attention: Option<Conv1d>,
    pub mask_blocks: Vec<ConvBlock>,
    pub mask_out: Conv1d,
    /// Frozen speech identity extractor hosted for the representation loss.
    pub srl: Option<Stream>,
}

impl SeparatorNet {
    pub fn new<T: Real, R: Rng>(store: &mut ParamStore<T>, cfg: &SeparatorConfig, rng: &mut R) -> Result<Self> {
        cfg.validate()?;
        let (ca, cv, k) = (cfg.audio_channels, cfg.visual_channels, cfg.kernel);
        let bins = cfg.dsp.freq_bins();
        let conditioned = cfg.kind == SeparatorKind::Conditioned;
        let encoder_in = ConvBlock::new(store, "enc.in", bins, ca, k, rng)?;
        let res = (0..cfg.res_blocks)
            .map(|i| ResBlock::new(store, &format!("enc.res{i}"), ca, k, rng))
            .collect::<Result<_>>()?;
        let encoder_out = ConvBlock::new(store, "enc.out", ca, ca, 1, rng)?;
        let mut image_head = Vec::new();
        let mut attention = None;
        if conditioned {
            image_head.push(FcBlock::new(store, "img.fc0", cfg.identity.embed_dim, cv, rng)?);
            image_head.push(FcBlock::new(store, "img.fc1", cv, cv, rng)?);
            if cfg.fusion == FusionMode::Attention {
                attention = Some(Conv1d::new(store, "att", ca, 1, 1, rng)?);
            }
        }
        let fused = if conditioned { ca + cv } else { ca };
        let mask_blocks = (0..cfg.mask_blocks)
            .map(|i| {
                let cin = if i == 0 { fused } else { ca };
                ConvBlock::new(store, &format!("mask.conv{i}"), cin, ca, k, rng)
            })
            .collect::<Result<_>>()?;
        let mask_out = Conv1d::new(store, "mask.out", ca, bins * cfg.outputs(), 1, rng)?;
        let srl = if conditioned {
            Some(speech_stream(store, "srl.speech", &cfg.identity, rng)?)
        } else {
            None
        };
        Ok(Self {
            encoder_in,
            res,
            encoder_out,
            image_head,
            attention,
            mask_blocks,
            mask_out,
            srl,
        })
    }

    /// `ln(max(|S|, floor))` `[B, 257, T]` → `A: [B, C_a, T]`.
    pub fn speech_encode<T: Real>(&self, g: &mut Graph<T>, p: &ParamStore<T>, ctx: Ctx, log_mag: Var) -> Result<Var> {
        let mut h = self.encoder_in.forward(g, p, ctx, log_mag)?;
        for r in &self.res {
            h = r.forward(g, p, ctx, h)?;
        }
        self.encoder_out.forward(g, p, ctx, h)
    }

    /// Identity embedding `[B, D]` → `v: [B, C_v]`.
    pub fn image_head<T: Real>(&self, g: &mut Graph<T>, p: &ParamStore<T>, ctx: Ctx, emb: Var) -> Result<Var> {
        if self.image_head.is_empty() {
            return Err(Error::Config("this separator has no identity head".into()));
        }
        let mut v = emb;
        for b in &self.image_head {
            v = b.forward(g, p, ctx, v)?;
        }
        Ok(v)
    }

    /// `A: [B, C_a, T]` → per-frame weights `[B, 1, T]` in (0, 1).
    pub fn temporal_attention<T: Real>(&self, g: &mut Graph<T>, p: &ParamStore<T>, ctx: Ctx, a: Var) -> Result<Var> {
        let head = self
            .attention
            .as_ref()
            .ok_or_else(|| Error::Config("this separator has no attention head".into()))?;
        let logits = head.forward(g, p, ctx, a)?;
        Ok(g.sigmoid(logits))
    }

    /// `J: [B, C_in, T]` → masks `[B, 257·outputs, T]` in (0, 1).
    pub fn estimate_mask<T: Real>(&self, g: &mut Graph<T>, p: &ParamStore<T>, ctx: Ctx, j: Var) -> Result<Var> {
        let mut h = j;
        for b in &self.mask_blocks {
            h = b.forward(g, p, ctx, h)?;
        }
        let logits = self.mask_out.forward(g, p, ctx, h)?;
        Ok(g.sigmoid(logits))
    }

    /// Full mask path. `emb` is required for conditioned models and ignored otherwise.
    pub fn masks<T: Real>(
        &self,
        g: &mut Graph<T>,
        p: &ParamStore<T>,
        ctx: Ctx,
        fusion: FusionMode,
        log_mag: Var,
        emb: Option<Var>,
    ) -> Result<Var> {
        let a = self.speech_encode(g, p, ctx, log_mag)?;
        let j = if self.image_head.is_empty() {
            a
        } else {
            let emb = emb.ok_or_else(|| Error::Argument("conditioned separator needs an identity embedding".into()))?;
            let v = self.image_head(g, p, ctx, emb)?;
            let w = match fusion {
                FusionMode::Attention => Some(self.temporal_attention(g, p, ctx, a)?),
                FusionMode::Uniform => None,
            };
            fuse(g, a, v, w, fusion)?
        };
        self.estimate_mask(g, p, ctx, j)
    }
}

/// `J[:, t] = concat(A[:, t], v)` (uniform) or `concat(A[:, t], w_t·v)` (attention).
pub fn fuse<T: Real>(g: &mut Graph<T>, a: Var, v: Var, weights: Option<Var>, mode: FusionMode) -> Result<Var> {
    let t = *g.shape(a).last().ok_or_else(|| Error::dim("fuse", g.shape(a), &[]))?;
    let vt = g.broadcast_time(v, t)?;
    let vt = match (mode, weights) {
        (FusionMode::Uniform, _) => vt,
        (FusionMode::Attention, Some(w)) => g.mul_frames(vt, w)?,
        (FusionMode::Attention, None) => {
            return Err(Error::Argument("attention fusion requires per-frame weights".into()))
        }
    };
    g.concat_channels(a, vt)
}

/// Elementwise `mask ⊙ S`.
pub fn apply_mask(mask: &[f64], mag: &[f64]) -> Result<Vec<f64>> {
    if mask.len() != mag.len() {
        return Err(Error::dim("apply_mask", &[mask.len()], &[mag.len()]));
    }
    Ok(mask.iter().zip(mag).map(|(m, s)| m * s).collect())
}

/// `ln(max(v, floor))` as f32, the encoder's input domain.
pub fn log_input(mag: &[f64]) -> Vec<f32> {
    mag.iter().map(|&v| v.max(LOG_FLOOR).ln() as f32).collect()
}

#[derive(Clone, Debug)]
pub struct SeparatorModel {
    pub config: SeparatorConfig,
    pub net: SeparatorNet,
    pub store: ParamStore<f32>,
}

impl SeparatorModel {
    pub fn new(config: SeparatorConfig, seed: u64) -> Result<Self> {
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let net = SeparatorNet::new(&mut store, &config, &mut rng)?;
        Ok(Self { config, net, store })
    }

    /// Copies the speech stream of a trained identity model into the hosted extractor.
    pub fn load_identity_speech(&mut self, bio: &BiometricModel) -> Result<()> {
        if bio.config != self.config.identity {
            return Err(Error::Config("identity model shape differs from the separator's identity config".into()));
        }
        let names: Vec<String> = bio
            .store
            .iter()
            .filter(|(_, p)| p.name.starts_with("speech."))
            .map(|(_, p)| p.name.clone())
            .collect();
        for name in names {
            let id = bio.store.id(&name).expect("listed above");
            self.store.set(&format!("srl.{name}"), bio.store.get(id).clone())?;
        }
        Ok(())
    }

    /// Eval-mode masks for one magnitude grid: `outputs` masks of `257 × T`, bin-major.
    pub fn infer_masks(&self, mag: &[f64], n_frames: usize, emb: Option<&[f32]>) -> Result<Vec<Vec<f64>>> {
        let bins = self.config.dsp.freq_bins();
        if mag.len() != bins * n_frames {
            return Err(Error::dim("infer_masks", &[bins, n_frames], &[mag.len()]));
        }
        let mut g = Graph::new();
        let x = g.input(Tensor::new(&[1, bins, n_frames], log_input(mag))?, false);
        let e = match emb {
            Some(e) => Some(g.input(Tensor::new(&[1, e.len()], e.to_vec())?, false)),
            None => None,
        };
        let m = self.net.masks(&mut g, &self.store, Ctx::EVAL, self.config.fusion, x, e)?;
        let data = g.value(m).data();
        Ok(data
            .chunks(bins * n_frames)
            .map(|c| c.iter().map(|&v| v as f64).collect())
            .collect())
    }
}

#[derive(Clone, Debug)]
pub struct SeparateOptions {
    pub gl_iters: usize,
    pub seed: u64,
    /// Which mask to use for multi-output models.
    pub channel: usize,
    /// Debug hook: replace the estimated mask with all ones.
    pub unit_mask: bool,
}

impl Default for SeparateOptions {
    fn default() -> Self {
        Self {
            gl_iters: DEFAULT_GL_ITERS,
            seed: 0,
            channel: 0,
            unit_mask: false,
        }
    }
}

#[derive(Clone, Debug)]
pub struct Separation {
    pub clip: AudioClip,
    pub mask: Vec<f64>,
    pub masked_mag: Vec<f64>,
    pub n_frames: usize,
    /// Spectral-convergence error per phase-reconstruction iteration.
    pub gl_errors: Vec<f64>,
}

/// Mixture → STFT → mask → masked magnitude → phase reconstruction started from the
/// mixture phase → waveform of the same length (zero-padded to whole hops internally).
pub fn separate(
    model: &SeparatorModel,
    bio: Option<&BiometricModel>,
    mixture: &AudioClip,
    face: Option<&FaceImage>,
    opts: &SeparateOptions,
) -> Result<Separation> {
    let dsp = &model.config.dsp;
    if mixture.sample_rate != dsp.sample_rate {
        return Err(Error::Config(format!(
            "mixture is {} Hz but the model runs at {} Hz",
            mixture.sample_rate, dsp.sample_rate
        )));
    }
    if mixture.is_empty() {
        return Err(Error::Argument("mixture is empty".into()));
    }
    let padded_len = mixture.len().div_ceil(dsp.hop_length) * dsp.hop_length;
    let mut padded = mixture.clone();
    padded.samples.resize(padded_len, 0.0);
    let spec = stft(&padded, dsp)?;
    let mag = spec.magnitude();
    let emb = match model.config.kind {
        SeparatorKind::Conditioned => {
            let bio = bio.ok_or_else(|| Error::Config("conditioned separation needs an identity model".into()))?;
            let face = face.ok_or_else(|| Error::Argument("conditioned separation needs a face image".into()))?;
            if bio.config != model.config.identity {
                return Err(Error::Config("identity model does not match the separator's identity config".into()));
            }
            Some(bio.face_embeddings(&[face])?.remove(0))
        }
        SeparatorKind::Pit => None,
    };
    let mask = if opts.unit_mask {
        vec![1.0; mag.len()]
    } else {
        let mut masks = model.infer_masks(&mag, spec.n_frames, emb.as_deref())?;
        if opts.channel >= masks.len() {
            return Err(Error::Argument(format!(
                "channel {} requested from a {}-output model",
                opts.channel,
                masks.len()
            )));
        }
        masks.swap_remove(opts.channel)
    };
    let masked_mag = apply_mask(&mask, &mag)?;
    let mut gl = griffin_lim(&masked_mag, spec.n_frames, dsp, opts.gl_iters, opts.seed, Some(&spec))?;
    gl.clip.samples.truncate(mixture.len());
    Ok(Separation {
        clip: gl.clip,
        mask,
        masked_mag,
        n_frames: spec.n_frames,
        gl_errors: gl.errors,
    })
}
