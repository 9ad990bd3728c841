//! Finite-difference checks of every differentiable operation and full loss graph at 64-bit.

use avsep::biometric::{speech_stream, BiometricConfig};
use avsep::dsp::{mel_filterbank, DspConfig};
use avsep::numerics::gradcheck::DEFAULT_STEP;
use avsep::numerics::layers::BatchNorm;
use avsep::numerics::{grad_check, grad_check_params, Ctx, Graph, ParamStore, Tensor, Var};
use avsep::separation::{FusionMode, SeparatorConfig, SeparatorKind, SeparatorNet};
use avsep::training::{loss_srl_graph, loss_ss_graph, loss_total_graph, mel_kernel, pit_loss_graph, LOSS_FLOOR};
use avsep::Result;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub const SMOOTH_TOL: f64 = 1e-6;
pub const GENERAL_TOL: f64 = 1e-4;

pub struct GradCase {
    pub name: &'static str,
    pub err: f64,
    pub tol: f64,
}

impl GradCase {
    pub fn ok(&self) -> bool {
        self.err < self.tol
    }
}

fn rand_t(shape: &[usize], lo: f64, hi: f64, rng: &mut ChaCha8Rng) -> Tensor<f64> {
    let n = shape.iter().product();
    Tensor::new(shape, (0..n).map(|_| rng.random_range(lo..hi)).collect()).unwrap()
}

/// Values in `±[lo, hi]`, away from zero.
fn signed_t(shape: &[usize], lo: f64, hi: f64, rng: &mut ChaCha8Rng) -> Tensor<f64> {
    let n = shape.iter().product();
    Tensor::new(
        shape,
        (0..n)
            .map(|_| {
                let m = rng.random_range(lo..hi);
                if rng.random::<bool>() { m } else { -m }
            })
            .collect(),
    )
    .unwrap()
}

/// `Σ c ⊙ v` with a fixed random `c`, so every output element gets a distinct weight.
fn weighted(g: &mut Graph<f64>, v: Var, seed: u64) -> Result<Var> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let shape = g.shape(v).to_vec();
    let c = g.constant(rand_t(&shape, -1.0, 1.0, &mut rng));
    let p = g.mul(v, c)?;
    Ok(g.sum(p))
}

fn case<F>(out: &mut Vec<GradCase>, name: &'static str, tol: f64, inputs: &[Tensor<f64>], f: F)
where
    F: Fn(&mut Graph<f64>, &[Var]) -> Result<Var>,
{
    let err = grad_check(f, inputs, DEFAULT_STEP).unwrap_or(f64::INFINITY);
    out.push(GradCase { name, err, tol });
}

pub fn toy_dsp() -> DspConfig {
    DspConfig {
        fft_size: 16,
        win_length: 16,
        hop_length: 8,
        n_mels: 4,
        ..DspConfig::default()
    }
}

pub fn toy_identity() -> BiometricConfig {
    BiometricConfig {
        embed_dim: 4,
        face_size: 8,
        face_channels: 3,
        speech_channels: 3,
        n_mels: 4,
        kernel: 3,
        ..BiometricConfig::default()
    }
}

pub fn toy_separator(kind: SeparatorKind, fusion: FusionMode) -> SeparatorConfig {
    SeparatorConfig {
        kind,
        fusion,
        audio_channels: 4,
        visual_channels: 3,
        res_blocks: 1,
        mask_blocks: 2,
        kernel: 3,
        dsp: toy_dsp(),
        identity: toy_identity(),
    }
}

/// Element-wise, reduction, linear-algebra and shape operations.
pub fn op_cases() -> Vec<GradCase> {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let mut out = Vec::new();
    let a = rand_t(&[2, 3, 4], -1.0, 1.0, &mut rng);
    let b = rand_t(&[2, 3, 4], -1.0, 1.0, &mut rng);
    let pos = rand_t(&[2, 3, 4], 0.2, 2.0, &mut rng);

    case(&mut out, "add", SMOOTH_TOL, &[a.clone(), b.clone()], |g, v| {
        let y = g.add(v[0], v[1])?;
        weighted(g, y, 1)
    });
    case(&mut out, "sub", SMOOTH_TOL, &[a.clone(), b.clone()], |g, v| {
        let y = g.sub(v[0], v[1])?;
        weighted(g, y, 2)
    });
    case(&mut out, "mul", SMOOTH_TOL, &[a.clone(), b.clone()], |g, v| {
        let y = g.mul(v[0], v[1])?;
        weighted(g, y, 3)
    });
    case(&mut out, "scale", SMOOTH_TOL, &[a.clone()], |g, v| {
        let y = g.scale(v[0], -1.7);
        weighted(g, y, 4)
    });
    case(&mut out, "square", SMOOTH_TOL, &[a.clone()], |g, v| {
        let y = g.square(v[0]);
        weighted(g, y, 5)
    });
    case(&mut out, "sigmoid", SMOOTH_TOL, &[a.clone()], |g, v| {
        let y = g.sigmoid(v[0]);
        weighted(g, y, 6)
    });
    case(&mut out, "log_floor", SMOOTH_TOL, &[pos.clone()], |g, v| {
        let y = g.log_floor(v[0], LOSS_FLOOR);
        weighted(g, y, 7)
    });
    case(&mut out, "relu", GENERAL_TOL, &[signed_t(&[2, 3, 4], 0.1, 1.0, &mut rng)], |g, v| {
        let y = g.relu(v[0]);
        weighted(g, y, 8)
    });
    case(&mut out, "sum", GENERAL_TOL, &[a.clone()], |g, v| {
        let s = g.sum(v[0]);
        Ok(g.square(s))
    });
    case(&mut out, "mean", GENERAL_TOL, &[a.clone()], |g, v| {
        let s = g.mean(v[0]);
        Ok(g.square(s))
    });
    case(&mut out, "mean_per_sample", GENERAL_TOL, &[a.clone()], |g, v| {
        let y = g.mean_per_sample(v[0])?;
        weighted(g, y, 9)
    });
    case(
        &mut out,
        "dense",
        GENERAL_TOL,
        &[rand_t(&[3, 4], -1.0, 1.0, &mut rng), rand_t(&[5, 4], -1.0, 1.0, &mut rng), rand_t(&[5], -1.0, 1.0, &mut rng)],
        |g, v| {
            let y = g.dense(v[0], v[1], v[2])?;
            weighted(g, y, 10)
        },
    );
    for (name, k) in [("conv1d k=1", 1usize), ("conv1d k=3", 3), ("conv1d k=5", 5)] {
        case(
            &mut out,
            name,
            GENERAL_TOL,
            &[
                rand_t(&[2, 3, 6], -1.0, 1.0, &mut rng),
                rand_t(&[4, 3, k], -1.0, 1.0, &mut rng),
                rand_t(&[4], -1.0, 1.0, &mut rng),
            ],
            |g, v| {
                let y = g.conv1d(v[0], v[1], v[2])?;
                weighted(g, y, 11)
            },
        );
    }
    for (name, train) in [("batch_norm train", true), ("batch_norm eval", false)] {
        let mut store = ParamStore::<f64>::new();
        let layer = BatchNorm::new(&mut store, "bn", 3).unwrap();
        let x = rand_t(&[3, 3, 4], -2.0, 2.0, &mut rng);
        case(&mut out, name, GENERAL_TOL, &[x], |g, v| {
            let y = layer.forward(g, &store, Ctx { train, trainable: true }, v[0])?;
            weighted(g, y, 12)
        });
    }
    case(
        &mut out,
        "concat_channels",
        GENERAL_TOL,
        &[a.clone(), rand_t(&[2, 2, 4], -1.0, 1.0, &mut rng)],
        |g, v| {
            let y = g.concat_channels(v[0], v[1])?;
            weighted(g, y, 13)
        },
    );
    case(&mut out, "slice_channels", GENERAL_TOL, &[a.clone()], |g, v| {
        let y = g.slice_channels(v[0], 1, 2)?;
        weighted(g, y, 14)
    });
    case(&mut out, "broadcast_time", GENERAL_TOL, &[rand_t(&[2, 3], -1.0, 1.0, &mut rng)], |g, v| {
        let y = g.broadcast_time(v[0], 5)?;
        weighted(g, y, 15)
    });
    case(
        &mut out,
        "mul_frames",
        GENERAL_TOL,
        &[a.clone(), rand_t(&[2, 1, 4], -1.0, 1.0, &mut rng)],
        |g, v| {
            let y = g.mul_frames(v[0], v[1])?;
            weighted(g, y, 16)
        },
    );
    case(&mut out, "mean_time", GENERAL_TOL, &[a.clone()], |g, v| {
        let y = g.mean_time(v[0])?;
        weighted(g, y, 17)
    });
    case(&mut out, "avg_pool2", GENERAL_TOL, &[a.clone()], |g, v| {
        let y = g.avg_pool2(v[0])?;
        weighted(g, y, 18)
    });
    case(&mut out, "reshape", GENERAL_TOL, &[a.clone()], |g, v| {
        let y = g.reshape(v[0], &[6, 4])?;
        weighted(g, y, 19)
    });
    case(&mut out, "l2_normalize", GENERAL_TOL, &[rand_t(&[3, 5], -1.0, 1.0, &mut rng)], |g, v| {
        let y = g.l2_normalize(v[0])?;
        weighted(g, y, 20)
    });
    case(
        &mut out,
        "cosine_rows",
        GENERAL_TOL,
        &[rand_t(&[3, 5], -1.0, 1.0, &mut rng), rand_t(&[3, 5], -1.0, 1.0, &mut rng)],
        |g, v| {
            let y = g.cosine_rows(v[0], v[1])?;
            weighted(g, y, 21)
        },
    );
    case(&mut out, "repeat_rows", GENERAL_TOL, &[rand_t(&[2, 3], -1.0, 1.0, &mut rng)], |g, v| {
        let y = g.repeat_rows(v[0], 3)?;
        weighted(g, y, 22)
    });
    case(
        &mut out,
        "softmax_cross_entropy",
        GENERAL_TOL,
        &[rand_t(&[3, 4], -2.0, 2.0, &mut rng)],
        |g, v| g.softmax_cross_entropy(v[0], &[0, 3, 1]),
    );
    // Pairs kept well apart so the selection is stable under the probe step.
    let ma = Tensor::from_f64(&[4], &[0.3, -0.8, 1.2, 0.1]).unwrap();
    let mb = Tensor::from_f64(&[4], &[0.9, -1.5, 0.2, 0.6]).unwrap();
    case(&mut out, "min_pair", GENERAL_TOL, &[ma, mb], |g, v| {
        let y = g.min_pair(v[0], v[1])?;
        weighted(g, y, 23)
    });
    out
}

struct ToyBatch {
    log_mix: Tensor<f64>,
    mix: Tensor<f64>,
    target: Tensor<f64>,
    target_log: Tensor<f64>,
    inter_log: Tensor<f64>,
    emb: Tensor<f64>,
}

fn toy_batch(bins: usize, frames: usize, d: usize, rng: &mut ChaCha8Rng) -> ToyBatch {
    let shape = [2, bins, frames];
    let mix = rand_t(&shape, 0.05, 2.0, rng);
    let target = rand_t(&shape, 0.05, 1.5, rng);
    let inter = rand_t(&shape, 0.05, 1.5, rng);
    let ln = |t: &Tensor<f64>| Tensor::new(&shape, t.data().iter().map(|v| v.max(LOSS_FLOOR).ln()).collect()).unwrap();
    ToyBatch {
        log_mix: ln(&mix),
        target_log: ln(&target),
        inter_log: ln(&inter),
        mix,
        target,
        emb: rand_t(&[2, d], -0.5, 0.5, rng),
    }
}

const PARAM_PROBES: usize = 4;

/// L_SS, L_SRL, L_TOT and the PIT loss through toy separators, with respect to every weight.
pub fn loss_cases() -> Vec<GradCase> {
    let mut out = Vec::new();
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let cfg = toy_separator(SeparatorKind::Conditioned, FusionMode::Attention);
    let mut store = ParamStore::<f64>::new();
    let net = SeparatorNet::new(&mut store, &cfg, &mut rng).unwrap();
    let frames = 8;
    let batch = toy_batch(cfg.dsp.freq_bins(), frames, cfg.identity.embed_dim, &mut rng);
    let fb = mel_filterbank(&cfg.dsp).unwrap();
    let ctx = Ctx::TRAIN;
    // Extractor in inference mode but differentiable, as when its weights are fine-tuned.
    let srl_ctx = Ctx { train: false, trainable: true };

    let masks = |g: &mut Graph<f64>, p: &ParamStore<f64>| -> Result<Var> {
        let x = g.constant(batch.log_mix.clone());
        let e = g.constant(batch.emb.clone());
        net.masks(g, p, ctx, cfg.fusion, x, Some(e))
    };
    let ss = |g: &mut Graph<f64>, p: &ParamStore<f64>| -> Result<Var> {
        let m = masks(g, p)?;
        let mix = g.constant(batch.mix.clone());
        let t = g.constant(batch.target_log.clone());
        loss_ss_graph(g, m, mix, t)
    };
    let srl = |g: &mut Graph<f64>, p: &ParamStore<f64>| -> Result<Var> {
        let m = masks(g, p)?;
        let mix = g.constant(batch.mix.clone());
        let masked = g.mul(m, mix)?;
        let t = g.constant(batch.target.clone());
        let mel = mel_kernel(g, &fb)?;
        loss_srl_graph(g, net.srl.as_ref().unwrap(), p, srl_ctx, masked, t, mel, &cfg.dsp)
    };
    let err = grad_check_params(&store, ss, DEFAULT_STEP, PARAM_PROBES).unwrap_or(f64::INFINITY);
    out.push(GradCase { name: "L_SS (separator weights)", err, tol: GENERAL_TOL });
    let err = grad_check_params(&store, srl, DEFAULT_STEP, PARAM_PROBES).unwrap_or(f64::INFINITY);
    out.push(GradCase { name: "L_SRL (separator and extractor weights)", err, tol: GENERAL_TOL });
    let tot = |g: &mut Graph<f64>, p: &ParamStore<f64>| -> Result<Var> {
        let a = ss(g, p)?;
        let b = srl(g, p)?;
        loss_total_graph(g, a, b, 1.0)
    };
    let err = grad_check_params(&store, tot, DEFAULT_STEP, PARAM_PROBES).unwrap_or(f64::INFINITY);
    out.push(GradCase { name: "L_TOT (all weights)", err, tol: GENERAL_TOL });

    // Uniform fusion exercises the path without the attention head.
    let ucfg = toy_separator(SeparatorKind::Conditioned, FusionMode::Uniform);
    let mut ustore = ParamStore::<f64>::new();
    let unet = SeparatorNet::new(&mut ustore, &ucfg, &mut rng).unwrap();
    let uss = |g: &mut Graph<f64>, p: &ParamStore<f64>| -> Result<Var> {
        let x = g.constant(batch.log_mix.clone());
        let e = g.constant(batch.emb.clone());
        let m = unet.masks(g, p, ctx, FusionMode::Uniform, x, Some(e))?;
        let mix = g.constant(batch.mix.clone());
        let t = g.constant(batch.target_log.clone());
        loss_ss_graph(g, m, mix, t)
    };
    let err = grad_check_params(&ustore, uss, DEFAULT_STEP, PARAM_PROBES).unwrap_or(f64::INFINITY);
    out.push(GradCase { name: "L_SS uniform fusion", err, tol: GENERAL_TOL });

    let pcfg = toy_separator(SeparatorKind::Pit, FusionMode::Attention);
    let mut pstore = ParamStore::<f64>::new();
    let pnet = SeparatorNet::new(&mut pstore, &pcfg, &mut rng).unwrap();
    let pit = |g: &mut Graph<f64>, p: &ParamStore<f64>| -> Result<Var> {
        let x = g.constant(batch.log_mix.clone());
        let m = pnet.masks(g, p, ctx, pcfg.fusion, x, None)?;
        let mix = g.constant(batch.mix.clone());
        let t = g.constant(batch.target_log.clone());
        let i = g.constant(batch.inter_log.clone());
        Ok(pit_loss_graph(g, m, mix, (t, i))?.0)
    };
    let err = grad_check_params(&pstore, pit, DEFAULT_STEP, PARAM_PROBES).unwrap_or(f64::INFINITY);
    out.push(GradCase { name: "PIT loss (baseline weights)", err, tol: GENERAL_TOL });

    // Loss graphs with respect to their mask / magnitude inputs.
    let bins = cfg.dsp.freq_bins();
    let mask_in = rand_t(&[2, bins, frames], 0.05, 0.95, &mut rng);
    case(&mut out, "L_SS (mask input)", GENERAL_TOL, &[mask_in.clone()], |g, v| {
        let mix = g.constant(batch.mix.clone());
        let t = g.constant(batch.target_log.clone());
        loss_ss_graph(g, v[0], mix, t)
    });
    let mut sstore = ParamStore::<f64>::new();
    let stream = speech_stream(&mut sstore, "g", &cfg.identity, &mut rng).unwrap();
    case(&mut out, "L_SRL (masked magnitude input)", GENERAL_TOL, &[batch.mix.clone()], |g, v| {
        let t = g.constant(batch.target.clone());
        let mel = mel_kernel(g, &fb)?;
        loss_srl_graph(g, &stream, &sstore, Ctx::EVAL, v[0], t, mel, &cfg.dsp)
    });
    let two = rand_t(&[2, 2 * bins, frames], 0.05, 0.95, &mut rng);
    case(&mut out, "PIT loss (mask input)", GENERAL_TOL, &[two], |g, v| {
        let mix = g.constant(batch.mix.clone());
        let t = g.constant(batch.target_log.clone());
        let i = g.constant(batch.inter_log.clone());
        Ok(pit_loss_graph(g, v[0], mix, (t, i))?.0)
    });
    out
}
