//! Separation losses as graph operations, plus scalar entry points for single grids.

use crate::biometric::{BiometricModel, Stream};
use crate::dsp::{log_mel, mel_filterbank, DspConfig, MelFilterbank};
use crate::error::{Error, Result};
use crate::numerics::{cosine_similarity, Ctx, Graph, ParamStore, Real, Tensor, Var};

/// Floor inside both logarithms of the masked-spectrum loss.
pub const LOSS_FLOOR: f64 = 1e-3;

/// Per-sample `mean((ln max(X, ε) − ln max(mask⊙S, ε))²)`, giving `[B]`.
/// `target_log` holds `ln max(X, ε)` and must be a constant.
pub fn loss_ss_per_sample<T: Real>(g: &mut Graph<T>, mask: Var, mix_mag: Var, target_log: Var) -> Result<Var> {
    let masked = g.mul(mask, mix_mag)?;
    let lm = g.log_floor(masked, T::lit(LOSS_FLOOR));
    let d = g.sub(target_log, lm)?;
    let sq = g.square(d);
    g.mean_per_sample(sq)
}

/// Mean over every bin of every sample.
pub fn loss_ss_graph<T: Real>(g: &mut Graph<T>, mask: Var, mix_mag: Var, target_log: Var) -> Result<Var> {
    let per = loss_ss_per_sample(g, mask, mix_mag, target_log)?;
    Ok(g.mean(per))
}

/// Mel filterbank as a constant kernel-1 convolution `[n_mels, bins, 1]`.
pub fn mel_kernel<T: Real>(g: &mut Graph<T>, fb: &MelFilterbank) -> Result<(Var, Var)> {
    let w = g.constant(Tensor::from_f64(&[fb.n_mels, fb.freq_bins, 1], &fb.weights)?);
    let b = g.constant(Tensor::zeros(&[fb.n_mels]));
    Ok((w, b))
}

/// Log-mel features of a `[B, bins, T]` magnitude variable.
pub fn log_mel_graph<T: Real>(g: &mut Graph<T>, mag: Var, mel: (Var, Var), floor: f64) -> Result<Var> {
    let m = g.conv1d(mag, mel.0, mel.1)?;
    Ok(g.log_floor(m, T::lit(floor)))
}

/// `1 − mean_b cos(g(logmel(X_b)), g(logmel(Ŷ_b)))` with the identity stream `stream`.
#[allow(clippy::too_many_arguments)]
pub fn loss_srl_graph<T: Real>(
    g: &mut Graph<T>,
    stream: &Stream,
    p: &ParamStore<T>,
    ctx: Ctx,
    masked: Var,
    target_mag: Var,
    mel: (Var, Var),
    dsp: &DspConfig,
) -> Result<Var> {
    let est = log_mel_graph(g, masked, mel, dsp.log_floor)?;
    let refm = log_mel_graph(g, target_mag, mel, dsp.log_floor)?;
    let e_est = stream.forward(g, p, ctx, est)?;
    let e_ref = stream.forward(g, p, ctx, refm)?;
    let cos = g.cosine_rows(e_ref, e_est)?;
    let mean = g.mean(cos);
    let one = g.constant(Tensor::scalar(T::one()));
    g.sub(one, mean)
}

/// `l_ss + λ·l_srl`.
pub fn loss_total_graph<T: Real>(g: &mut Graph<T>, l_ss: Var, l_srl: Var, lambda: f64) -> Result<Var> {
    let w = g.scale(l_srl, T::lit(lambda));
    g.add(l_ss, w)
}

/// Permutation-invariant loss over two masks stacked as `[B, 2·bins, T]`.
/// Returns the batch-mean loss and, per sample, whether the swapped assignment won.
pub fn pit_loss_graph<T: Real>(
    g: &mut Graph<T>,
    masks: Var,
    mix_mag: Var,
    ref_logs: (Var, Var),
) -> Result<(Var, Vec<bool>)> {
    let bins = g.shape(masks)[1] / 2;
    let m1 = g.slice_channels(masks, 0, bins)?;
    let m2 = g.slice_channels(masks, bins, bins)?;
    let a11 = loss_ss_per_sample(g, m1, mix_mag, ref_logs.0)?;
    let a22 = loss_ss_per_sample(g, m2, mix_mag, ref_logs.1)?;
    let a12 = loss_ss_per_sample(g, m1, mix_mag, ref_logs.1)?;
    let a21 = loss_ss_per_sample(g, m2, mix_mag, ref_logs.0)?;
    let ident = g.add(a11, a22)?;
    let swap = g.add(a12, a21)?;
    let best = g.min_pair(ident, swap)?;
    let choice = g.min_pair_choice(best).unwrap_or_default().to_vec();
    Ok((g.mean(best), choice))
}

fn check_grid(what: &'static str, a: &[f64], b: &[f64]) -> Result<()> {
    if a.len() != b.len() {
        return Err(Error::dim(what, &[a.len()], &[b.len()]));
    }
    if a.iter().chain(b).any(|&v| v < 0.0 || !v.is_finite()) {
        return Err(Error::Argument(format!("{what}: magnitudes must be finite and non-negative")));
    }
    Ok(())
}

fn log_floor_tensor(x: &[f64]) -> Tensor<f64> {
    Tensor::new(&[1, x.len()], x.iter().map(|v| v.max(LOSS_FLOOR).ln()).collect()).expect("length")
}

/// Masked-spectrum log MSE for one grid (all slices share a length).
pub fn loss_ss(mask: &[f64], mix_mag: &[f64], target_mag: &[f64]) -> Result<f64> {
    check_grid("loss_ss", mix_mag, target_mag)?;
    if mask.len() != mix_mag.len() {
        return Err(Error::dim("loss_ss", &[mask.len()], &[mix_mag.len()]));
    }
    let n = mask.len();
    let mut g = Graph::<f64>::new();
    let m = g.input(Tensor::new(&[1, n], mask.to_vec())?, false);
    let s = g.constant(Tensor::new(&[1, n], mix_mag.to_vec())?);
    let x = g.constant(log_floor_tensor(target_mag));
    let l = loss_ss_graph(&mut g, m, s, x)?;
    Ok(g.scalar(l))
}

/// `1 − cos(g(logmel(X)), g(logmel(Ŷ)))` with the speech stream of `bio`, grids `bins × n_frames`.
pub fn loss_srl(
    masked_mag: &[f64],
    target_mag: &[f64],
    n_frames: usize,
    bio: &BiometricModel,
    dsp: &DspConfig,
) -> Result<f64> {
    check_grid("loss_srl", masked_mag, target_mag)?;
    let fb = mel_filterbank(dsp)?;
    let a = log_mel(masked_mag, n_frames, &fb, dsp)?;
    let b = log_mel(target_mag, n_frames, &fb, dsp)?;
    let e = bio.speech_embeddings(&[&b, &a])?;
    Ok(1.0 - loss_cosine(&e[0], &e[1]))
}

fn loss_cosine(a: &[f32], b: &[f32]) -> f64 {
    let a: Vec<f64> = a.iter().map(|&v| v as f64).collect();
    let b: Vec<f64> = b.iter().map(|&v| v as f64).collect();
    cosine_similarity(&a, &b)
}

/// Representation loss directly from two embeddings.
pub fn srl_from_embeddings(reference: &[f64], estimate: &[f64]) -> f64 {
    1.0 - cosine_similarity(reference, estimate)
}

pub fn loss_total(l_ss: f64, l_srl: f64, lambda: f64) -> f64 {
    l_ss + lambda * l_srl
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Permutation {
    Identity,
    Swapped,
}

/// Minimum over the two assignments of the summed per-pair masked-spectrum loss.
pub fn pit_loss(masks: [&[f64]; 2], mix_mag: &[f64], refs: [&[f64]; 2]) -> Result<(f64, Permutation)> {
    for r in refs {
        check_grid("pit_loss", mix_mag, r)?;
    }
    let n = mix_mag.len();
    if masks.iter().any(|m| m.len() != n) {
        return Err(Error::dim("pit_loss", &[masks[0].len(), masks[1].len()], &[n]));
    }
    let mut g = Graph::<f64>::new();
    let stacked: Vec<f64> = masks.concat();
    let m = g.input(Tensor::new(&[1, 2, n], stacked)?, false);
    let s = g.constant(Tensor::new(&[1, 1, n], mix_mag.to_vec())?);
    let r0 = g.constant(log_floor_tensor(refs[0]).reshape(&[1, 1, n])?);
    let r1 = g.constant(log_floor_tensor(refs[1]).reshape(&[1, 1, n])?);
    let (l, choice) = pit_loss_graph(&mut g, m, s, (r0, r1))?;
    let perm = if choice[0] { Permutation::Swapped } else { Permutation::Identity };
    Ok((g.scalar(l), perm))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn loss_ss_examples() {
        let s = [2.0, 4.0, 1.0];
        let x = [1.0, 4.0, 0.5];
        assert_eq!(loss_ss(&[0.5, 1.0, 0.5], &s, &x).unwrap(), 0.0);
        let e = std::f64::consts::E;
        let l = loss_ss(&[0.5], &[2.0], &[e]).unwrap();
        assert!((l - 1.0).abs() < 1e-12);
        assert!(loss_ss(&[0.5], &[2.0, 1.0], &[1.0, 1.0]).is_err());
        assert!(loss_ss(&[0.5], &[-2.0], &[1.0]).is_err());
    }

    #[test]
    fn total_and_pit_examples() {
        assert_eq!(loss_total(2.0, 0.5, 1.0), 2.5);
        assert_eq!(loss_total(2.0, 0.5, 0.0), 2.0);
        assert_eq!(loss_total(0.0, 0.0, 1.0), 0.0);
        let s = [2.0, 2.0, 2.0, 2.0];
        let r1 = [1.0, 2.0, 0.5, 1.5];
        let r2 = [1.0, 0.2, 1.5, 0.5];
        let m1 = [0.5, 1.0, 0.25, 0.75];
        let m2 = [0.5, 0.1, 0.75, 0.25];
        let (l, p) = pit_loss([&m1, &m2], &s, [&r1, &r2]).unwrap();
        assert_eq!((l, p), (0.0, Permutation::Identity));
        let (ls, ps) = pit_loss([&m1, &m2], &s, [&r2, &r1]).unwrap();
        assert_eq!((ls, ps), (l, Permutation::Swapped));
        let (_, tie) = pit_loss([&m1, &m1], &s, [&r1, &r2]).unwrap();
        assert_eq!(tie, Permutation::Identity);
    }
}
