//! Round-trip, grid-shape and phase-reconstruction checks at the default configuration.

use avsep::corpus::{make_speaker, render_utterance, RegisterClass};
use avsep::dsp::{frobenius, griffin_lim, istft, stft, AudioClip, DspConfig};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

pub const CLIP_SECONDS: f64 = 2.0;
pub const GL_ITERS: usize = 50;

pub fn noise_clip(len: usize, seed: u64) -> AudioClip {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    AudioClip::new((0..len).map(|_| StandardNormal.sample(&mut rng)).collect(), 16_000)
}

/// Relative RMS error away from the first and last window.
pub fn interior_rel_rms(x: &[f64], y: &[f64], edge: usize) -> f64 {
    let (xs, ys) = (&x[edge..x.len() - edge], &y[edge..y.len() - edge]);
    let num: f64 = xs.iter().zip(ys).map(|(a, b)| (a - b).powi(2)).sum();
    let den: f64 = xs.iter().map(|a| a * a).sum();
    (num / den).sqrt()
}

/// Worst interior round-trip error over `n` random clips.
pub fn worst_round_trip(n: u64) -> f64 {
    let cfg = DspConfig::default();
    let len = (CLIP_SECONDS * cfg.sample_rate as f64) as usize;
    (0..n)
        .map(|seed| {
            let x = noise_clip(len, 100 + seed);
            let y = istft(&stft(&x, &cfg).unwrap(), &cfg).unwrap();
            assert_eq!(y.len(), x.len());
            interior_rel_rms(&x.samples, &y.samples, cfg.win_length)
        })
        .fold(0.0, f64::max)
}

pub fn default_grid() -> (usize, usize) {
    let cfg = DspConfig::default();
    let s = stft(&noise_clip((CLIP_SECONDS * 16_000.0) as usize, 1), &cfg).unwrap();
    (s.freq_bins, s.n_frames)
}

pub struct GlOutcome {
    pub label: String,
    /// Relative spectral convergence `‖|STFT(x_k)| − S‖_F / ‖S‖_F` per iteration.
    pub curve: Vec<f64>,
    pub monotone: bool,
}

impl GlOutcome {
    pub fn last(&self) -> f64 {
        *self.curve.last().unwrap()
    }
}

pub fn gl_targets() -> Vec<(String, AudioClip)> {
    let mut out = Vec::new();
    for (i, class) in [RegisterClass::Low, RegisterClass::High, RegisterClass::Low].into_iter().enumerate() {
        let p = make_speaker(40 + i as u64, class);
        out.push((
            format!("utterance {}", p.speaker_id),
            render_utterance(&p, CLIP_SECONDS, 16_000, 7 + i as u64).unwrap(),
        ));
    }
    out.push(("white noise".into(), noise_clip(32_000, 3)));
    out
}

/// Plain Griffin-Lim from a seeded random phase on magnitudes of real signals.
pub fn gl_outcomes() -> Vec<GlOutcome> {
    let cfg = DspConfig::default();
    gl_targets()
        .into_iter()
        .map(|(label, clip)| {
            let s = stft(&clip, &cfg).unwrap();
            let target = s.magnitude();
            let norm = frobenius(&target);
            let res = griffin_lim(&target, s.n_frames, &cfg, GL_ITERS, 17, None).unwrap();
            let tol = 1e-7 * norm;
            let monotone = res.errors.windows(2).all(|w| w[1] <= w[0] + tol);
            GlOutcome {
                label,
                curve: res.errors.iter().map(|e| e / norm).collect(),
                monotone,
            }
        })
        .collect()
}
