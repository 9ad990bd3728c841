//! STFT / ISTFT, log-mel features and Griffin-Lim phase reconstruction.
//!
//! Frames are centered: the signal is reflect-padded by `win_length / 2` on both sides,
//! frame `t` covers padded samples `[t·hop, t·hop + win_length)`, and a clip of `n·hop`
//! samples yields exactly `n` frames. The Hann window occupies the first `win_length`
//! entries of each `fft_size` FFT buffer.
//!
//! [`istft`] is the exact least-squares inverse of [`stft`], including the reflected
//! padding, which makes every Griffin-Lim iteration a true projection.

use std::sync::Arc;

use num_complex::Complex64;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rustfft::{Fft, FftPlanner};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DspConfig {
    pub sample_rate: u32,
    pub fft_size: usize,
    pub win_length: usize,
    pub hop_length: usize,
    pub n_mels: usize,
    pub mel_fmin: f64,
    /// Upper mel edge in Hz; 0 means Nyquist.
    pub mel_fmax: f64,
    pub log_floor: f64,
}

impl Default for DspConfig {
    fn default() -> Self {
        Self {
            sample_rate: 16_000,
            fft_size: 512,
            win_length: 400,
            hop_length: 160,
            n_mels: 40,
            mel_fmin: 0.0,
            mel_fmax: 0.0,
            log_floor: 1e-3,
        }
    }
}

impl DspConfig {
    pub fn freq_bins(&self) -> usize {
        self.fft_size / 2 + 1
    }

    pub fn nyquist(&self) -> f64 {
        self.sample_rate as f64 / 2.0
    }

    pub fn fmax(&self) -> f64 {
        if self.mel_fmax > 0.0 {
            self.mel_fmax
        } else {
            self.nyquist()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.win_length == 0 || self.hop_length == 0 || self.fft_size == 0 {
            return Err(Error::Config("STFT sizes must be positive".into()));
        }
        if self.win_length > self.fft_size {
            return Err(Error::Config(format!(
                "win_length {} exceeds fft_size {}",
                self.win_length, self.fft_size
            )));
        }
        if self.hop_length > self.win_length {
            return Err(Error::Config(format!(
                "hop_length {} exceeds win_length {}",
                self.hop_length, self.win_length
            )));
        }
        if self.n_mels == 0 || self.n_mels >= self.freq_bins() {
            return Err(Error::Config(format!(
                "n_mels {} must be in 1..{}",
                self.n_mels,
                self.freq_bins()
            )));
        }
        if self.fmax() > self.nyquist() || self.mel_fmin < 0.0 || self.mel_fmin >= self.fmax() {
            return Err(Error::Config(format!(
                "mel range [{}, {}] must lie inside [0, {}]",
                self.mel_fmin,
                self.fmax(),
                self.nyquist()
            )));
        }
        if self.log_floor <= 0.0 {
            return Err(Error::Config("log_floor must be positive".into()));
        }
        Ok(())
    }

    /// Frames produced for a clip of `len` samples.
    pub fn frames_for(&self, len: usize) -> usize {
        len.div_ceil(self.hop_length)
    }

    /// Periodic Hann window of `win_length` samples.
    pub fn window(&self) -> Vec<f64> {
        let n = self.win_length as f64;
        (0..self.win_length)
            .map(|i| 0.5 - 0.5 * (2.0 * std::f64::consts::PI * i as f64 / n).cos())
            .collect()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct AudioClip {
    pub samples: Vec<f64>,
    pub sample_rate: u32,
}

impl AudioClip {
    pub fn new(samples: Vec<f64>, sample_rate: u32) -> Self {
        Self {
            samples,
            sample_rate,
        }
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn duration_s(&self) -> f64 {
        self.samples.len() as f64 / self.sample_rate as f64
    }

    pub fn energy(&self) -> f64 {
        self.samples.iter().map(|v| v * v).sum()
    }
}

/// Complex STFT on a `freq_bins × n_frames` grid, stored frequency-major.
#[derive(Clone, Debug, PartialEq)]
pub struct Spectrogram {
    pub freq_bins: usize,
    pub n_frames: usize,
    pub data: Vec<Complex64>,
}

impl Spectrogram {
    pub fn zeros(freq_bins: usize, n_frames: usize) -> Self {
        Self {
            freq_bins,
            n_frames,
            data: vec![Complex64::new(0.0, 0.0); freq_bins * n_frames],
        }
    }

    pub fn at(&self, bin: usize, frame: usize) -> Complex64 {
        self.data[bin * self.n_frames + frame]
    }

    pub fn magnitude(&self) -> Vec<f64> {
        self.data.iter().map(|c| c.norm()).collect()
    }

    /// Unit phasors; bins with zero magnitude get phase 0.
    pub fn phase(&self) -> Vec<Complex64> {
        self.data
            .iter()
            .map(|c| {
                let n = c.norm();
                if n > 0.0 {
                    c / n
                } else {
                    Complex64::new(1.0, 0.0)
                }
            })
            .collect()
    }

    /// Magnitude `mag` combined with this spectrogram's phase.
    pub fn with_magnitude(&self, mag: &[f64]) -> Result<Spectrogram> {
        if mag.len() != self.data.len() {
            return Err(Error::dim(
                "with_magnitude",
                &[self.freq_bins, self.n_frames],
                &[mag.len()],
            ));
        }
        Ok(Spectrogram {
            freq_bins: self.freq_bins,
            n_frames: self.n_frames,
            data: self.phase().iter().zip(mag).map(|(p, &m)| p * m).collect(),
        })
    }

    pub fn scaled(&self, c: f64) -> Spectrogram {
        Spectrogram {
            data: self.data.iter().map(|v| v * c).collect(),
            ..self.clone()
        }
    }
}

struct Plans {
    forward: Arc<dyn Fft<f64>>,
    inverse: Arc<dyn Fft<f64>>,
}

fn plans(n: usize) -> Plans {
    let mut planner = FftPlanner::new();
    Plans {
        forward: planner.plan_fft_forward(n),
        inverse: planner.plan_fft_inverse(n),
    }
}

/// Index into the original signal for a position in the reflect-padded signal.
fn reflect(j: isize, len: usize) -> usize {
    let n = len as isize;
    let mut i = j;
    if n == 1 {
        return 0;
    }
    loop {
        if i < 0 {
            i = -i;
        } else if i >= n {
            i = 2 * (n - 1) - i;
        } else {
            return i as usize;
        }
    }
}

pub fn stft(clip: &AudioClip, cfg: &DspConfig) -> Result<Spectrogram> {
    if clip.sample_rate != cfg.sample_rate {
        return Err(Error::Config(format!(
            "clip sample rate {} does not match configured {}",
            clip.sample_rate, cfg.sample_rate
        )));
    }
    if clip.len() < cfg.win_length {
        return Err(Error::Argument(format!(
            "clip of {} samples is shorter than the {}-sample window",
            clip.len(),
            cfg.win_length
        )));
    }
    Ok(stft_samples(&clip.samples, cfg, &plans(cfg.fft_size)))
}

fn stft_samples(x: &[f64], cfg: &DspConfig, plans: &Plans) -> Spectrogram {
    let len = x.len();
    let n_frames = cfg.frames_for(len);
    let bins = cfg.freq_bins();
    let pad = (cfg.win_length / 2) as isize;
    let window = cfg.window();
    let mut spec = Spectrogram::zeros(bins, n_frames);
    let mut buf = vec![Complex64::new(0.0, 0.0); cfg.fft_size];
    for t in 0..n_frames {
        buf.iter_mut().for_each(|c| *c = Complex64::new(0.0, 0.0));
        let start = (t * cfg.hop_length) as isize - pad;
        for (n, w) in window.iter().enumerate() {
            buf[n] = Complex64::new(w * x[reflect(start + n as isize, len)], 0.0);
        }
        plans.forward.process(&mut buf);
        for k in 0..bins {
            spec.data[k * n_frames + t] = buf[k];
        }
    }
    spec
}

/// Least-squares inverse of [`stft`] producing `n_frames · hop` samples.
pub fn istft(spec: &Spectrogram, cfg: &DspConfig) -> Result<AudioClip> {
    let len = spec.n_frames * cfg.hop_length;
    istft_len(spec, cfg, len, &plans(cfg.fft_size))
}

fn istft_len(spec: &Spectrogram, cfg: &DspConfig, len: usize, plans: &Plans) -> Result<AudioClip> {
    let bins = cfg.freq_bins();
    if spec.freq_bins != bins || spec.data.len() != bins * spec.n_frames {
        return Err(Error::dim(
            "istft",
            &[spec.freq_bins, spec.n_frames],
            &[bins, spec.n_frames],
        ));
    }
    if len < cfg.win_length {
        return Err(Error::Argument(format!(
            "cannot invert {} frames into fewer than {} samples",
            spec.n_frames, cfg.win_length
        )));
    }
    let n = cfg.fft_size;
    let pad = (cfg.win_length / 2) as isize;
    let window = cfg.window();
    let mut num = vec![0.0; len];
    let mut den = vec![0.0; len];
    let mut buf = vec![Complex64::new(0.0, 0.0); n];
    let scale = 1.0 / n as f64;
    for t in 0..spec.n_frames {
        for k in 0..bins {
            buf[k] = spec.data[k * spec.n_frames + t];
        }
        // Hermitian completion; DC and Nyquist are taken as real.
        buf[0].im = 0.0;
        if n % 2 == 0 {
            buf[n / 2].im = 0.0;
        }
        for k in bins..n {
            buf[k] = buf[n - k].conj();
        }
        plans.inverse.process(&mut buf);
        let start = (t * cfg.hop_length) as isize - pad;
        for (i, w) in window.iter().enumerate() {
            let j = reflect(start + i as isize, len);
            num[j] += w * buf[i].re * scale;
            den[j] += w * w;
        }
    }
    let mut samples = Vec::with_capacity(len);
    for (i, (a, d)) in num.iter().zip(&den).enumerate() {
        if *d <= 1e-12 {
            return Err(Error::Argument(format!(
                "zero window normalization at sample {i}"
            )));
        }
        samples.push(a / d);
    }
    Ok(AudioClip::new(samples, cfg.sample_rate))
}

pub fn hz_to_mel(f: f64) -> f64 {
    2595.0 * (1.0 + f / 700.0).log10()
}

pub fn mel_to_hz(m: f64) -> f64 {
    700.0 * (10f64.powf(m / 2595.0) - 1.0)
}

/// Triangular mel filters, `n_mels × freq_bins`, row-major.
#[derive(Clone, Debug, PartialEq)]
pub struct MelFilterbank {
    pub n_mels: usize,
    pub freq_bins: usize,
    pub weights: Vec<f64>,
    /// Filter edges in Hz: `n_mels + 2` points (left, center..., right).
    pub edges_hz: Vec<f64>,
}

impl MelFilterbank {
    pub fn row(&self, m: usize) -> &[f64] {
        &self.weights[m * self.freq_bins..(m + 1) * self.freq_bins]
    }

    pub fn peak_hz(&self) -> &[f64] {
        &self.edges_hz[1..=self.n_mels]
    }
}

pub fn mel_filterbank(cfg: &DspConfig) -> Result<MelFilterbank> {
    cfg.validate()?;
    let bins = cfg.freq_bins();
    let (lo, hi) = (hz_to_mel(cfg.mel_fmin), hz_to_mel(cfg.fmax()));
    let edges_hz: Vec<f64> = (0..cfg.n_mels + 2)
        .map(|i| mel_to_hz(lo + (hi - lo) * i as f64 / (cfg.n_mels + 1) as f64))
        .collect();
    let bin_hz = cfg.sample_rate as f64 / cfg.fft_size as f64;
    let mut weights = vec![0.0; cfg.n_mels * bins];
    for m in 0..cfg.n_mels {
        let (l, c, r) = (edges_hz[m], edges_hz[m + 1], edges_hz[m + 2]);
        let row = &mut weights[m * bins..(m + 1) * bins];
        for (k, w) in row.iter_mut().enumerate() {
            let f = k as f64 * bin_hz;
            *w = if f > l && f <= c {
                (f - l) / (c - l)
            } else if f > c && f < r {
                (r - f) / (r - c)
            } else {
                0.0
            };
        }
        if row.iter().all(|&w| w == 0.0) {
            // Narrower than one bin: give the filter its nearest bin.
            let k = ((c / bin_hz).round() as usize).min(bins - 1);
            row[k] = 1.0;
        }
    }
    Ok(MelFilterbank {
        n_mels: cfg.n_mels,
        freq_bins: bins,
        weights,
        edges_hz,
    })
}

/// Log-mel energies `ln(max(F·mag, floor))`, `n_mels × n_frames`, mel-major.
#[derive(Clone, Debug, PartialEq)]
pub struct LogMel {
    pub n_mels: usize,
    pub n_frames: usize,
    pub data: Vec<f64>,
}

pub fn log_mel(mag: &[f64], n_frames: usize, fb: &MelFilterbank, cfg: &DspConfig) -> Result<LogMel> {
    if mag.len() != fb.freq_bins * n_frames {
        return Err(Error::dim("log_mel", &[fb.freq_bins, n_frames], &[mag.len()]));
    }
    if mag.iter().any(|&m| m < 0.0) {
        return Err(Error::Argument("negative magnitude in log_mel input".into()));
    }
    let mut data = vec![0.0; fb.n_mels * n_frames];
    for m in 0..fb.n_mels {
        let row = fb.row(m);
        let out = &mut data[m * n_frames..(m + 1) * n_frames];
        for (k, &w) in row.iter().enumerate() {
            if w == 0.0 {
                continue;
            }
            let src = &mag[k * n_frames..(k + 1) * n_frames];
            out.iter_mut().zip(src).for_each(|(o, &s)| *o += w * s);
        }
        out.iter_mut().for_each(|v| *v = v.max(cfg.log_floor).ln());
    }
    Ok(LogMel {
        n_mels: fb.n_mels,
        n_frames,
        data,
    })
}

pub const DEFAULT_GL_ITERS: usize = 32;

/// Griffin-Lim output with the spectral-convergence error after each iteration.
#[derive(Clone, Debug)]
pub struct GriffinLimResult {
    pub clip: AudioClip,
    /// `‖|stft(x_k)| − target‖_F` for `k = 1..=n_iters`.
    pub errors: Vec<f64>,
}

/// Phase reconstruction for a `freq_bins × n_frames` magnitude grid.
///
/// Iteration 1 inverts `target · e^{iφ₀}`; every later iteration inverts
/// `target · phase(stft(x))`. `φ₀` is drawn uniformly from `seed` unless `init_phase`
/// supplies a starting spectrogram whose phase is used instead.
pub fn griffin_lim(
    target: &[f64],
    n_frames: usize,
    cfg: &DspConfig,
    n_iters: usize,
    seed: u64,
    init_phase: Option<&Spectrogram>,
) -> Result<GriffinLimResult> {
    let bins = cfg.freq_bins();
    if target.len() != bins * n_frames {
        return Err(Error::dim("griffin_lim", &[bins, n_frames], &[target.len()]));
    }
    if n_iters == 0 {
        return Err(Error::Argument("griffin_lim needs at least one iteration".into()));
    }
    if let Some(bad) = target.iter().find(|&&m| m < 0.0 || !m.is_finite()) {
        return Err(Error::Argument(format!(
            "target magnitudes must be finite and non-negative, found {bad}"
        )));
    }
    let len = n_frames * cfg.hop_length;
    let plans = plans(cfg.fft_size);
    let start = match init_phase {
        Some(p) => {
            if p.freq_bins != bins || p.n_frames != n_frames {
                return Err(Error::dim(
                    "griffin_lim init",
                    &[bins, n_frames],
                    &[p.freq_bins, p.n_frames],
                ));
            }
            p.with_magnitude(target)?
        }
        None => {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let two_pi = 2.0 * std::f64::consts::PI;
            Spectrogram {
                freq_bins: bins,
                n_frames,
                data: target
                    .iter()
                    .map(|&m| Complex64::from_polar(m, rng.random::<f64>() * two_pi))
                    .collect(),
            }
        }
    };
    let mut x = istft_len(&start, cfg, len, &plans)?;
    let mut errors = Vec::with_capacity(n_iters);
    for k in 0..n_iters {
        let spec = stft_samples(&x.samples, cfg, &plans);
        let err = spec
            .data
            .iter()
            .zip(target)
            .map(|(c, &m)| (c.norm() - m).powi(2))
            .sum::<f64>()
            .sqrt();
        errors.push(err);
        if k + 1 == n_iters {
            break;
        }
        x = istft_len(&spec.with_magnitude(target)?, cfg, len, &plans)?;
    }
    Ok(GriffinLimResult { clip: x, errors })
}

pub fn frobenius(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}
