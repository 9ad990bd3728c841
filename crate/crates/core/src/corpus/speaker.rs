//! Synthetic speakers and their utterances.

use std::f64::consts::PI;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::dsp::AudioClip;
use crate::error::{Error, Result};

/// Coarse pitch register; the structural stand-in for the speaker-group breakdown.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum RegisterClass {
    Low,
    High,
}

impl RegisterClass {
    pub const ALL: [RegisterClass; 2] = [RegisterClass::Low, RegisterClass::High];

    pub fn f0_range(self) -> (f64, f64) {
        match self {
            RegisterClass::Low => (90.0, 140.0),
            RegisterClass::High => (180.0, 260.0),
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            RegisterClass::Low => "low",
            RegisterClass::High => "high",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "low" => Ok(RegisterClass::Low),
            "high" => Ok(RegisterClass::High),
            other => Err(Error::Argument(format!("unknown register class `{other}`"))),
        }
    }
}

impl std::fmt::Display for RegisterClass {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

const F0_SPAN: (f64, f64) = (90.0, 260.0);
const FORMANT_RANGES: [(f64, f64); 3] = [(300.0, 900.0), (900.0, 2500.0), (2500.0, 3600.0)];
const FORMANT_BANDWIDTHS: [f64; 3] = [90.0, 130.0, 180.0];
const VIBRATO_RATE: (f64, f64) = (4.0, 7.0);
const VIBRATO_DEPTH: (f64, f64) = (0.005, 0.03);
const TILT: (f64, f64) = (0.6, 1.4);
const EVEN_GAIN: (f64, f64) = (0.4, 1.0);
/// Harmonics above this frequency are not synthesized.
const HARMONIC_CEILING_HZ: f64 = 7000.0;
const PEAK: f64 = 0.5;
/// Samples per block over which harmonic amplitudes are held constant.
const BLOCK: usize = 80;

/// Harmonic amplitude shaping: `a_h ∝ h^(−tilt)`, even harmonics scaled by `even_gain`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TimbreWeights {
    pub tilt: f64,
    pub even_gain: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SpeakerProfile {
    pub speaker_id: String,
    pub register_class: RegisterClass,
    pub f0_base: f64,
    pub formant_centers: [f64; 3],
    pub vibrato_rate: f64,
    pub vibrato_depth: f64,
    pub timbre_weights: TimbreWeights,
    /// Every other field mapped to `[0, 1]` by its generating range.
    pub latent: Vec<f64>,
}

pub const LATENT_DIM: usize = 8;

fn unit(v: f64, (lo, hi): (f64, f64)) -> f64 {
    ((v - lo) / (hi - lo)).clamp(0.0, 1.0)
}

fn draw<R: Rng>(rng: &mut R, (lo, hi): (f64, f64)) -> f64 {
    lo + (hi - lo) * rng.random::<f64>()
}

impl SpeakerProfile {
    /// Recomputes the latent vector from the physical fields.
    pub fn compute_latent(&self) -> Vec<f64> {
        let mut z = vec![unit(self.f0_base, F0_SPAN)];
        for (f, r) in self.formant_centers.iter().zip(FORMANT_RANGES) {
            z.push(unit(*f, r));
        }
        z.push(unit(self.vibrato_rate, VIBRATO_RATE));
        z.push(unit(self.vibrato_depth, VIBRATO_DEPTH));
        z.push(unit(self.timbre_weights.tilt, TILT));
        z.push(unit(self.timbre_weights.even_gain, EVEN_GAIN));
        z
    }

    /// Relative harmonic amplitude at frequency `f` for harmonic number `h`.
    fn harmonic_gain(&self, h: usize, f: f64, formant_shift: &[f64; 3]) -> f64 {
        let mut env = 0.02;
        for k in 0..3 {
            let c = self.formant_centers[k] * formant_shift[k];
            let d = (f - c) / FORMANT_BANDWIDTHS[k];
            env += 1.0 / (1.0 + d * d);
        }
        let mut a = env * (h as f64).powf(-self.timbre_weights.tilt);
        if h % 2 == 0 {
            a *= self.timbre_weights.even_gain;
        }
        a
    }
}

/// Deterministic speaker from a seed; the id encodes class and seed.
pub fn make_speaker(seed: u64, register_class: RegisterClass) -> SpeakerProfile {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5EED_5BEA_4E11_0000);
    let f0_base = draw(&mut rng, register_class.f0_range());
    let formant_centers = FORMANT_RANGES.map(|r| draw(&mut rng, r));
    let vibrato_rate = draw(&mut rng, VIBRATO_RATE);
    let vibrato_depth = draw(&mut rng, VIBRATO_DEPTH);
    let timbre_weights = TimbreWeights {
        tilt: draw(&mut rng, TILT),
        even_gain: draw(&mut rng, EVEN_GAIN),
    };
    let mut p = SpeakerProfile {
        speaker_id: format!("{}-{seed:016x}", register_class.as_str()),
        register_class,
        f0_base,
        formant_centers,
        vibrato_rate,
        vibrato_depth,
        timbre_weights,
        latent: Vec::new(),
    };
    p.latent = p.compute_latent();
    p
}

/// Rebuilds a profile from an id produced by [`make_speaker`].
pub fn speaker_from_id(id: &str) -> Result<SpeakerProfile> {
    let bad = || Error::Format {
        field: "speaker_id".into(),
        detail: format!("`{id}` is not of the form <class>-<16 hex digits>"),
    };
    let (class, hex) = id.split_once('-').ok_or_else(bad)?;
    let class = RegisterClass::parse(class).map_err(|_| bad())?;
    if hex.len() != 16 {
        return Err(bad());
    }
    let seed = u64::from_str_radix(hex, 16).map_err(|_| bad())?;
    Ok(make_speaker(seed, class))
}

struct Syllable {
    start: usize,
    end: usize,
    formant_shift: [f64; 3],
    pitch_offset: f64,
}

fn plan_syllables<R: Rng>(rng: &mut R, n: usize, sr: f64) -> Vec<Syllable> {
    let mut out = Vec::new();
    let mut t = (draw(rng, (0.0, 0.12)) * sr) as usize;
    while t < n {
        let len = (draw(rng, (0.14, 0.38)) * sr) as usize;
        let end = (t + len).min(n);
        if end - t > (0.05 * sr) as usize {
            out.push(Syllable {
                start: t,
                end,
                formant_shift: [0.0; 3].map(|_| draw(rng, (0.9, 1.1))),
                pitch_offset: draw(rng, (-0.06, 0.06)),
            });
        }
        t = end + (draw(rng, (0.03, 0.16)) * sr) as usize;
    }
    out
}

/// Raised-cosine attack/release envelope over `len` samples.
fn envelope(i: usize, len: usize, ramp: usize) -> f64 {
    let ramp = ramp.min(len / 2).max(1);
    let edge = if i < ramp {
        i as f64 / ramp as f64
    } else if i + ramp >= len {
        (len - 1 - i) as f64 / ramp as f64
    } else {
        return 1.0;
    };
    0.5 - 0.5 * (PI * edge).cos()
}

/// A seeded utterance: voiced syllables with pauses, a drifting pitch contour with the
/// speaker's vibrato, shaped by the speaker's formants and timbre, peak-normalized to 0.5.
pub fn render_utterance(
    profile: &SpeakerProfile,
    duration_s: f64,
    sample_rate: u32,
    seed: u64,
) -> Result<AudioClip> {
    let sr = sample_rate as f64;
    let n_real = duration_s * sr;
    if !(n_real > 0.0) || (n_real - n_real.round()).abs() > 1e-6 {
        return Err(Error::Argument(format!(
            "duration {duration_s} s is not a whole number of samples at {sample_rate} Hz"
        )));
    }
    let n = n_real.round() as usize;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let syllables = plan_syllables(&mut rng, n, sr);

    // Slow pitch drift: a few low-frequency sinusoids.
    let drift: Vec<(f64, f64, f64)> = (0..3)
        .map(|_| {
            (
                draw(&mut rng, (0.2, 1.5)),
                draw(&mut rng, (0.0, 2.0 * PI)),
                draw(&mut rng, (0.01, 0.03)),
            )
        })
        .collect();
    let vib_phase = draw(&mut rng, (0.0, 2.0 * PI));

    let mut out = vec![0.0; n];
    let mut phase = draw(&mut rng, (0.0, 2.0 * PI));
    let ramp = (0.03 * sr) as usize;
    for syl in &syllables {
        let len = syl.end - syl.start;
        let mut gains: Vec<f64> = Vec::new();
        for block in (syl.start..syl.end).step_by(BLOCK) {
            let block_end = (block + BLOCK).min(syl.end);
            for i in block..block_end {
                let t = i as f64 / sr;
                let mut rel = syl.pitch_offset
                    + profile.vibrato_depth * (2.0 * PI * profile.vibrato_rate * t + vib_phase).sin();
                for &(rate, ph, depth) in &drift {
                    rel += depth * (2.0 * PI * rate * t + ph).sin();
                }
                let f0 = profile.f0_base * (1.0 + rel);
                if i == block {
                    let nh = (HARMONIC_CEILING_HZ / f0).floor().max(1.0) as usize;
                    gains.clear();
                    gains.extend(
                        (1..=nh).map(|h| profile.harmonic_gain(h, h as f64 * f0, &syl.formant_shift)),
                    );
                }
                phase = (phase + 2.0 * PI * f0 / sr) % (2.0 * PI);
                // sin(hφ) by the Chebyshev recurrence s_h = 2cosφ·s_{h−1} − s_{h−2}.
                let (s1, c2) = (phase.sin(), 2.0 * phase.cos());
                let (mut prev, mut cur) = (0.0, s1);
                let mut acc = 0.0;
                for &a in &gains {
                    acc += a * cur;
                    let next = c2 * cur - prev;
                    prev = cur;
                    cur = next;
                }
                out[i] = acc * envelope(i - syl.start, len, ramp);
            }
        }
    }
    let peak = out.iter().fold(0.0f64, |m, v| m.max(v.abs()));
    if peak > 0.0 {
        let s = PEAK / peak;
        out.iter_mut().for_each(|v| *v *= s);
    }
    Ok(AudioClip::new(out, sample_rate))
}
