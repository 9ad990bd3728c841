//! Procedural face stand-ins: grayscale images whose low-frequency layout is a fixed
//! function of a speaker's latent vector, plus per-render pixel noise.

use std::f64::consts::PI;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::corpus::speaker::{SpeakerProfile, LATENT_DIM};
use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct FaceConfig {
    /// Side length in pixels (the full-scale pipeline uses 224).
    pub size: usize,
    pub noise_std: f64,
}

impl Default for FaceConfig {
    fn default() -> Self {
        Self {
            size: 32,
            noise_std: 0.05,
        }
    }
}

impl FaceConfig {
    pub fn validate(&self) -> Result<()> {
        if self.size < 4 {
            return Err(Error::Config(format!("face size {} is below 4", self.size)));
        }
        if !(self.noise_std >= 0.0 && self.noise_std.is_finite()) {
            return Err(Error::Config(format!("face noise_std {} is invalid", self.noise_std)));
        }
        Ok(())
    }
}

/// Square grayscale image, row-major, values in `[0, 1]`.
#[derive(Clone, Debug, PartialEq)]
pub struct FaceImage {
    pub size: usize,
    pub pixels: Vec<f64>,
}

impl FaceImage {
    pub fn new(size: usize, pixels: Vec<f64>) -> Result<Self> {
        if pixels.len() != size * size {
            return Err(Error::dim("face_image", &[size, size], &[pixels.len()]));
        }
        if let Some(bad) = pixels.iter().find(|p| !(0.0..=1.0).contains(*p)) {
            return Err(Error::Argument(format!("pixel value {bad} outside [0, 1]")));
        }
        Ok(Self { size, pixels })
    }

    pub fn squared_distance(&self, other: &FaceImage) -> f64 {
        self.pixels
            .iter()
            .zip(&other.pixels)
            .map(|(a, b)| (a - b).powi(2))
            .sum()
    }
}

fn z(latent: &[f64], i: usize) -> f64 {
    latent.get(i).copied().unwrap_or(0.5)
}

/// The noise-free image of a profile.
pub fn render_face_template(profile: &SpeakerProfile, cfg: &FaceConfig) -> FaceImage {
    let l = &profile.latent;
    let n = cfg.size;
    // Grating: orientation from pitch over half a turn (so low and high registers never
    // alias), frequency and phase from the first two formants, contrast from spectral tilt.
    let theta = 0.5 * PI * z(l, 0);
    let cycles = 1.5 + 3.0 * z(l, 1);
    let phase = 2.0 * PI * z(l, 2);
    let contrast = 0.1 + 0.15 * z(l, 6);
    // Contrast layout: one horizontal band per latent field, brightness offset by its value.
    let bands: Vec<f64> = (0..LATENT_DIM).map(|i| 0.12 * (2.0 * z(l, i) - 1.0)).collect();
    let (c, s) = (theta.cos(), theta.sin());
    let mut pixels = Vec::with_capacity(n * n);
    for r in 0..n {
        let y = (r as f64 + 0.5) / n as f64;
        let band = bands[((y * bands.len() as f64) as usize).min(bands.len() - 1)];
        for col in 0..n {
            let x = (col as f64 + 0.5) / n as f64;
            let u = (x - 0.5) * c + (y - 0.5) * s;
            let v = 0.5 + band + contrast * (2.0 * PI * cycles * u + phase).cos();
            pixels.push(v.clamp(0.0, 1.0));
        }
    }
    FaceImage { size: n, pixels }
}

/// Template plus seeded Gaussian pixel noise, clipped to `[0, 1]`.
pub fn render_face(profile: &SpeakerProfile, cfg: &FaceConfig, seed: u64) -> FaceImage {
    let mut img = render_face_template(profile, cfg);
    if cfg.noise_std > 0.0 {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let noise = Normal::new(0.0, cfg.noise_std).expect("validated std");
        img.pixels
            .iter_mut()
            .for_each(|p| *p = (*p + noise.sample(&mut rng)).clamp(0.0, 1.0));
    }
    img
}

/// Index of the template nearest to `face` in Euclidean distance (lowest index on ties).
pub fn nearest_template(face: &FaceImage, templates: &[FaceImage]) -> Option<usize> {
    let mut best: Option<(usize, f64)> = None;
    for (i, t) in templates.iter().enumerate() {
        let d = face.squared_distance(t);
        if best.is_none_or(|(_, bd)| d < bd) {
            best = Some((i, d));
        }
    }
    best.map(|(i, _)| i)
}
