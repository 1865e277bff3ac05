//! Toy corpus: one procedural texture per class with per-image jitter.
//!
//! Each class is a sum of oriented sinusoidal gratings and soft blobs. Images
//! of a class differ by a small translation, contrast and brightness changes,
//! and additive pixel noise.

use std::f64::consts::PI;

use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::{Corpus, ImageSample, Origin, Pixels};
use crate::error::{Error, Result};
use crate::nn::{derive_seed, seeded_rng};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SyntheticSpec {
    pub classes: usize,
    pub per_class: usize,
    pub height: usize,
    pub width: usize,
    pub channels: usize,
    /// Maximum translation in pixels.
    pub jitter: f64,
    /// Standard deviation of additive pixel noise.
    pub noise: f64,
    pub gratings: usize,
    pub blobs: usize,
    /// Per-image perturbation of the class texture: grating phase shifts of
    /// up to `variation * pi`, blob displacements of up to `variation / 8`
    /// of the image side, and amplitude scaling by `1 +- variation / 2`.
    #[serde(default)]
    pub variation: f64,
    pub seed: u64,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        Self {
            classes: 24,
            per_class: 32,
            height: 32,
            width: 32,
            channels: 1,
            jitter: 1.5,
            noise: 0.04,
            gratings: 3,
            blobs: 3,
            variation: 0.0,
            seed: 7,
        }
    }
}

struct Grating {
    freq: f64,
    cos_t: f64,
    sin_t: f64,
    phase: f64,
    amp: f64,
    channel_gain: Vec<f64>,
}

struct Blob {
    cx: f64,
    cy: f64,
    radius: f64,
    amp: f64,
}

struct ClassTexture {
    gratings: Vec<Grating>,
    blobs: Vec<Blob>,
}

impl ClassTexture {
    fn sample(spec: &SyntheticSpec, class: usize) -> Self {
        let mut rng = seeded_rng(derive_seed(spec.seed, &format!("class-{class}")));
        let gratings = (0..spec.gratings)
            .map(|_| {
                let theta = rng.random_range(0.0..PI);
                Grating {
                    freq: rng.random_range(1.0..4.5),
                    cos_t: theta.cos(),
                    sin_t: theta.sin(),
                    phase: rng.random_range(0.0..2.0 * PI),
                    amp: rng.random_range(0.4..1.0),
                    channel_gain: (0..spec.channels).map(|_| rng.random_range(0.6..1.0)).collect(),
                }
            })
            .collect();
        let blobs = (0..spec.blobs)
            .map(|_| Blob {
                cx: rng.random_range(0.2..0.8),
                cy: rng.random_range(0.2..0.8),
                radius: rng.random_range(0.08..0.2),
                amp: if rng.random_bool(0.5) { 1.0 } else { -1.0 } * rng.random_range(0.5..1.0),
            })
            .collect();
        Self { gratings, blobs }
    }

    fn render(&self, spec: &SyntheticSpec, rng: &mut impl Rng) -> Pixels {
        let noise = Normal::new(0.0, spec.noise.max(1e-12)).expect("finite sigma");
        let tx = rng.random_range(-spec.jitter..=spec.jitter) / spec.width as f64;
        let ty = rng.random_range(-spec.jitter..=spec.jitter) / spec.height as f64;
        let contrast = rng.random_range(0.85..1.15);
        let brightness = rng.random_range(-0.05..0.05);
        let norm = (self.gratings.len() + self.blobs.len()).max(1) as f64;
        let var = spec.variation;
        let mut perturb = |scale: f64| if var > 0.0 { rng.random_range(-var..=var) * scale } else { 0.0 };
        let gratings: Vec<(f64, f64)> = self
            .gratings
            .iter()
            .map(|g| (g.phase + perturb(PI), g.amp * (1.0 + perturb(0.5))))
            .collect();
        let blobs: Vec<(f64, f64, f64)> = self
            .blobs
            .iter()
            .map(|b| (b.cx + perturb(0.125), b.cy + perturb(0.125), b.amp * (1.0 + perturb(0.5))))
            .collect();
        let mut px = Pixels::filled(spec.height, spec.width, spec.channels, 0.0);
        for c in 0..spec.channels {
            for y in 0..spec.height {
                for x in 0..spec.width {
                    let u = x as f64 / spec.width as f64 - tx;
                    let v = y as f64 / spec.height as f64 - ty;
                    let mut s = 0.0;
                    for (g, &(phase, amp)) in self.gratings.iter().zip(&gratings) {
                        let t = u * g.cos_t + v * g.sin_t;
                        s += amp * g.channel_gain[c] * (2.0 * PI * g.freq * t + phase).cos();
                    }
                    for (b, &(cx, cy, amp)) in self.blobs.iter().zip(&blobs) {
                        let d2 = (u - cx).powi(2) + (v - cy).powi(2);
                        s += 1.5 * amp * (-d2 / (2.0 * b.radius * b.radius)).exp();
                    }
                    let value = 0.5 + brightness + contrast * 0.45 * s / norm.sqrt()
                        + if spec.noise > 0.0 { noise.sample(rng) } else { 0.0 };
                    px.set(c, y, x, value.clamp(0.0, 1.0) as f32);
                }
            }
        }
        px
    }
}

/// Generates `classes * per_class` samples with ids `c{class}_{index}`.
pub fn generate(spec: &SyntheticSpec) -> Result<Corpus> {
    if spec.classes == 0 || spec.per_class == 0 || spec.height == 0 || spec.width == 0 {
        return Err(Error::Config("synthetic corpus dimensions must be positive".into()));
    }
    let mut samples = Vec::with_capacity(spec.classes * spec.per_class);
    for class in 0..spec.classes {
        let texture = ClassTexture::sample(spec, class);
        let mut rng = seeded_rng(derive_seed(spec.seed, &format!("images-{class}")));
        for i in 0..spec.per_class {
            samples.push(ImageSample {
                sample_id: format!("c{class:04}_{i:04}"),
                class_label: class as u32,
                pixels: texture.render(spec, &mut rng),
                origin: Origin::Natural,
            });
        }
    }
    Corpus::from_samples(samples)
}
