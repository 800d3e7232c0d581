//! Synthetic textured images with injected defects.

use std::f64::consts::PI;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};
use crate::numerics::{Scalar, Tensor};

#[derive(Clone, Debug, PartialEq)]
pub struct SynthSample<T> {
    /// `[1, S, S]` grayscale in `[0, 1]`.
    pub image: Tensor<T>,
    /// `[S, S]` in `{0, 1}`.
    pub pixel_mask: Tensor<T>,
    pub class_id: usize,
    pub is_anomalous: bool,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum DefectKind {
    Spot,
    Scratch,
    Swap,
}

#[derive(Clone, Debug, PartialEq)]
pub struct SynthConfig {
    pub image_size: usize,
    pub noise: f64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            image_size: 64,
            noise: 0.03,
        }
    }
}

/// Class texture; depends only on the class id.
#[derive(Clone, Debug)]
struct Texture {
    kind: usize,
    freq: f64,
    angle: f64,
    phase: f64,
}

impl Texture {
    fn for_class(class_id: usize) -> Self {
        let mut r = ChaCha8Rng::seed_from_u64(0x9e37_79b9 + class_id as u64 * 0x1000_0001);
        Self {
            kind: class_id % 3,
            freq: 3.0 + (class_id % 4) as f64 + r.random_range(0.0..1.0),
            angle: (class_id as f64 * 0.7 + r.random_range(0.0..0.3)) % PI,
            phase: r.random_range(0.0..2.0 * PI),
        }
    }

    fn value(&self, x: f64, y: f64, size: f64, jitter: f64) -> f64 {
        let w = 2.0 * PI * self.freq / size;
        let (c, s) = (self.angle.cos(), self.angle.sin());
        let u = x * c + y * s;
        let v = -x * s + y * c;
        let ph = self.phase + jitter;
        match self.kind {
            0 => 0.5 + 0.3 * (w * u + ph).sin(),
            1 => 0.5 + 0.3 * (3.0 * (w * u + ph).sin() * (w * v + ph).sin()).tanh(),
            _ => 0.5 + 0.15 * ((w * u + ph).sin() * (0.7 * w * v).cos() + (1.3 * w * (u + v) + ph).sin()),
        }
    }
}

fn defect(img: &mut [f64], mask: &mut [f64], size: usize, kind: DefectKind, class_id: usize, r: &mut ChaCha8Rng) {
    let s = size as f64;
    let cx = r.random_range(8.0..s - 8.0);
    let cy = r.random_range(8.0..s - 8.0);
    match kind {
        DefectKind::Spot => {
            let rad = r.random_range(2.5..5.0);
            let delta = if r.random_bool(0.5) { 0.45 } else { -0.45 };
            for y in 0..size {
                for x in 0..size {
                    let d2 = (x as f64 - cx).powi(2) + (y as f64 - cy).powi(2);
                    if d2 <= rad * rad {
                        img[y * size + x] += delta;
                        mask[y * size + x] = 1.0;
                    }
                }
            }
        }
        DefectKind::Scratch => {
            let len = r.random_range(10.0..20.0);
            let ang = r.random_range(0.0..PI);
            let val = if r.random_bool(0.5) { 0.98 } else { 0.02 };
            let (dx, dy) = (ang.cos(), ang.sin());
            for y in 0..size {
                for x in 0..size {
                    let (px, py) = (x as f64 - cx, y as f64 - cy);
                    let along = px * dx + py * dy;
                    let across = (-px * dy + py * dx).abs();
                    if along.abs() <= len / 2.0 && across <= 0.8 {
                        img[y * size + x] = val;
                        mask[y * size + x] = 1.0;
                    }
                }
            }
        }
        DefectKind::Swap => {
            let other = Texture {
                angle: r.random_range(0.0..PI),
                freq: r.random_range(7.0..11.0),
                ..Texture::for_class(class_id + 1)
            };
            let half = r.random_range(4.0..7.0);
            for y in 0..size {
                for x in 0..size {
                    if (x as f64 - cx).abs() <= half && (y as f64 - cy).abs() <= half {
                        img[y * size + x] = other.value(x as f64, y as f64, s, 0.0);
                        mask[y * size + x] = 1.0;
                    }
                }
            }
        }
    }
}

/// `n_classes * n_per_class` samples, class-major, reproducible from `seed`.
/// In each class, `round(anomaly_fraction * n_per_class)` randomly chosen
/// samples carry one defect.
pub fn synth_dataset<T: Scalar>(
    seed: u64,
    n_classes: usize,
    n_per_class: usize,
    anomaly_fraction: f64,
    cfg: &SynthConfig,
) -> Result<Vec<SynthSample<T>>> {
    if n_classes == 0 {
        return Err(Error::Config("n_classes must be at least 1".into()));
    }
    if !(0.0..=1.0).contains(&anomaly_fraction) {
        return Err(Error::Config(format!(
            "anomaly_fraction {anomaly_fraction} outside [0, 1]"
        )));
    }
    if cfg.image_size < 24 {
        return Err(Error::Config("image_size must be at least 24".into()));
    }
    let size = cfg.image_size;
    let noise = Normal::new(0.0, cfg.noise.max(0.0)).map_err(|e| Error::Config(e.to_string()))?;
    let mut out = Vec::with_capacity(n_classes * n_per_class);
    for class_id in 0..n_classes {
        let tex = Texture::for_class(class_id);
        let mut r = ChaCha8Rng::seed_from_u64(seed.wrapping_mul(6364136223846793005).wrapping_add(class_id as u64));
        let n_bad = (anomaly_fraction * n_per_class as f64).round() as usize;
        let mut bad = vec![false; n_per_class];
        for i in rand::seq::index::sample(&mut r, n_per_class, n_bad.min(n_per_class)) {
            bad[i] = true;
        }
        for &is_bad in &bad {
            let jitter = r.random_range(0.0..2.0 * PI);
            let mut img: Vec<f64> = (0..size * size)
                .map(|i| tex.value((i % size) as f64, (i / size) as f64, size as f64, jitter) + noise.sample(&mut r))
                .collect();
            let mut mask = vec![0.0; size * size];
            if is_bad {
                let kind = match r.random_range(0..3) {
                    0 => DefectKind::Spot,
                    1 => DefectKind::Scratch,
                    _ => DefectKind::Swap,
                };
                defect(&mut img, &mut mask, size, kind, class_id, &mut r);
            }
            out.push(SynthSample {
                image: Tensor::new(
                    vec![1, size, size],
                    img.into_iter().map(|v| T::lit(v.clamp(0.0, 1.0))).collect(),
                )?,
                pixel_mask: Tensor::new(vec![size, size], mask.into_iter().map(T::lit).collect())?,
                class_id,
                is_anomalous: is_bad,
            });
        }
    }
    Ok(out)
}
