//! Procedural stand-in for a logo dataset: colored marks on a noisy backdrop.
//!
//! Class `k` pairs color `k / 2` with shape `k % 2` (filled disk or hollow
//! square), so ten classes come from five colors. Position, size and color
//! are jittered per image.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{Dataset, Sample};
use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

const COLORS: [(&str, [f64; 3]); 5] = [
    ("red", [0.85, 0.1, 0.1]),
    ("green", [0.1, 0.7, 0.2]),
    ("blue", [0.15, 0.2, 0.9]),
    ("yellow", [0.9, 0.85, 0.1]),
    ("purple", [0.6, 0.15, 0.75]),
];

#[derive(Clone, Debug, PartialEq)]
pub struct SynthConfig {
    pub image_size: usize,
    /// At most 10.
    pub num_classes: usize,
    pub per_class: usize,
    /// Fraction of images drawn smaller and fainter, tagged `hard`.
    pub hard_fraction: f64,
    pub seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig { image_size: 32, num_classes: 10, per_class: 16, hard_fraction: 0.1, seed: 0 }
    }
}

pub fn class_names(num_classes: usize) -> Vec<String> {
    (0..num_classes)
        .map(|k| format!("{}_{}", COLORS[k / 2].0, if k % 2 == 0 { "disk" } else { "square" }))
        .collect()
}

/// Samples are emitted class-major: `per_class` images of class 0, then 1, …
pub fn generate<T: Scalar>(cfg: &SynthConfig) -> Result<Dataset<T>> {
    if cfg.num_classes == 0 || cfg.num_classes > 2 * COLORS.len() {
        return Err(Error::InvalidArgument(format!("synthetic classes must be in 1..=10, got {}", cfg.num_classes)));
    }
    if cfg.image_size < 8 {
        return Err(Error::InvalidArgument(format!("synthetic images need side ≥ 8, got {}", cfg.image_size)));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let s = cfg.image_size;
    let sf = s as f64;
    let mut samples = Vec::with_capacity(cfg.num_classes * cfg.per_class);
    for k in 0..cfg.num_classes {
        for _ in 0..cfg.per_class {
            let hard = rng.random::<f64>() < cfg.hard_fraction;
            let base = rng.random_range(0.35..0.65);
            let mut img = vec![0.0f64; 3 * s * s];
            for c in 0..3 {
                let tint = base + rng.random_range(-0.05..0.05);
                for p in 0..s * s {
                    img[c * s * s + p] = tint + rng.random_range(-0.04..0.04);
                }
            }
            let radius = if hard { rng.random_range(0.12..0.18) } else { rng.random_range(0.2..0.3) } * sf;
            let cy = rng.random_range(radius..sf - radius);
            let cx = rng.random_range(radius..sf - radius);
            let contrast = if hard { 0.55 } else { 1.0 };
            let color: Vec<f64> = COLORS[k / 2].1.iter().map(|v| v + rng.random_range(-0.06..0.06)).collect();
            let border = (radius * 0.3).max(1.5);
            for y in 0..s {
                for x in 0..s {
                    let (dy, dx) = (y as f64 + 0.5 - cy, x as f64 + 0.5 - cx);
                    let inside = if k % 2 == 0 {
                        dy * dy + dx * dx <= radius * radius
                    } else {
                        let d = dy.abs().max(dx.abs());
                        d <= radius && d >= radius - border
                    };
                    if inside {
                        for c in 0..3 {
                            let v = &mut img[(c * s + y) * s + x];
                            *v += contrast * (color[c] - *v);
                        }
                    }
                }
            }
            let image = Tensor::new(vec![3, s, s], img.into_iter().map(|v| T::of(v.clamp(0.0, 1.0))).collect())?;
            let mut sample = Sample::new(image, k, cfg.num_classes);
            if hard {
                sample.tag = Some("hard".into());
            }
            samples.push(sample);
        }
    }
    Ok(Dataset { samples, class_names: class_names(cfg.num_classes) })
}
