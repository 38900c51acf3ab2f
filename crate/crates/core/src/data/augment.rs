//! Policy-driven photometric and geometric augmentation.
//!
//! A policy file holds one `op probability magnitude` step per line; blank
//! lines and `#` comments are ignored. Magnitudes are fixed per step, so a
//! policy that wants both directions of a tweak lists two steps.

use std::fmt;
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::Sample;
use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Policy shipped with the crate.
pub const DEFAULT_POLICY: &str = include_str!("../../policies/default.policy");

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum AugmentOp {
    /// Zoom factor in [1, 2]: crop a random S/z window and resize it back to S.
    ScaleCrop,
    /// Mirror left-right. The magnitude is unused and must lie in [0, 1].
    HFlip,
    /// Additive hue rotation in degrees, [-180, 180].
    Hue,
    /// Multiplicative saturation factor, [0, 3].
    Saturation,
    /// Multiplicative RGB gain, [0, 3].
    Exposure,
    /// Additive RGB offset, [-1, 1].
    Brightness,
}

impl AugmentOp {
    pub const ALL: [AugmentOp; 6] = [
        AugmentOp::ScaleCrop,
        AugmentOp::HFlip,
        AugmentOp::Hue,
        AugmentOp::Saturation,
        AugmentOp::Exposure,
        AugmentOp::Brightness,
    ];

    pub fn name(self) -> &'static str {
        match self {
            AugmentOp::ScaleCrop => "scale_crop",
            AugmentOp::HFlip => "hflip",
            AugmentOp::Hue => "hue",
            AugmentOp::Saturation => "saturation",
            AugmentOp::Exposure => "exposure",
            AugmentOp::Brightness => "brightness",
        }
    }

    pub fn magnitude_range(self) -> (f64, f64) {
        match self {
            AugmentOp::ScaleCrop => (1.0, 2.0),
            AugmentOp::HFlip => (0.0, 1.0),
            AugmentOp::Hue => (-180.0, 180.0),
            AugmentOp::Saturation | AugmentOp::Exposure => (0.0, 3.0),
            AugmentOp::Brightness => (-1.0, 1.0),
        }
    }
}

impl fmt::Display for AugmentOp {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for AugmentOp {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        AugmentOp::ALL
            .into_iter()
            .find(|op| op.name() == s)
            .ok_or_else(|| Error::InvalidArgument(format!("unknown augmentation `{s}`")))
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct PolicyStep {
    pub op: AugmentOp,
    pub probability: f64,
    pub magnitude: f64,
}

impl PolicyStep {
    pub fn new(op: AugmentOp, probability: f64, magnitude: f64) -> Result<Self> {
        if !(0.0..=1.0).contains(&probability) {
            return Err(Error::InvalidArgument(format!("{op}: probability {probability} outside [0, 1]")));
        }
        let (lo, hi) = op.magnitude_range();
        if !(lo..=hi).contains(&magnitude) {
            return Err(Error::InvalidArgument(format!(
                "{op}: magnitude {magnitude} outside [{lo}, {hi}]"
            )));
        }
        Ok(PolicyStep { op, probability, magnitude })
    }
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct AugmentPolicy {
    pub steps: Vec<PolicyStep>,
}

impl AugmentPolicy {
    pub fn parse(text: &str) -> Result<Self> {
        let mut steps = Vec::new();
        for (i, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let fail = |detail: String| Error::Policy { line: i + 1, detail };
            let fields: Vec<&str> = line.split_whitespace().collect();
            let [op, p, m] = fields[..] else {
                return Err(fail(format!("expected `op probability magnitude`, got `{line}`")));
            };
            let op: AugmentOp = op.parse().map_err(|e: Error| fail(e.to_string()))?;
            let num = |s: &str| s.parse::<f64>().map_err(|_| fail(format!("`{s}` is not a number")));
            let step = PolicyStep::new(op, num(p)?, num(m)?).map_err(|e| fail(e.to_string()))?;
            steps.push(step);
        }
        Ok(AugmentPolicy { steps })
    }

    pub fn default_policy() -> Self {
        Self::parse(DEFAULT_POLICY).expect("bundled policy parses")
    }

    pub fn to_text(&self) -> String {
        self.steps.iter().map(|s| format!("{} {} {}\n", s.op, s.probability, s.magnitude)).collect()
    }
}

/// Runs the policy steps in order, each firing with its probability. Label,
/// weight and tag pass through untouched.
pub fn apply_policy<T: Scalar>(sample: &Sample<T>, policy: &AugmentPolicy, seed: u64) -> Result<Sample<T>> {
    let [3, h, w] = sample.image.shape()[..] else {
        return Err(Error::shape("apply_policy", format!("expected 3×H×W, got {:?}", sample.image.shape())));
    };
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut img: Vec<f64> = sample.image.data().iter().map(|v| v.as_f64()).collect();
    for step in &policy.steps {
        let fire = rng.random::<f64>() < step.probability;
        if !fire {
            continue;
        }
        let m = step.magnitude;
        match step.op {
            AugmentOp::ScaleCrop => {
                let (u, v) = (rng.random::<f64>(), rng.random::<f64>());
                img = scale_crop(&img, h, w, m, u, v);
            }
            AugmentOp::HFlip => hflip(&mut img, h, w),
            AugmentOp::Hue => map_hsv(&mut img, h * w, |hue, s, v| ((hue + m).rem_euclid(360.0), s, v)),
            AugmentOp::Saturation => map_hsv(&mut img, h * w, |hue, s, v| (hue, (s * m).min(1.0), v)),
            AugmentOp::Exposure => img.iter_mut().for_each(|x| *x *= m),
            AugmentOp::Brightness => img.iter_mut().for_each(|x| *x += m),
        }
        img.iter_mut().for_each(|x| *x = x.clamp(0.0, 1.0));
    }
    Ok(Sample {
        image: Tensor::new(vec![3, h, w], img.into_iter().map(T::of).collect())?,
        label: sample.label.clone(),
        weight: sample.weight,
        tag: sample.tag.clone(),
    })
}

fn hflip(img: &mut [f64], h: usize, w: usize) {
    for row in img.chunks_mut(w).take(3 * h) {
        row.reverse();
    }
}

/// Crops an (h/zoom)×(w/zoom) window whose offset is the fraction (u, v) of
/// the free margin, then resamples it bilinearly to h×w.
fn scale_crop(img: &[f64], h: usize, w: usize, zoom: f64, u: f64, v: f64) -> Vec<f64> {
    let (ch, cw) = (h as f64 / zoom, w as f64 / zoom);
    let (oy, ox) = (u * (h as f64 - ch), v * (w as f64 - cw));
    let (sy, sx) = (ch / h as f64, cw / w as f64);
    let mut out = vec![0.0; img.len()];
    for i in 0..h {
        let y = (oy + (i as f64 + 0.5) * sy - 0.5).clamp(0.0, (h - 1) as f64);
        let (y0, fy) = (y.floor() as usize, y - y.floor());
        let y1 = (y0 + 1).min(h - 1);
        for j in 0..w {
            let x = (ox + (j as f64 + 0.5) * sx - 0.5).clamp(0.0, (w - 1) as f64);
            let (x0, fx) = (x.floor() as usize, x - x.floor());
            let x1 = (x0 + 1).min(w - 1);
            for c in 0..3 {
                let p = |yy: usize, xx: usize| img[(c * h + yy) * w + xx];
                let top = p(y0, x0) * (1.0 - fx) + p(y0, x1) * fx;
                let bot = p(y1, x0) * (1.0 - fx) + p(y1, x1) * fx;
                out[(c * h + i) * w + j] = top * (1.0 - fy) + bot * fy;
            }
        }
    }
    out
}

fn map_hsv(img: &mut [f64], plane: usize, f: impl Fn(f64, f64, f64) -> (f64, f64, f64)) {
    for p in 0..plane {
        let (h, s, v) = rgb_to_hsv(img[p], img[plane + p], img[2 * plane + p]);
        let (h, s, v) = f(h, s, v);
        let (r, g, b) = hsv_to_rgb(h, s, v);
        img[p] = r;
        img[plane + p] = g;
        img[2 * plane + p] = b;
    }
}

/// Hue in degrees [0, 360), saturation and value in [0, 1].
pub fn rgb_to_hsv(r: f64, g: f64, b: f64) -> (f64, f64, f64) {
    let max = r.max(g).max(b);
    let min = r.min(g).min(b);
    let d = max - min;
    let h = if d == 0.0 {
        0.0
    } else if max == r {
        60.0 * ((g - b) / d).rem_euclid(6.0)
    } else if max == g {
        60.0 * ((b - r) / d + 2.0)
    } else {
        60.0 * ((r - g) / d + 4.0)
    };
    let s = if max == 0.0 { 0.0 } else { d / max };
    (h, s, max)
}

pub fn hsv_to_rgb(h: f64, s: f64, v: f64) -> (f64, f64, f64) {
    let c = v * s;
    let hp = h.rem_euclid(360.0) / 60.0;
    let x = c * (1.0 - (hp.rem_euclid(2.0) - 1.0).abs());
    let (r, g, b) = match hp as u32 {
        0 => (c, x, 0.0),
        1 => (x, c, 0.0),
        2 => (0.0, c, x),
        3 => (0.0, x, c),
        4 => (x, 0.0, c),
        _ => (c, 0.0, x),
    };
    let m = v - c;
    (r + m, g + m, b + m)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn constant(v: f64) -> Sample<f64> {
        Sample::new(Tensor::full([3, 4, 4], v), 0, 2)
    }

    #[test]
    fn brightness_offsets_constant_image() {
        let p = AugmentPolicy::parse("brightness 1 0.1").unwrap();
        let out = apply_policy(&constant(0.5), &p, 0).unwrap();
        assert!(out.image.data().iter().all(|&x| (x - 0.6).abs() < 1e-12));
    }

    #[test]
    fn hsv_known_colors() {
        assert_eq!(rgb_to_hsv(1.0, 0.0, 0.0), (0.0, 1.0, 1.0));
        assert_eq!(rgb_to_hsv(0.0, 1.0, 0.0), (120.0, 1.0, 1.0));
        assert_eq!(rgb_to_hsv(0.0, 0.0, 1.0), (240.0, 1.0, 1.0));
        assert_eq!(hsv_to_rgb(120.0, 1.0, 1.0), (0.0, 1.0, 0.0));
        assert_eq!(hsv_to_rgb(0.0, 0.0, 0.5), (0.5, 0.5, 0.5));
    }

    #[test]
    fn hue_rotation_by_120_cycles_primaries() {
        let mut s = constant(0.0);
        s.image.data_mut()[..16].iter_mut().for_each(|x| *x = 1.0);
        let p = AugmentPolicy::parse("hue 1 120").unwrap();
        let out = apply_policy(&s, &p, 0).unwrap();
        assert!(out.image.data()[..16].iter().all(|&x| x.abs() < 1e-12));
        assert!(out.image.data()[16..32].iter().all(|&x| (x - 1.0).abs() < 1e-12));
    }

    #[test]
    fn unit_zoom_crop_is_identity() {
        let img: Vec<f64> = (0..48).map(|i| i as f64 / 48.0).collect();
        assert_eq!(scale_crop(&img, 4, 4, 1.0, 0.3, 0.9), img);
    }

    #[test]
    fn parse_errors_carry_line_numbers() {
        for (text, line) in [
            ("hflip 0.5 0\nblur 1 1", 2),
            ("# c\n\nhue 2 10", 3),
            ("brightness 0.5 1.5", 1),
            ("hflip 0.5", 1),
            ("hflip x 0", 1),
        ] {
            match AugmentPolicy::parse(text) {
                Err(Error::Policy { line: l, .. }) => assert_eq!(l, line, "{text}"),
                other => panic!("{text}: {other:?}"),
            }
        }
    }

    #[test]
    fn default_policy_round_trips() {
        let p = AugmentPolicy::default_policy();
        let ops: std::collections::HashSet<_> = p.steps.iter().map(|s| s.op).collect();
        assert_eq!(ops.len(), 6);
        assert_eq!(AugmentPolicy::parse(&p.to_text()).unwrap(), p);
    }
}
