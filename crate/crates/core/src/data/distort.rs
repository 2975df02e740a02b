//! Image degradations used to probe robustness: blur, sharpen, additive
//! noise and two radial warps (pinch, whirl). Every kind is the identity at
//! zero strength.

use std::fmt;
use std::str::FromStr;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::image::Image;
use crate::error::{Error, Result};

/// Blur radius used by the unsharp mask.
pub const SHARPEN_SIGMA: f64 = 1.0;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DistortionKind {
    Blur,
    Sharp,
    Noise,
    Pinch,
    Whirl,
}

impl DistortionKind {
    pub const ALL: [DistortionKind; 5] = [
        DistortionKind::Blur,
        DistortionKind::Sharp,
        DistortionKind::Noise,
        DistortionKind::Pinch,
        DistortionKind::Whirl,
    ];

    pub fn name(self) -> &'static str {
        match self {
            DistortionKind::Blur => "blur",
            DistortionKind::Sharp => "sharp",
            DistortionKind::Noise => "noise",
            DistortionKind::Pinch => "pinch",
            DistortionKind::Whirl => "whirl",
        }
    }

    /// Accepted strength interval.
    pub fn range(self) -> (f64, f64) {
        match self {
            DistortionKind::Blur => (0.0, 20.0),
            DistortionKind::Sharp => (0.0, 10.0),
            DistortionKind::Noise => (0.0, 2.0),
            DistortionKind::Pinch => (-1.0, 0.95),
            DistortionKind::Whirl => (-360.0, 360.0),
        }
    }
}

impl fmt::Display for DistortionKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for DistortionKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        DistortionKind::ALL
            .into_iter()
            .find(|k| k.name() == s)
            .ok_or_else(|| Error::InvalidArgument(format!("unknown distortion `{s}` (blur, sharp, noise, pinch, whirl)")))
    }
}

/// Default strengths: Gaussian sigma in pixels, unsharp amount, noise
/// standard deviation in `[-1, 1]` units, pinch factor, and the whirl angle
/// in degrees at the image center.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DistortionDefaults {
    pub blur_sigma: f64,
    pub sharp_amount: f64,
    pub noise_std: f64,
    pub pinch: f64,
    pub whirl_degrees: f64,
}

impl Default for DistortionDefaults {
    fn default() -> Self {
        DistortionDefaults {
            blur_sigma: 2.0,
            sharp_amount: 1.0,
            noise_std: 0.05,
            pinch: 0.3,
            whirl_degrees: 30.0,
        }
    }
}

impl DistortionDefaults {
    pub fn strength(&self, kind: DistortionKind) -> f64 {
        match kind {
            DistortionKind::Blur => self.blur_sigma,
            DistortionKind::Sharp => self.sharp_amount,
            DistortionKind::Noise => self.noise_std,
            DistortionKind::Pinch => self.pinch,
            DistortionKind::Whirl => self.whirl_degrees,
        }
    }

    pub fn validate(&self) -> Result<()> {
        for kind in DistortionKind::ALL {
            DistortionSpec::new(kind, self.strength(kind), 0)?;
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DistortionSpec {
    pub kind: DistortionKind,
    pub strength: f64,
    /// Only used by `Noise`.
    pub seed: u64,
}

impl DistortionSpec {
    pub fn new(kind: DistortionKind, strength: f64, seed: u64) -> Result<DistortionSpec> {
        let (lo, hi) = kind.range();
        if !(strength.is_finite() && (lo..=hi).contains(&strength)) {
            return Err(Error::InvalidArgument(format!("{kind} strength {strength} outside [{lo}, {hi}]")));
        }
        Ok(DistortionSpec { kind, strength, seed })
    }

    pub fn with_default(kind: DistortionKind, defaults: &DistortionDefaults, seed: u64) -> Result<DistortionSpec> {
        DistortionSpec::new(kind, defaults.strength(kind), seed)
    }
}

pub fn distort(img: &Image, spec: &DistortionSpec) -> Result<Image> {
    let spec = DistortionSpec::new(spec.kind, spec.strength, spec.seed)?;
    Ok(match spec.kind {
        DistortionKind::Blur => gaussian_blur(img, spec.strength),
        DistortionKind::Sharp => unsharp(img, spec.strength),
        DistortionKind::Noise => add_noise(img, spec.strength, spec.seed),
        DistortionKind::Pinch => pinch(img, spec.strength),
        DistortionKind::Whirl => whirl(img, spec.strength),
    })
}

fn gaussian_kernel(sigma: f64) -> Vec<f64> {
    let radius = (3.0 * sigma).ceil() as isize;
    let k: Vec<f64> = (-radius..=radius).map(|i| (-((i * i) as f64) / (2.0 * sigma * sigma)).exp()).collect();
    let total: f64 = k.iter().sum();
    k.into_iter().map(|v| v / total).collect()
}

/// Separable Gaussian blur with clamped edges.
pub fn gaussian_blur(img: &Image, sigma: f64) -> Image {
    if sigma == 0.0 {
        return img.clone();
    }
    let k = gaussian_kernel(sigma);
    let r = (k.len() / 2) as isize;
    let (h, w, c) = img.shape();
    let clamp = |i: isize, n: usize| i.clamp(0, n as isize - 1) as usize;
    let mut tmp = vec![0.0; img.data.len()];
    for y in 0..h {
        for x in 0..w {
            for ch in 0..c {
                let mut acc = 0.0;
                for (j, kv) in k.iter().enumerate() {
                    let xx = clamp(x as isize + j as isize - r, w);
                    acc += kv * img.data[(y * w + xx) * c + ch];
                }
                tmp[(y * w + x) * c + ch] = acc;
            }
        }
    }
    let mut out = vec![0.0; img.data.len()];
    for y in 0..h {
        for x in 0..w {
            for ch in 0..c {
                let mut acc = 0.0;
                for (j, kv) in k.iter().enumerate() {
                    let yy = clamp(y as isize + j as isize - r, h);
                    acc += kv * tmp[(yy * w + x) * c + ch];
                }
                out[(y * w + x) * c + ch] = acc;
            }
        }
    }
    Image {
        data: out,
        ..img.clone()
    }
}

/// `img + amount * (img - blur(img))`, clipped to `[-1, 1]`.
pub fn unsharp(img: &Image, amount: f64) -> Image {
    if amount == 0.0 {
        return img.clone();
    }
    let blurred = gaussian_blur(img, SHARPEN_SIGMA);
    let data = img
        .data
        .iter()
        .zip(&blurred.data)
        .map(|(v, b)| (v + amount * (v - b)).clamp(-1.0, 1.0))
        .collect();
    Image { data, ..img.clone() }
}

/// Additive seeded Gaussian noise, clipped to `[-1, 1]`.
pub fn add_noise(img: &Image, std: f64, seed: u64) -> Image {
    if std == 0.0 {
        return img.clone();
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let normal = Normal::new(0.0, std).expect("std is finite and positive");
    let data = img.data.iter().map(|v| (v + normal.sample(&mut rng)).clamp(-1.0, 1.0)).collect();
    Image { data, ..img.clone() }
}

/// Bilinear sample at fractional `(y, x)` with clamped edges.
fn bilinear(img: &Image, y: f64, x: f64, ch: usize) -> f64 {
    let (h, w, _) = img.shape();
    let y = y.clamp(0.0, (h - 1) as f64);
    let x = x.clamp(0.0, (w - 1) as f64);
    let (y0, x0) = (y.floor() as usize, x.floor() as usize);
    let (y1, x1) = ((y0 + 1).min(h - 1), (x0 + 1).min(w - 1));
    let (fy, fx) = (y - y0 as f64, x - x0 as f64);
    let top = img.get(y0, x0, ch) * (1.0 - fx) + img.get(y0, x1, ch) * fx;
    let bottom = img.get(y1, x0, ch) * (1.0 - fx) + img.get(y1, x1, ch) * fx;
    top * (1.0 - fy) + bottom * fy
}

/// Output pixel `(y, x)` reads the input at `map(dy, dx, r / radius)` offsets
/// from the center, where `radius` is the half-diagonal.
fn radial_remap(img: &Image, map: impl Fn(f64, f64, f64) -> (f64, f64)) -> Image {
    let (h, w, c) = img.shape();
    let (cy, cx) = ((h as f64 - 1.0) / 2.0, (w as f64 - 1.0) / 2.0);
    let radius = (cy * cy + cx * cx).sqrt().max(f64::MIN_POSITIVE);
    let mut data = Vec::with_capacity(img.data.len());
    for y in 0..h {
        for x in 0..w {
            let (dy, dx) = (y as f64 - cy, x as f64 - cx);
            let d = (dy * dy + dx * dx).sqrt() / radius;
            let (sy, sx) = if d < 1.0 { map(dy, dx, d) } else { (dy, dx) };
            for ch in 0..c {
                data.push(bilinear(img, cy + sy, cx + sx, ch));
            }
        }
    }
    Image { data, ..img.clone() }
}

/// Implode-style warp: offsets are scaled by `sin(pi d / 2)^(-amount)`.
/// Positive amounts pull content toward the center.
pub fn pinch(img: &Image, amount: f64) -> Image {
    if amount == 0.0 {
        return img.clone();
    }
    radial_remap(img, |dy, dx, d| {
        if d == 0.0 {
            return (0.0, 0.0);
        }
        let f = (std::f64::consts::FRAC_PI_2 * d).sin().powf(-amount);
        (dy * f, dx * f)
    })
}

/// Rotation by `degrees * (1 - d)`: the full angle at the center decaying
/// linearly to zero at the half-diagonal.
pub fn whirl(img: &Image, degrees: f64) -> Image {
    if degrees == 0.0 {
        return img.clone();
    }
    let theta = degrees.to_radians();
    radial_remap(img, |dy, dx, d| {
        let (s, c) = (theta * (1.0 - d)).sin_cos();
        (dx * s + dy * c, dx * c - dy * s)
    })
}
