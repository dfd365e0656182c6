//! Parameterized input-space augmentations `g(x; θ)` and their samplers.
//!
//! * geometric: `θ = [x0, y0, h, w]`, a crop rectangle in normalized
//!   coordinates, resampled bilinearly back to the input size;
//! * photometric: `θ = [r, g, b] ∈ [-1, 1]³`, channel `c` scaled by `1 + θ_c`;
//! * rotation: `θ = [a] ∈ [-1, 1]`, rotation by `a·π` about the center.
//!
//! The identity parameters of every kind pass the image through bit-exactly.

use crate::data::{Image, CHANNELS};
use crate::error::{Error, Result};
use crate::rng::CounterRng;
use serde::{Deserialize, Serialize};
use std::fmt;
use std::str::FromStr;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AugmentKind {
    Geo,
    Photo,
    Rot,
}

impl AugmentKind {
    pub const ALL: [AugmentKind; 3] = [AugmentKind::Geo, AugmentKind::Photo, AugmentKind::Rot];

    pub fn theta_dim(self) -> usize {
        match self {
            AugmentKind::Geo => 4,
            AugmentKind::Photo => 3,
            AugmentKind::Rot => 1,
        }
    }

    pub fn identity(self) -> Vec<f64> {
        match self {
            AugmentKind::Geo => vec![0.0, 0.0, 1.0, 1.0],
            AugmentKind::Photo => vec![0.0; 3],
            AugmentKind::Rot => vec![0.0],
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            AugmentKind::Geo => "geo",
            AugmentKind::Photo => "photo",
            AugmentKind::Rot => "rot",
        }
    }
}

impl fmt::Display for AugmentKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for AugmentKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "geo" => Ok(AugmentKind::Geo),
            "photo" => Ok(AugmentKind::Photo),
            "rot" => Ok(AugmentKind::Rot),
            other => Err(Error::validation("kind", format!("`{other}` is not one of geo, photo, rot"))),
        }
    }
}

/// Parses comma-separated reals, e.g. `0.8,-0.3,-0.3`.
pub fn parse_theta(s: &str) -> Result<Vec<f64>> {
    s.split(',')
        .map(|t| {
            t.trim()
                .parse::<f64>()
                .map_err(|_| Error::validation("theta", format!("`{t}` is not a number")))
        })
        .collect()
}

/// A validated `(kind, θ)` pair.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AugmentParams {
    pub kind: AugmentKind,
    pub theta: Vec<f64>,
}

const SLACK: f64 = 1e-9;

impl AugmentParams {
    pub fn new(kind: AugmentKind, theta: Vec<f64>) -> Result<Self> {
        let p = Self { kind, theta };
        p.validate()?;
        Ok(p)
    }

    pub fn identity(kind: AugmentKind) -> Self {
        Self {
            kind,
            theta: kind.identity(),
        }
    }

    pub fn is_identity(&self) -> bool {
        self.theta == self.kind.identity()
    }

    pub fn validate(&self) -> Result<()> {
        let t = &self.theta;
        if t.len() != self.kind.theta_dim() {
            return Err(Error::validation(
                "theta",
                format!("{} needs {} values, got {}", self.kind, self.kind.theta_dim(), t.len()),
            ));
        }
        if t.iter().any(|v| !v.is_finite()) {
            return Err(Error::validation("theta", "values must be finite"));
        }
        match self.kind {
            AugmentKind::Geo => {
                let [x0, y0, h, w] = [t[0], t[1], t[2], t[3]];
                if t.iter().any(|v| !(-SLACK..=1.0 + SLACK).contains(v)) {
                    return Err(Error::validation("theta", "geo values must lie in [0, 1]"));
                }
                if h <= 0.0 || w <= 0.0 {
                    return Err(Error::validation("theta", "crop height and width must be positive"));
                }
                if x0 + w > 1.0 + SLACK || y0 + h > 1.0 + SLACK {
                    return Err(Error::validation("theta", "crop extends past the image (x0 + w or y0 + h > 1)"));
                }
            }
            AugmentKind::Photo | AugmentKind::Rot => {
                if t.iter().any(|v| !(-1.0..=1.0).contains(v)) {
                    return Err(Error::validation("theta", format!("{} values must lie in [-1, 1]", self.kind)));
                }
            }
        }
        Ok(())
    }

    pub fn theta_f32(&self) -> Vec<f32> {
        self.theta.iter().map(|&v| v as f32).collect()
    }
}

/// Applies `g(img; θ)`.
pub fn apply(img: &Image, p: &AugmentParams) -> Result<Image> {
    match p.kind {
        AugmentKind::Geo => apply_geometric(img, &p.theta),
        AugmentKind::Photo => apply_photometric(img, &p.theta),
        AugmentKind::Rot => apply_rotation(img, p.theta.first().copied().unwrap_or(f64::NAN)),
    }
}

/// `out_c = clamp(in_c · (1 + θ_c), 0, 1)`.
pub fn apply_photometric(img: &Image, theta: &[f64]) -> Result<Image> {
    AugmentParams {
        kind: AugmentKind::Photo,
        theta: theta.to_vec(),
    }
    .validate()?;
    if theta.iter().all(|&v| v == 0.0) {
        return Ok(img.clone());
    }
    let scale = [1.0 + theta[0], 1.0 + theta[1], 1.0 + theta[2]].map(|s| s as f32);
    let pixels = img
        .pixels
        .chunks(CHANNELS)
        .flat_map(|px| (0..CHANNELS).map(move |c| (px[c] * scale[c]).clamp(0.0, 1.0)))
        .collect();
    Ok(Image { pixels, ..*img })
}

/// Bilinear sample at continuous pixel-index coordinates, clamped to the border.
fn sample_clamped(img: &Image, sy: f64, sx: f64, out: &mut [f32]) {
    let sx = sx.clamp(0.0, (img.width - 1) as f64);
    let sy = sy.clamp(0.0, (img.height - 1) as f64);
    let (x0, y0) = (sx.floor() as usize, sy.floor() as usize);
    let (x1, y1) = ((x0 + 1).min(img.width - 1), (y0 + 1).min(img.height - 1));
    let (fx, fy) = (sx - x0 as f64, sy - y0 as f64);
    for (c, o) in out.iter_mut().enumerate() {
        let top = img.get(y0, x0, c) as f64 * (1.0 - fx) + img.get(y0, x1, c) as f64 * fx;
        let bot = img.get(y1, x0, c) as f64 * (1.0 - fx) + img.get(y1, x1, c) as f64 * fx;
        *o = (top * (1.0 - fy) + bot * fy) as f32;
    }
}

/// Crops `[x0, x0+w] × [y0, y0+h]` (normalized) and resizes back to the input size.
pub fn apply_geometric(img: &Image, theta: &[f64]) -> Result<Image> {
    AugmentParams {
        kind: AugmentKind::Geo,
        theta: theta.to_vec(),
    }
    .validate()?;
    if theta == [0.0, 0.0, 1.0, 1.0] {
        return Ok(img.clone());
    }
    let [x0, y0, h, w] = [theta[0], theta[1], theta[2], theta[3]];
    let (hh, ww) = (img.height as f64, img.width as f64);
    if w * ww < 2.0 || h * hh < 2.0 {
        return Err(Error::validation(
            "theta",
            format!("degenerate crop covers {:.2}×{:.2} source pixels (< 2)", h * hh, w * ww),
        ));
    }
    let mut pixels = vec![0.0f32; img.pixels.len()];
    for i in 0..img.height {
        let sy = y0 * hh + (i as f64 + 0.5) * h - 0.5;
        for j in 0..img.width {
            let sx = x0 * ww + (j as f64 + 0.5) * w - 0.5;
            let o = (i * img.width + j) * CHANNELS;
            sample_clamped(img, sy, sx, &mut pixels[o..o + CHANNELS]);
        }
    }
    Ok(Image { pixels, ..*img })
}

/// Rotates by `a·π` about the image center, zero-filling outside the source.
pub fn apply_rotation(img: &Image, a: f64) -> Result<Image> {
    AugmentParams {
        kind: AugmentKind::Rot,
        theta: vec![a],
    }
    .validate()?;
    if a == 0.0 {
        return Ok(img.clone());
    }
    let (sin, cos) = (a * std::f64::consts::PI).sin_cos();
    let (cy, cx) = (img.height as f64 / 2.0, img.width as f64 / 2.0);
    let fetch = |y: i64, x: i64, c: usize| -> f64 {
        if y < 0 || x < 0 || y >= img.height as i64 || x >= img.width as i64 {
            0.0
        } else {
            img.get(y as usize, x as usize, c) as f64
        }
    };
    let mut pixels = vec![0.0f32; img.pixels.len()];
    for i in 0..img.height {
        for j in 0..img.width {
            let (dy, dx) = (i as f64 + 0.5 - cy, j as f64 + 0.5 - cx);
            // Inverse map: rotate the output offset by -angle.
            let sx = cx + cos * dx + sin * dy - 0.5;
            let sy = cy - sin * dx + cos * dy - 0.5;
            let (x0, y0) = (sx.floor(), sy.floor());
            let (fx, fy) = (sx - x0, sy - y0);
            let (x0, y0) = (x0 as i64, y0 as i64);
            for c in 0..CHANNELS {
                let top = fetch(y0, x0, c) * (1.0 - fx) + fetch(y0, x0 + 1, c) * fx;
                let bot = fetch(y0 + 1, x0, c) * (1.0 - fx) + fetch(y0 + 1, x0 + 1, c) * fx;
                pixels[(i * img.width + j) * CHANNELS + c] = ((top * (1.0 - fy) + bot * fy) as f32).clamp(0.0, 1.0);
            }
        }
    }
    Ok(Image { pixels, ..*img })
}

/// Applies a sequence of augmentations left to right.
pub fn compose(img: &Image, seq: &[AugmentParams]) -> Result<Image> {
    seq.iter().try_fold(img.clone(), |acc, p| apply(&acc, p))
}

/// Ranges used when drawing random parameters.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SamplerConfig {
    /// Probability of returning the identity parameters.
    pub identity_prob: f64,
    /// Smallest crop side for geometric draws.
    pub min_crop: f64,
}

impl Default for SamplerConfig {
    fn default() -> Self {
        Self {
            identity_prob: 0.05,
            min_crop: 0.3,
        }
    }
}

pub fn sample_params(kind: AugmentKind, rng: &mut CounterRng) -> AugmentParams {
    sample_params_with(kind, rng, &SamplerConfig::default())
}

pub fn sample_params_with(kind: AugmentKind, rng: &mut CounterRng, cfg: &SamplerConfig) -> AugmentParams {
    if rng.next_f64() < cfg.identity_prob {
        return AugmentParams::identity(kind);
    }
    let theta = match kind {
        AugmentKind::Geo => {
            let w = rng.uniform(cfg.min_crop, 1.0);
            let h = rng.uniform(cfg.min_crop, 1.0);
            let x0 = rng.uniform(0.0, 1.0 - w);
            let y0 = rng.uniform(0.0, 1.0 - h);
            vec![x0, y0, h, w]
        }
        AugmentKind::Photo => (0..3).map(|_| rng.uniform(-1.0, 1.0)).collect(),
        AugmentKind::Rot => vec![rng.uniform(-1.0, 1.0)],
    };
    AugmentParams { kind, theta }
}
