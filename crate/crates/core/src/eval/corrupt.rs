//! Synthetic corruptions in the spirit of ImageNet-C, with fixed severity tables.
//!
//! | name           | parameter          | severity 1..5                  |
//! |----------------|--------------------|--------------------------------|
//! | gaussian_noise | σ                  | 0.04 0.08 0.12 0.18 0.26       |
//! | shot_noise     | photons per unit   | 60 25 12 5 3                   |
//! | brightness     | shift δ on RGB     | 0.1 0.2 0.3 0.4 0.5            |
//! | contrast       | kept fraction      | 0.75 0.6 0.45 0.3 0.15         |
//! | pixelate       | block side         | 2 3 4 6 8                      |
//! | box_blur       | window radius      | 1 2 3 4 5                      |

use crate::augment::apply_photometric;
use crate::data::{Image, CHANNELS};
use crate::error::{Error, Result};
use crate::rng::CounterRng;
use serde::{Deserialize, Serialize};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Corruption {
    GaussianNoise,
    ShotNoise,
    Brightness,
    Contrast,
    Pixelate,
    BoxBlur,
}

const TABLES: [[f64; 5]; 6] = [
    [0.04, 0.08, 0.12, 0.18, 0.26],
    [60.0, 25.0, 12.0, 5.0, 3.0],
    [0.1, 0.2, 0.3, 0.4, 0.5],
    [0.75, 0.6, 0.45, 0.3, 0.15],
    [2.0, 3.0, 4.0, 6.0, 8.0],
    [1.0, 2.0, 3.0, 4.0, 5.0],
];

impl Corruption {
    pub const ALL: [Corruption; 6] = [
        Self::GaussianNoise,
        Self::ShotNoise,
        Self::Brightness,
        Self::Contrast,
        Self::Pixelate,
        Self::BoxBlur,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Self::GaussianNoise => "gaussian_noise",
            Self::ShotNoise => "shot_noise",
            Self::Brightness => "brightness",
            Self::Contrast => "contrast",
            Self::Pixelate => "pixelate",
            Self::BoxBlur => "box_blur",
        }
    }

    /// The table entry for `severity` in 1..=5.
    pub fn parameter(self, severity: u8) -> Result<f64> {
        if !(1..=5).contains(&severity) {
            return Err(Error::validation("severity", format!("must be 1..5, got {severity}")));
        }
        Ok(TABLES[self as usize][severity as usize - 1])
    }
}

impl std::fmt::Display for Corruption {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

impl std::str::FromStr for Corruption {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|c| c.name() == s)
            .ok_or_else(|| Error::validation("corruption", format!("unknown corruption `{s}`")))
    }
}

/// Knuth's multiplication method; fine for the small rates used here.
fn poisson(lambda: f64, rng: &mut CounterRng) -> f64 {
    let l = (-lambda).exp();
    let mut k = 0.0;
    let mut p = 1.0;
    loop {
        p *= rng.next_f64();
        if p <= l {
            return k;
        }
        k += 1.0;
    }
}

fn map_pixels(img: &Image, mut f: impl FnMut(f32) -> f32) -> Image {
    Image {
        height: img.height,
        width: img.width,
        pixels: img.pixels.iter().map(|&v| f(v).clamp(0.0, 1.0)).collect(),
    }
}

fn pixelate(img: &Image, block: usize) -> Image {
    let (h, w) = (img.height, img.width);
    let mut out = vec![0.0f32; img.pixels.len()];
    for by in (0..h).step_by(block) {
        for bx in (0..w).step_by(block) {
            let (ye, xe) = ((by + block).min(h), (bx + block).min(w));
            let n = ((ye - by) * (xe - bx)) as f32;
            for c in 0..CHANNELS {
                let mut s = 0.0;
                for y in by..ye {
                    for x in bx..xe {
                        s += img.get(y, x, c);
                    }
                }
                for y in by..ye {
                    for x in bx..xe {
                        out[(y * w + x) * CHANNELS + c] = s / n;
                    }
                }
            }
        }
    }
    Image { height: h, width: w, pixels: out }
}

fn box_blur(img: &Image, r: usize) -> Image {
    let (h, w) = (img.height, img.width);
    let r = r as isize;
    let clamp = |v: isize, n: usize| v.clamp(0, n as isize - 1) as usize;
    let mut out = vec![0.0f32; img.pixels.len()];
    let n = ((2 * r + 1) * (2 * r + 1)) as f32;
    for y in 0..h {
        for x in 0..w {
            for c in 0..CHANNELS {
                let mut s = 0.0;
                for dy in -r..=r {
                    for dx in -r..=r {
                        s += img.get(clamp(y as isize + dy, h), clamp(x as isize + dx, w), c);
                    }
                }
                out[(y * w + x) * CHANNELS + c] = s / n;
            }
        }
    }
    Image { height: h, width: w, pixels: out }
}

/// Applies a corruption. Noise draws come from `rng`.
pub fn corrupt(img: &Image, c: Corruption, severity: u8, rng: &mut CounterRng) -> Result<Image> {
    let p = c.parameter(severity)?;
    Ok(match c {
        Corruption::GaussianNoise => map_pixels(img, |v| v + (rng.normal() * p) as f32),
        Corruption::ShotNoise => map_pixels(img, |v| (poisson(v as f64 * p, rng) / p) as f32),
        Corruption::Brightness => apply_photometric(img, &[p, p, p])?,
        Corruption::Contrast => {
            let mean = img.pixels.iter().map(|&v| v as f64).sum::<f64>() / img.pixels.len().max(1) as f64;
            map_pixels(img, |v| ((v as f64 - mean) * p + mean) as f32)
        }
        Corruption::Pixelate => pixelate(img, p as usize),
        Corruption::BoxBlur => box_blur(img, p as usize),
    })
}
