//! Datasets: procedurally generated colored shapes and the CIFAR-10 binary format.

use crate::error::{Error, Result};
use crate::rng::CounterRng;
use crate::tensor::Tensor;
use serde::{Deserialize, Serialize};
use std::f64::consts::PI;
use std::path::{Path, PathBuf};

pub const IMAGE_SIZE: usize = 32;
pub const CHANNELS: usize = 3;
pub const COLOR_BUCKETS: usize = 8;

pub const SHAPE_NAMES: [&str; 10] = [
    "circle", "square", "triangle", "cross", "ring", "bar", "L", "T", "diamond", "star",
];

/// An `H×W×3` image, row-major, channels last, values in `[0, 1]`.
#[derive(Clone, Debug, PartialEq)]
pub struct Image {
    pub height: usize,
    pub width: usize,
    pub pixels: Vec<f32>,
}

impl Image {
    pub fn new(height: usize, width: usize, pixels: Vec<f32>) -> Result<Self> {
        if pixels.len() != height * width * CHANNELS {
            return Err(Error::Shape {
                op: "image",
                lhs: vec![height, width, CHANNELS],
                rhs: vec![pixels.len()],
            });
        }
        if let Some(v) = pixels.iter().find(|v| !(0.0..=1.0).contains(*v)) {
            return Err(Error::validation("pixels", format!("value {v} outside [0, 1]")));
        }
        Ok(Self { height, width, pixels })
    }

    pub fn filled(height: usize, width: usize, rgb: [f32; 3]) -> Self {
        let pixels = (0..height * width).flat_map(|_| rgb).collect();
        Self { height, width, pixels }
    }

    #[inline]
    pub fn get(&self, y: usize, x: usize, c: usize) -> f32 {
        self.pixels[(y * self.width + x) * CHANNELS + c]
    }

    pub fn mean_abs_diff(&self, other: &Image) -> f64 {
        self.pixels
            .iter()
            .zip(&other.pixels)
            .map(|(a, b)| (a - b).abs() as f64)
            .sum::<f64>()
            / self.pixels.len() as f64
    }

    /// Encodes as an 8-bit RGB PNG.
    pub fn to_png(&self) -> Vec<u8> {
        let mut out = Vec::new();
        {
            let mut enc = png::Encoder::new(&mut out, self.width as u32, self.height as u32);
            enc.set_color(png::ColorType::Rgb);
            enc.set_depth(png::BitDepth::Eight);
            let bytes: Vec<u8> = self
                .pixels
                .iter()
                .map(|v| (v.clamp(0.0, 1.0) * 255.0).round() as u8)
                .collect();
            let mut w = enc.write_header().expect("in-memory PNG header");
            w.write_image_data(&bytes).expect("in-memory PNG data");
        }
        out
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct LabeledImage {
    pub image: Image,
    pub class_label: usize,
    /// Dominant foreground hue bucket in `[0, COLOR_BUCKETS)`.
    pub aux_color_label: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ShapesConfig {
    pub n_train: usize,
    pub n_eval: usize,
    pub num_classes: usize,
    pub color_buckets: usize,
    /// Shape half-extent as a fraction of the image side.
    pub size_range: [f64; 2],
    /// Minimum distance of the shape's bounding circle from the border.
    pub margin: f64,
    /// Shape rotation jitter, radians either way.
    pub rotation_jitter: f64,
    pub background_value_range: [f64; 2],
    pub background_saturation_max: f64,
    pub noise_std: f64,
    pub seed: u64,
}

impl Default for ShapesConfig {
    fn default() -> Self {
        Self {
            n_train: 5000,
            n_eval: 1000,
            num_classes: 10,
            color_buckets: COLOR_BUCKETS,
            size_range: [0.2, 0.34],
            margin: 0.04,
            rotation_jitter: 0.25,
            background_value_range: [0.1, 0.5],
            background_saturation_max: 0.2,
            noise_std: 0.02,
            seed: 0,
        }
    }
}

impl ShapesConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n_train == 0 {
            return Err(Error::validation("n_train", "must be positive"));
        }
        if self.n_eval == 0 {
            return Err(Error::validation("n_eval", "must be positive"));
        }
        if !(2..=SHAPE_NAMES.len()).contains(&self.num_classes) {
            return Err(Error::validation("num_classes", "must be within 2..=10"));
        }
        if self.color_buckets != COLOR_BUCKETS {
            return Err(Error::validation("color_buckets", "only 8 hue buckets are supported"));
        }
        let [lo, hi] = self.size_range;
        if !(lo > 0.0 && lo <= hi && hi + self.margin < 0.5) {
            return Err(Error::validation("size_range", "shape must fit inside the image"));
        }
        let [vlo, vhi] = self.background_value_range;
        if !(0.0..=1.0).contains(&vlo) || !(vlo..=1.0).contains(&vhi) {
            return Err(Error::validation("background_value_range", "must lie within [0, 1]"));
        }
        Ok(())
    }
}

/// Where a dataset comes from; stored in checkpoints so it can be rebuilt.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "source", rename_all = "snake_case", deny_unknown_fields)]
pub enum DatasetSpec {
    Shapes(ShapesConfig),
    Cifar10 { dir: PathBuf },
}

impl Default for DatasetSpec {
    fn default() -> Self {
        DatasetSpec::Shapes(ShapesConfig::default())
    }
}

impl DatasetSpec {
    pub fn load(&self) -> Result<Dataset> {
        match self {
            DatasetSpec::Shapes(c) => generate_shapes(c),
            DatasetSpec::Cifar10 { dir } => load_cifar10(dir),
        }
    }
}

#[derive(Clone, Debug)]
pub struct Dataset {
    pub train: Vec<LabeledImage>,
    pub eval: Vec<LabeledImage>,
    pub num_classes: usize,
    pub seed: u64,
}

impl Dataset {
    pub fn split(&self, name: Split) -> &[LabeledImage] {
        match name {
            Split::Train => &self.train,
            Split::Eval => &self.eval,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    Train,
    Eval,
}

fn hsv_to_rgb(h: f64, s: f64, v: f64) -> [f64; 3] {
    let h6 = (h.rem_euclid(1.0)) * 6.0;
    let c = v * s;
    let x = c * (1.0 - ((h6 % 2.0) - 1.0).abs());
    let (r, g, b) = match h6 as usize {
        0 => (c, x, 0.0),
        1 => (x, c, 0.0),
        2 => (0.0, c, x),
        3 => (0.0, x, c),
        4 => (x, 0.0, c),
        _ => (c, 0.0, x),
    };
    let m = v - c;
    [r + m, g + m, b + m]
}

/// Hue in `[0, 1)` and chroma of an RGB triple.
pub fn hue_chroma(rgb: [f64; 3]) -> (f64, f64) {
    let [r, g, b] = rgb;
    let max = r.max(g).max(b);
    let min = r.min(g).min(b);
    let c = max - min;
    if c <= 0.0 {
        return (0.0, 0.0);
    }
    let h = if max == r {
        ((g - b) / c).rem_euclid(6.0)
    } else if max == g {
        (b - r) / c + 2.0
    } else {
        (r - g) / c + 4.0
    };
    ((h / 6.0).rem_euclid(1.0), c)
}

/// Hue bucket with the largest accumulated chroma over all pixels.
pub fn dominant_hue_bucket(img: &Image) -> usize {
    let mut acc = [0.0f64; COLOR_BUCKETS];
    for px in img.pixels.chunks(CHANNELS) {
        let (h, c) = hue_chroma([px[0] as f64, px[1] as f64, px[2] as f64]);
        let bucket = ((h * COLOR_BUCKETS as f64) as usize).min(COLOR_BUCKETS - 1);
        acc[bucket] += c;
    }
    let mut best = 0;
    for (i, &v) in acc.iter().enumerate() {
        if v > acc[best] {
            best = i;
        }
    }
    best
}

fn inside_polygon(p: (f64, f64), poly: &[(f64, f64)]) -> bool {
    let mut inside = false;
    let mut j = poly.len() - 1;
    for i in 0..poly.len() {
        let (xi, yi) = poly[i];
        let (xj, yj) = poly[j];
        if (yi > p.1) != (yj > p.1) && p.0 < (xj - xi) * (p.1 - yi) / (yj - yi) + xi {
            inside = !inside;
        }
        j = i;
    }
    inside
}

/// Membership test in shape-local coordinates (unit half-extent).
fn inside_shape(class: usize, qx: f64, qy: f64, star: &[(f64, f64)]) -> bool {
    let r = (qx * qx + qy * qy).sqrt();
    let (ax, ay) = (qx.abs(), qy.abs());
    let within = |v: f64, lo: f64, hi: f64| (lo..=hi).contains(&v);
    match class {
        0 => r <= 1.0,
        1 => ax.max(ay) <= 0.8,
        2 => inside_polygon((qx, qy), &[(0.0, -0.95), (0.95, 0.8), (-0.95, 0.8)]),
        3 => (ax <= 0.3 && ay <= 0.95) || (ay <= 0.3 && ax <= 0.95),
        4 => (0.55..=1.0).contains(&r),
        5 => ax <= 0.95 && ay <= 0.3,
        6 => (within(qx, -0.8, -0.25) && ay <= 0.9) || (within(qy, 0.35, 0.9) && within(qx, -0.8, 0.8)),
        7 => (within(qy, -0.9, -0.4) && ax <= 0.9) || (ax <= 0.25 && ay <= 0.9),
        8 => ax + ay <= 1.0,
        _ => inside_polygon((qx, qy), star),
    }
}

fn star_polygon() -> Vec<(f64, f64)> {
    (0..10)
        .map(|i| {
            let a = -PI / 2.0 + i as f64 * PI / 5.0;
            let rad = if i % 2 == 0 { 1.0 } else { 0.45 };
            (rad * a.cos(), rad * a.sin())
        })
        .collect()
}

fn render_shape(cfg: &ShapesConfig, class: usize, rng: &mut CounterRng) -> (Image, usize) {
    let n = IMAGE_SIZE;
    let size = rng.uniform(cfg.size_range[0], cfg.size_range[1]);
    let lo = size + cfg.margin;
    let cx = rng.uniform(lo, 1.0 - lo);
    let cy = rng.uniform(lo, 1.0 - lo);
    let angle = rng.uniform(-cfg.rotation_jitter, cfg.rotation_jitter);
    let bucket = rng.below(cfg.color_buckets);
    let hue = (bucket as f64 + rng.uniform(0.15, 0.85)) / cfg.color_buckets as f64;
    let fg = hsv_to_rgb(hue, rng.uniform(0.7, 1.0), rng.uniform(0.75, 1.0));
    let bg = hsv_to_rgb(
        rng.next_f64(),
        rng.uniform(0.0, cfg.background_saturation_max),
        rng.uniform(cfg.background_value_range[0], cfg.background_value_range[1]),
    );
    let star = star_polygon();
    let (sin, cos) = angle.sin_cos();
    let mut pixels = Vec::with_capacity(n * n * CHANNELS);
    for y in 0..n {
        for x in 0..n {
            // 3×3 supersampling for anti-aliased edges.
            let mut cover = 0.0;
            for sy in 0..3 {
                for sx in 0..3 {
                    let px = (x as f64 + (sx as f64 + 0.5) / 3.0) / n as f64 - cx;
                    let py = (y as f64 + (sy as f64 + 0.5) / 3.0) / n as f64 - cy;
                    let qx = (cos * px + sin * py) / size;
                    let qy = (-sin * px + cos * py) / size;
                    if inside_shape(class, qx, qy, &star) {
                        cover += 1.0 / 9.0;
                    }
                }
            }
            for c in 0..CHANNELS {
                let v = cover * fg[c] + (1.0 - cover) * bg[c] + cfg.noise_std * rng.normal();
                pixels.push(v.clamp(0.0, 1.0) as f32);
            }
        }
    }
    (Image { height: n, width: n, pixels }, bucket)
}

/// Deterministic colored-shapes dataset. Image `i` of a split is drawn from its
/// own stream, so splits are reproducible independently of their sizes.
pub fn generate_shapes(cfg: &ShapesConfig) -> Result<Dataset> {
    cfg.validate()?;
    let root = CounterRng::new(cfg.seed);
    let split = |tag: u64, count: usize| -> Vec<LabeledImage> {
        (0..count)
            .map(|i| {
                let mut rng = root.stream((tag << 32) | i as u64);
                let class_label = i % cfg.num_classes;
                let (image, aux_color_label) = render_shape(cfg, class_label, &mut rng);
                LabeledImage {
                    image,
                    class_label,
                    aux_color_label,
                }
            })
            .collect()
    };
    Ok(Dataset {
        train: split(1, cfg.n_train),
        eval: split(2, cfg.n_eval),
        num_classes: cfg.num_classes,
        seed: cfg.seed,
    })
}

pub const CIFAR_RECORD: usize = 1 + IMAGE_SIZE * IMAGE_SIZE * CHANNELS;

/// Parses CIFAR-10 binary records: one label byte, then 1024 R, 1024 G, 1024 B bytes.
pub fn parse_cifar10(bytes: &[u8], path: &Path) -> Result<Vec<LabeledImage>> {
    if bytes.is_empty() || !bytes.len().is_multiple_of(CIFAR_RECORD) {
        return Err(Error::format(
            path,
            format!("length {} is not a positive multiple of {CIFAR_RECORD}", bytes.len()),
        ));
    }
    let plane = IMAGE_SIZE * IMAGE_SIZE;
    bytes
        .chunks(CIFAR_RECORD)
        .enumerate()
        .map(|(r, rec)| {
            let label = rec[0] as usize;
            if label > 9 {
                return Err(Error::format(path, format!("record {r}: label byte {label} > 9")));
            }
            let mut pixels = Vec::with_capacity(plane * CHANNELS);
            for p in 0..plane {
                for c in 0..CHANNELS {
                    pixels.push(rec[1 + c * plane + p] as f32 / 255.0);
                }
            }
            let image = Image {
                height: IMAGE_SIZE,
                width: IMAGE_SIZE,
                pixels,
            };
            let aux_color_label = dominant_hue_bucket(&image);
            Ok(LabeledImage {
                image,
                class_label: label,
                aux_color_label,
            })
        })
        .collect()
}

fn read(path: &Path) -> Result<Vec<u8>> {
    std::fs::read(path).map_err(|e| Error::io(path, e))
}

/// Loads `data_batch_*.bin` as the training split and `test_batch.bin` as eval.
pub fn load_cifar10(dir: &Path) -> Result<Dataset> {
    let mut batches: Vec<PathBuf> = std::fs::read_dir(dir)
        .map_err(|e| Error::io(dir, e))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| {
            p.file_name()
                .and_then(|n| n.to_str())
                .is_some_and(|n| n.starts_with("data_batch_") && n.ends_with(".bin"))
        })
        .collect();
    batches.sort();
    if batches.is_empty() {
        return Err(Error::format(dir, "no data_batch_*.bin files found"));
    }
    let mut train = Vec::new();
    for b in &batches {
        train.extend(parse_cifar10(&read(b)?, b)?);
    }
    let test = dir.join("test_batch.bin");
    let eval = if test.exists() {
        parse_cifar10(&read(&test)?, &test)?
    } else {
        Vec::new()
    };
    Ok(Dataset {
        train,
        eval,
        num_classes: 10,
        seed: 0,
    })
}

/// Per-channel standardization statistics from a training split.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Standardizer {
    pub mean: [f64; 3],
    pub std: [f64; 3],
}

impl Standardizer {
    pub fn fit(images: &[LabeledImage]) -> Self {
        let mut sum = [0.0f64; 3];
        let mut sq = [0.0f64; 3];
        let mut n = 0usize;
        for li in images {
            for px in li.image.pixels.chunks(CHANNELS) {
                for c in 0..CHANNELS {
                    let v = px[c] as f64;
                    sum[c] += v;
                    sq[c] += v * v;
                }
                n += 1;
            }
        }
        let n = n.max(1) as f64;
        let mean = sum.map(|s| s / n);
        let mut std = [1.0; 3];
        for c in 0..CHANNELS {
            std[c] = (sq[c] / n - mean[c] * mean[c]).max(1e-12).sqrt();
        }
        Self { mean, std }
    }

    pub fn apply(&self, img: &Image) -> Vec<f32> {
        img.pixels
            .chunks(CHANNELS)
            .flat_map(|px| (0..CHANNELS).map(move |c| ((px[c] as f64 - self.mean[c]) / self.std[c]) as f32))
            .collect()
    }

    pub fn invert(&self, standardized: &[f32], height: usize, width: usize) -> Image {
        let pixels = standardized
            .chunks(CHANNELS)
            .flat_map(|px| (0..CHANNELS).map(move |c| (px[c] as f64 * self.std[c] + self.mean[c]) as f32))
            .collect();
        Image { height, width, pixels }
    }

    /// `[1, H, W, 3]` model input for a single image.
    pub fn to_model_input(&self, img: &Image) -> Tensor<f32> {
        Tensor::raw(vec![1, img.height, img.width, CHANNELS], self.apply(img))
    }

    /// Stacks images into a `[B, H, W, 3]` batch.
    pub fn batch<'a>(&self, images: impl IntoIterator<Item = &'a Image>) -> Tensor<f32> {
        let mut data = Vec::new();
        let mut dims = (0, 0, 0);
        for img in images {
            data.extend(self.apply(img));
            dims = (dims.0 + 1, img.height, img.width);
        }
        Tensor::raw(vec![dims.0, dims.1, dims.2, CHANNELS], data)
    }
}

#[derive(Serialize)]
struct ManifestEntry {
    id: usize,
    class_label: usize,
    aux_color_label: usize,
}

/// Writes `<dir>/<split>/<id>.png` plus a `manifest.json` per split.
pub fn export_png(ds: &Dataset, dir: &Path) -> Result<()> {
    for (name, split) in [("train", &ds.train), ("eval", &ds.eval)] {
        let sub = dir.join(name);
        std::fs::create_dir_all(&sub).map_err(|e| Error::io(&sub, e))?;
        let mut manifest = Vec::with_capacity(split.len());
        for (id, li) in split.iter().enumerate() {
            let p = sub.join(format!("{id}.png"));
            std::fs::write(&p, li.image.to_png()).map_err(|e| Error::io(&p, e))?;
            manifest.push(ManifestEntry {
                id,
                class_label: li.class_label,
                aux_color_label: li.aux_color_label,
            });
        }
        let p = sub.join("manifest.json");
        let json = serde_json::to_vec_pretty(&manifest).expect("manifest serializes");
        std::fs::write(&p, json).map_err(|e| Error::io(&p, e))?;
    }
    Ok(())
}
