//! OOD detection from test-time-augmentation confidence.
//!
//! Views are aggregated by averaging logits. Softmax of the mean logit is the
//! renormalized geometric mean of the per-view softmax distributions, whereas a
//! literal geometric mean of raw logits is undefined once any logit is negative.

use super::corrupt::{corrupt, Corruption};
use crate::augment::{self, AugmentKind, AugmentParams, SamplerConfig};
use crate::checkpoint::Checkpoint;
use crate::data::{Image, LabeledImage};
use crate::error::{Error, Result};
use crate::rng::CounterRng;
use crate::steer::embed_images;
use crate::tensor::Tensor;
use serde::{Deserialize, Serialize};
use std::io::Write;
use std::time::Instant;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TtaMode {
    /// Encode once, then apply the map for every θ.
    Latent,
    /// Augment in pixel space and encode every view.
    Input,
}

impl std::str::FromStr for TtaMode {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "latent" => Ok(Self::Latent),
            "input" => Ok(Self::Input),
            other => Err(Error::validation("mode", format!("`{other}` is not latent or input"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct PrPoint {
    pub threshold: f64,
    pub precision: f64,
    pub recall: f64,
}

/// Precision and recall at every distinct score, in-distribution as positive,
/// thresholds descending.
pub fn pr_curve(in_conf: &[f64], out_conf: &[f64]) -> Result<Vec<PrPoint>> {
    if in_conf.is_empty() || out_conf.is_empty() {
        return Err(Error::validation("confidences", "both in- and out-of-distribution sets must be non-empty"));
    }
    if in_conf.iter().chain(out_conf).any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("confidence scores".into()));
    }
    let mut scored: Vec<(f64, bool)> = in_conf.iter().map(|&s| (s, true)).chain(out_conf.iter().map(|&s| (s, false))).collect();
    scored.sort_by(|a, b| b.0.total_cmp(&a.0));
    let pos = in_conf.len() as f64;
    let (mut tp, mut fp) = (0.0, 0.0);
    let mut out = Vec::new();
    let mut i = 0;
    while i < scored.len() {
        let t = scored[i].0;
        while i < scored.len() && scored[i].0 == t {
            if scored[i].1 { tp += 1.0 } else { fp += 1.0 }
            i += 1;
        }
        out.push(PrPoint {
            threshold: t,
            precision: tp / (tp + fp),
            recall: tp / pos,
        });
    }
    Ok(out)
}

/// Area under the PR curve by the step-wise rule `Σ (R_k − R_{k−1}) · P_k`.
pub fn ood_auc(in_conf: &[f64], out_conf: &[f64]) -> Result<f64> {
    let mut prev_r = 0.0;
    let mut auc = 0.0;
    for p in pr_curve(in_conf, out_conf)? {
        auc += (p.recall - prev_r) * p.precision;
        prev_r = p.recall;
    }
    Ok(auc)
}

pub fn write_pr_csv(points: &[PrPoint], mut w: impl Write) -> std::io::Result<()> {
    writeln!(w, "threshold,precision,recall")?;
    for p in points {
        writeln!(w, "{},{},{}", p.threshold, p.precision, p.recall)?;
    }
    Ok(())
}

/// θ draws for one call, shared by every image.
pub fn tta_params(kind: AugmentKind, n_aug: usize, seed: u64) -> Vec<AugmentParams> {
    let mut rng = CounterRng::new(seed).stream(0x747461 + kind as u64);
    (0..n_aug)
        .map(|_| augment::sample_params_with(kind, &mut rng, &SamplerConfig::default()))
        .collect()
}

fn max_softmax(mean_logits: &[f64]) -> f64 {
    let m = mean_logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let z: f64 = mean_logits.iter().map(|&v| (v - m).exp()).sum();
    1.0 / z
}

/// Rows of `logits` grouped `views` at a time per image → max softmax of the mean.
fn aggregate(logits: &Tensor<f32>, images: usize, views: usize) -> Vec<f64> {
    let c = logits.last_dim();
    (0..images)
        .map(|i| {
            let mut mean = vec![0.0f64; c];
            for v in 0..views {
                for (m, &l) in mean.iter_mut().zip(logits.row(i * views + v)) {
                    *m += l as f64 / views as f64;
                }
            }
            max_softmax(&mean)
        })
        .collect()
}

/// Latent views from precomputed clean embeddings: the unmapped embedding plus
/// one mapped copy per θ, as `[N·(n_aug+1), D]`.
pub fn latent_views(ck: &Checkpoint, clean: &Tensor<f32>, kind: AugmentKind, params: &[AugmentParams]) -> Result<Tensor<f32>> {
    let map = ck.map(kind)?;
    let (n, d, a) = (clean.rows(), clean.last_dim(), params.len());
    let mut rep = Vec::with_capacity(n * a * d);
    let mut th = Vec::with_capacity(n * a * kind.theta_dim());
    for i in 0..n {
        for p in params {
            rep.extend_from_slice(clean.row(i));
            th.extend(p.theta_f32());
        }
    }
    let mapped = map.apply_batch(&Tensor::new(vec![n * a, d], rep)?, &Tensor::new(vec![n * a, kind.theta_dim()], th)?)?;
    let mut out = Vec::with_capacity(n * (a + 1) * d);
    for i in 0..n {
        out.extend_from_slice(clean.row(i));
        for j in 0..a {
            out.extend_from_slice(mapped.row(i * a + j));
        }
    }
    Tensor::new(vec![n * (a + 1), d], out)
}

/// Per-image TTA confidence. Latent mode encodes each image exactly once.
pub fn tta_confidence(
    ck: &Checkpoint,
    images: &[&Image],
    n_aug: usize,
    mode: TtaMode,
    kind: AugmentKind,
    seed: u64,
) -> Result<Vec<f64>> {
    if n_aug < 1 {
        return Err(Error::validation("n_aug", "need at least one augmentation"));
    }
    if images.is_empty() {
        return Ok(Vec::new());
    }
    let params = tta_params(kind, n_aug, seed);
    match mode {
        TtaMode::Latent => {
            ck.map(kind)?;
            let clean = embed_images(&ck.model, &ck.standardizer, images)?;
            let views = latent_views(ck, &clean, kind, &params)?;
            Ok(aggregate(&ck.model.classify(&views)?, images.len(), n_aug + 1))
        }
        TtaMode::Input => {
            let mut out = Vec::with_capacity(images.len());
            // Bounded memory: one image's views at a time.
            for img in images {
                let aug: Vec<Image> = params.iter().map(|p| augment::apply(img, p)).collect::<Result<_>>()?;
                let e = embed_images(&ck.model, &ck.standardizer, &aug.iter().collect::<Vec<_>>())?;
                out.extend(aggregate(&ck.model.classify(&e)?, 1, n_aug));
            }
            Ok(out)
        }
    }
}

#[derive(Clone, Debug, Serialize)]
pub struct OodReport {
    pub corruption: Corruption,
    pub severity: u8,
    pub mode: TtaMode,
    pub kind: AugmentKind,
    pub n_images: usize,
    /// `(n_aug, auc_pr)`, ascending in `n_aug`.
    pub points: Vec<(usize, f64)>,
    pub elapsed_ms: Vec<f64>,
    /// PR curve per entry of `points`.
    #[serde(skip)]
    pub curves: Vec<Vec<PrPoint>>,
}

/// Clean eval images are in-distribution, their corrupted copies are OOD.
#[allow(clippy::too_many_arguments)]
pub fn ood_report(
    ck: &Checkpoint,
    images: &[LabeledImage],
    corruption: Corruption,
    severity: u8,
    augs: &[usize],
    mode: TtaMode,
    kind: AugmentKind,
    seed: u64,
) -> Result<OodReport> {
    if images.is_empty() {
        return Err(Error::validation("images", "no eval images"));
    }
    let mut augs = augs.to_vec();
    augs.sort_unstable();
    augs.dedup();
    let mut rng = CounterRng::new(seed).stream(0x636f7272);
    let bad: Vec<Image> = images
        .iter()
        .map(|li| corrupt(&li.image, corruption, severity, &mut rng))
        .collect::<Result<_>>()?;
    let clean: Vec<&Image> = images.iter().map(|l| &l.image).collect();
    let bad: Vec<&Image> = bad.iter().collect();
    let mut points = Vec::new();
    let mut elapsed_ms = Vec::new();
    let mut curves = Vec::new();
    for &n in &augs {
        let t = Instant::now();
        let cin = tta_confidence(ck, &clean, n, mode, kind, seed)?;
        let cout = tta_confidence(ck, &bad, n, mode, kind, seed)?;
        elapsed_ms.push(t.elapsed().as_secs_f64() * 1e3);
        points.push((n, ood_auc(&cin, &cout)?));
        curves.push(pr_curve(&cin, &cout)?);
    }
    Ok(OodReport {
        corruption,
        severity,
        mode,
        kind,
        n_images: images.len(),
        points,
        elapsed_ms,
        curves,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    /// Exhaustive oracle: every threshold (each score, plus +∞) labels scores at
    /// or above it positive; integrate precision over recall increments.
    fn brute_auc(inn: &[f64], out: &[f64]) -> f64 {
        let mut ts: Vec<f64> = inn.iter().chain(out).copied().collect();
        ts.push(f64::INFINITY);
        ts.sort_by(|a, b| b.total_cmp(a));
        ts.dedup();
        let mut pts: Vec<(f64, f64)> = ts
            .iter()
            .map(|&t| {
                let tp = inn.iter().filter(|&&s| s >= t).count() as f64;
                let fp = out.iter().filter(|&&s| s >= t).count() as f64;
                let prec = if tp + fp == 0.0 { 1.0 } else { tp / (tp + fp) };
                (tp / inn.len() as f64, prec)
            })
            .collect();
        pts.sort_by(|a, b| a.0.total_cmp(&b.0));
        pts.windows(2).map(|w| (w[1].0 - w[0].0) * w[1].1).sum()
    }

    #[test]
    fn auc_examples() {
        assert_eq!(ood_auc(&[0.9, 0.8], &[0.1, 0.2, 0.3]).unwrap(), 1.0);
        let a = ood_auc(&[0.5; 3], &[0.5; 5]).unwrap();
        assert!((a - 3.0 / 8.0).abs() < 1e-15);
        assert!(ood_auc(&[], &[0.1]).is_err());
        // Hand instance: in {0.9, 0.6, 0.4}, out {0.7, 0.3, 0.2}.
        // Recall steps happen at 0.9 (P=1), 0.6 (P=2/3) and 0.4 (P=3/4), each adding 1/3.
        let h = ood_auc(&[0.9, 0.6, 0.4], &[0.7, 0.3, 0.2]).unwrap();
        let expect = (1.0 / 3.0) * 1.0 + (1.0 / 3.0) * (2.0 / 3.0) + (1.0 / 3.0) * 0.75;
        assert!((h - expect).abs() < 1e-12);
        assert!((h - brute_auc(&[0.9, 0.6, 0.4], &[0.7, 0.3, 0.2])).abs() < 1e-12);
    }

    #[test]
    fn mean_of_identical_logits_is_the_single_view() {
        let row = [0.3f32, -1.2, 2.0];
        let t = Tensor::new(vec![4, 3], row.repeat(4)).unwrap();
        let single = aggregate(&Tensor::new(vec![1, 3], row.to_vec()).unwrap(), 1, 1)[0];
        assert!((aggregate(&t, 1, 4)[0] - single).abs() < 1e-12);
        let direct = (2.0f64).exp() / [0.3f64, -1.2, 2.0].iter().map(|v| v.exp()).sum::<f64>();
        assert!((single - direct).abs() < 1e-7);
    }

    #[test]
    fn csv_has_header_and_rows() {
        let pts = pr_curve(&[0.9], &[0.1]).unwrap();
        let mut buf = Vec::new();
        write_pr_csv(&pts, &mut buf).unwrap();
        let s = String::from_utf8(buf).unwrap();
        assert_eq!(s.lines().count(), 3);
        assert!(s.starts_with("threshold,precision,recall\n0.9,1,1\n"));
    }

    proptest! {
        #[test]
        fn auc_matches_brute_force(
            inn in proptest::collection::vec(0u8..12, 1..25),
            out in proptest::collection::vec(0u8..12, 1..25),
        ) {
            // Coarse integer scores force plenty of ties.
            let inn: Vec<f64> = inn.into_iter().map(|v| v as f64 / 11.0).collect();
            let out: Vec<f64> = out.into_iter().map(|v| v as f64 / 11.0).collect();
            let a = ood_auc(&inn, &out).unwrap();
            prop_assert!((0.0..=1.0).contains(&a));
            prop_assert!((a - brute_auc(&inn, &out)).abs() < 1e-12);
        }
    }
}
