use super::ood::{latent_views, tta_params};
use crate::augment::{self, AugmentKind};
use crate::checkpoint::Checkpoint;
use crate::data::Image;
use crate::error::{Error, Result};
use crate::steer::embed_images;
use serde::Serialize;
use std::time::Instant;

pub const MIN_REPETITIONS: usize = 5;

#[derive(Clone, Debug, Serialize)]
pub struct BenchReport {
    pub kind: AugmentKind,
    pub n_aug: usize,
    pub batch: usize,
    pub repetitions: usize,
    /// Augment every view in pixel space, encode all, classify.
    pub t_input_ms: f64,
    /// Encode the clean batch once.
    pub t_latent_encode_ms: f64,
    /// Map every θ in latent space, classify.
    pub t_latent_map_ms: f64,
    pub speedup: f64,
    /// Encoder samples consumed by one pass of each path.
    pub input_encoder_samples: u64,
    pub latent_encoder_samples: u64,
}

fn median(mut v: Vec<f64>) -> f64 {
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n % 2 == 1 { v[n / 2] } else { 0.5 * (v[n / 2 - 1] + v[n / 2]) }
}

fn ms(t: Instant) -> f64 {
    t.elapsed().as_secs_f64() * 1e3
}

/// Times input-space against latent-space TTA on one batch. Medians over
/// `repetitions` runs after one warmup.
pub fn bench_tta(ck: &Checkpoint, images: &[&Image], n_aug: usize, kind: AugmentKind, repetitions: usize, seed: u64) -> Result<BenchReport> {
    if repetitions < MIN_REPETITIONS {
        return Err(Error::validation("repetitions", format!("need at least {MIN_REPETITIONS}")));
    }
    if n_aug == 0 || images.is_empty() {
        return Err(Error::validation("n_aug", "need at least one image and one augmentation"));
    }
    ck.map(kind)?;
    let params = tta_params(kind, n_aug, seed);
    let input_pass = || -> Result<f64> {
        let t = Instant::now();
        let views: Vec<Image> = images
            .iter()
            .flat_map(|img| params.iter().map(move |p| augment::apply(img, p)))
            .collect::<Result<_>>()?;
        let e = embed_images(&ck.model, &ck.standardizer, &views.iter().collect::<Vec<_>>())?;
        std::hint::black_box(ck.model.classify(&e)?);
        Ok(ms(t))
    };
    let latent_pass = || -> Result<(f64, f64)> {
        let t = Instant::now();
        let clean = embed_images(&ck.model, &ck.standardizer, images)?;
        let enc = ms(t);
        let t = Instant::now();
        let v = latent_views(ck, &clean, kind, &params)?;
        std::hint::black_box(ck.model.classify(&v)?);
        Ok((enc, ms(t)))
    };

    ck.model.reset_encoded_samples();
    input_pass()?;
    let input_encoder_samples = ck.model.encoded_samples();
    ck.model.reset_encoded_samples();
    latent_pass()?;
    let latent_encoder_samples = ck.model.encoded_samples();

    let (mut ti, mut te, mut tm) = (Vec::new(), Vec::new(), Vec::new());
    for _ in 0..repetitions {
        ti.push(input_pass()?);
        let (e, m) = latent_pass()?;
        te.push(e);
        tm.push(m);
    }
    let (t_input_ms, t_latent_encode_ms, t_latent_map_ms) = (median(ti), median(te), median(tm));
    Ok(BenchReport {
        kind,
        n_aug,
        batch: images.len(),
        repetitions,
        t_input_ms,
        t_latent_encode_ms,
        t_latent_map_ms,
        speedup: t_input_ms / (t_latent_encode_ms + t_latent_map_ms).max(1e-9),
        input_encoder_samples,
        latent_encoder_samples,
    })
}

#[cfg(test)]
mod tests {
    use super::median;

    #[test]
    fn median_odd_and_even() {
        assert_eq!(median(vec![3.0, 1.0, 2.0]), 2.0);
        assert_eq!(median(vec![4.0, 1.0, 3.0, 2.0]), 2.5);
    }
}
