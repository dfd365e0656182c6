use super::non_identity;
use crate::augment::{self, AugmentKind, AugmentParams};
use crate::checkpoint::Checkpoint;
use crate::data::{Image, LabeledImage};
use crate::error::{Error, Result};
use crate::losses::rho_from_embeddings;
use crate::rng::CounterRng;
use crate::steer::{embed_images, SteerMap};
use crate::tensor::Tensor;
use serde::Serialize;

#[derive(Clone, Debug, Serialize)]
pub struct RhoReport {
    pub kind: AugmentKind,
    pub mean_rho: f64,
    pub n_samples: usize,
    pub n_theta: usize,
    /// `mean‖M(e, θ_id) − e‖ / mean‖e‖` over every image passed in.
    pub anchoring: f64,
}

/// How far the map moves embeddings at the identity parameter, relative to their size.
pub fn identity_anchoring(map: &SteerMap<f32>, e: &Tensor<f32>) -> Result<f64> {
    let n = e.rows();
    if n == 0 {
        return Err(Error::validation("images", "no embeddings to anchor"));
    }
    let id = map.kind.identity();
    let theta = Tensor::new(vec![n, id.len()], (0..n).flat_map(|_| id.iter().map(|&v| v as f32)).collect())?;
    let mapped = map.apply_batch(e, &theta)?;
    let norm = |v: &mut dyn Iterator<Item = f64>| v.map(|x| x * x).sum::<f64>().sqrt();
    let (mut moved, mut size) = (0.0, 0.0);
    for i in 0..n {
        moved += norm(&mut mapped.row(i).iter().zip(e.row(i)).map(|(a, b)| (a - b) as f64));
        size += norm(&mut e.row(i).iter().map(|&a| a as f64));
    }
    if size == 0.0 {
        return Err(Error::Domain {
            op: "identity_anchoring",
            msg: "all embeddings are zero".into(),
        });
    }
    Ok(moved / size)
}

/// Mean per-sample ρ over `n_samples` images × `n_theta` non-identity draws.
pub fn measure_rho(
    ck: &Checkpoint,
    images: &[LabeledImage],
    kind: AugmentKind,
    n_samples: usize,
    n_theta: usize,
    seed: u64,
) -> Result<RhoReport> {
    let map = ck.map(kind)?;
    if n_samples == 0 || n_theta == 0 {
        return Err(Error::validation("n_samples", "need at least one sample and one θ"));
    }
    let n = n_samples.min(images.len());
    if n == 0 {
        return Err(Error::validation("images", "no images to measure on"));
    }
    let mut rng = CounterRng::new(seed).stream(0x72686f + kind as u64);
    let mut srcs: Vec<&Image> = Vec::with_capacity(n * n_theta);
    let mut params: Vec<AugmentParams> = Vec::with_capacity(n * n_theta);
    for li in &images[..n] {
        for _ in 0..n_theta {
            srcs.push(&li.image);
            params.push(non_identity(kind, &mut rng));
        }
    }
    let aug: Vec<Image> = srcs.iter().zip(&params).map(|(img, p)| augment::apply(img, p)).collect::<Result<_>>()?;
    let clean = embed_images(&ck.model, &ck.standardizer, &srcs)?;
    let e_aug = embed_images(&ck.model, &ck.standardizer, &aug.iter().collect::<Vec<_>>())?;
    let theta = Tensor::new(
        vec![params.len(), kind.theta_dim()],
        params.iter().flat_map(|p| p.theta_f32()).collect(),
    )?;
    let mapped = map.apply_batch(&clean, &theta)?;
    let total: f64 = (0..params.len())
        .map(|i| rho_from_embeddings(mapped.row(i), clean.row(i), e_aug.row(i)))
        .sum();
    let mean_rho = total / params.len() as f64;
    if !mean_rho.is_finite() {
        return Err(Error::NonFinite("mean ρ".into()));
    }
    let all: Vec<&Image> = images.iter().map(|li| &li.image).collect();
    let anchoring = identity_anchoring(map, &embed_images(&ck.model, &ck.standardizer, &all)?)?;
    Ok(RhoReport {
        kind,
        mean_rho,
        n_samples: n,
        n_theta,
        anchoring,
    })
}
