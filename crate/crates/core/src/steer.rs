//! Latent steer maps `M_a(e, θ)`, ΔM extrapolation, composition and frozen-encoder fitting.
//!
//! `h = relu(θ·W_θ + b_θ)` (128 wide), `out = [h, e]·W_f + b_f`.

use crate::augment::{self, AugmentKind, AugmentParams, SamplerConfig};
use crate::data::{Image, LabeledImage, Standardizer};
use crate::error::{Error, Result};
use crate::model::{he_normal, Model, NamedParams};
use crate::rng::CounterRng;
use crate::tensor::{Graph, OptimizerState, Real, SgdConfig, Tensor, Var};
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;

pub const MAP_HIDDEN: usize = 128;

/// Default ΔM weights for equivariant and invariant checkpoints.
pub const DEFAULT_WM_EQUIVARIANT: f64 = 5.0;
pub const DEFAULT_WM_INVARIANT: f64 = 1.0;

#[derive(Clone, Debug, PartialEq)]
pub struct SteerMap<T: Real = f32> {
    pub kind: AugmentKind,
    embed_dim: usize,
    params: NamedParams<T>,
}

/// Graph handles for a bound [`SteerMap`].
#[derive(Clone, Copy, Debug)]
pub struct MapVars {
    pub theta_w: Var,
    pub theta_b: Var,
    pub fuse_w: Var,
    pub fuse_b: Var,
}

pub type SteerMaps<T = f32> = BTreeMap<AugmentKind, SteerMap<T>>;

fn names(kind: AugmentKind) -> [String; 4] {
    ["theta.weight", "theta.bias", "fuse.weight", "fuse.bias"].map(|s| format!("maps.{kind}.{s}"))
}

impl<T: Real> SteerMap<T> {
    /// Fusion layer starts as `[small noise; I]` so the map begins near `M(e, θ) = e`.
    pub fn new(kind: AugmentKind, embed_dim: usize, seed: u64) -> Self {
        let mut rng = CounterRng::new(seed).stream(0x6d61_7000 + kind as u64);
        let td = kind.theta_dim();
        let d = embed_dim;
        let mut fw = vec![T::zero(); (MAP_HIDDEN + d) * d];
        for v in fw.iter_mut().take(MAP_HIDDEN * d) {
            *v = T::from_f64c(rng.uniform(-0.01, 0.01));
        }
        for i in 0..d {
            fw[(MAP_HIDDEN + i) * d + i] = T::one();
        }
        let tensors = [
            he_normal(&[td, MAP_HIDDEN], td, &mut rng),
            Tensor::zeros(vec![MAP_HIDDEN]),
            Tensor::raw(vec![MAP_HIDDEN + d, d], fw),
            Tensor::zeros(vec![d]),
        ];
        Self {
            kind,
            embed_dim,
            params: names(kind).into_iter().zip(tensors).collect(),
        }
    }

    /// The exact identity `M(e, θ) = e`: zero θ path and `W_f = [0; I]`.
    pub fn identity(kind: AugmentKind, embed_dim: usize) -> Self {
        let mut m = Self::new(kind, embed_dim, 0);
        for (i, (_, t)) in m.params.iter_mut().enumerate() {
            if i != 2 {
                t.data_mut().iter_mut().for_each(|v| *v = T::zero());
            }
        }
        let d = embed_dim;
        let fw = m.params[2].1.data_mut();
        fw[..MAP_HIDDEN * d].iter_mut().for_each(|v| *v = T::zero());
        m
    }

    pub fn from_parts(kind: AugmentKind, embed_dim: usize, params: NamedParams<T>) -> Result<Self> {
        let td = kind.theta_dim();
        let d = embed_dim;
        let expected = [
            vec![td, MAP_HIDDEN],
            vec![MAP_HIDDEN],
            vec![MAP_HIDDEN + d, d],
            vec![d],
        ];
        let want = names(kind);
        if params.len() != 4 {
            return Err(Error::validation(format!("maps.{kind}"), "expected 4 tensors"));
        }
        for ((name, t), (wn, ws)) in params.iter().zip(want.iter().zip(&expected)) {
            if name != wn || t.shape() != ws.as_slice() {
                return Err(Error::validation(
                    name.clone(),
                    format!("expected {wn} with shape {ws:?}, got {:?}", t.shape()),
                ));
            }
        }
        Ok(Self { kind, embed_dim, params })
    }

    pub fn embed_dim(&self) -> usize {
        self.embed_dim
    }

    pub fn params(&self) -> &NamedParams<T> {
        &self.params
    }

    pub fn params_mut(&mut self) -> impl Iterator<Item = (String, &mut Tensor<T>)> {
        self.params.iter_mut().map(|(n, t)| (n.clone(), t))
    }

    pub fn cast<U: Real>(&self) -> SteerMap<U> {
        SteerMap {
            kind: self.kind,
            embed_dim: self.embed_dim,
            params: self.params.iter().map(|(n, t)| (n.clone(), t.cast())).collect(),
        }
    }

    pub fn bind(&self, g: &mut Graph<T>, trainable: bool) -> MapVars {
        let mut put = |i: usize| {
            let t = self.params[i].1.clone();
            if trainable {
                g.param(t)
            } else {
                g.leaf(t)
            }
        };
        MapVars {
            theta_w: put(0),
            theta_b: put(1),
            fuse_w: put(2),
            fuse_b: put(3),
        }
    }

    /// `e: [B, D]`, `theta: [B, θ_dim]` on the graph.
    pub fn forward(&self, g: &mut Graph<T>, v: MapVars, e: Var, theta: Var) -> Result<Var> {
        let h = g.dense(theta, v.theta_w, v.theta_b)?;
        let h = g.relu(h);
        let z = g.concat(h, e)?;
        g.dense(z, v.fuse_w, v.fuse_b)
    }

    /// Batched inference.
    pub fn apply_batch(&self, e: &Tensor<T>, theta: &Tensor<T>) -> Result<Tensor<T>> {
        if theta.last_dim() != self.kind.theta_dim() {
            return Err(Error::Usage(format!(
                "{} map needs θ of length {}, got {}",
                self.kind,
                self.kind.theta_dim(),
                theta.last_dim()
            )));
        }
        let mut g = Graph::new();
        let v = self.bind(&mut g, false);
        let ev = g.leaf(e.clone());
        let tv = g.leaf(theta.clone());
        let out = self.forward(&mut g, v, ev, tv)?;
        Ok(g.value(out).clone())
    }

    /// `M(e, θ)` for one embedding.
    pub fn apply(&self, e: &[T], p: &AugmentParams) -> Result<Vec<T>> {
        if p.kind != self.kind {
            return Err(Error::Usage(format!("{} map cannot take {} parameters", self.kind, p.kind)));
        }
        p.validate()?;
        if e.len() != self.embed_dim {
            return Err(Error::Shape {
                op: "map_apply",
                lhs: vec![self.embed_dim],
                rhs: vec![e.len()],
            });
        }
        let et = Tensor::new(vec![1, e.len()], e.to_vec())?;
        let tt = Tensor::raw(
            vec![1, p.theta.len()],
            p.theta.iter().map(|&v| T::from_f64c(v)).collect(),
        );
        Ok(self.apply_batch(&et, &tt)?.into_data())
    }
}

/// `ΔM(e) = M(e) + w_m·(M(e) − e)`.
pub fn delta_steer<T: Real>(m: &SteerMap<T>, e: &[T], p: &AugmentParams, w_m: f64) -> Result<Vec<T>> {
    let mapped = m.apply(e, p)?;
    extrapolate(e, &mapped, w_m)
}

/// The ΔM step given an already mapped embedding.
pub fn extrapolate<T: Real>(e: &[T], mapped: &[T], w_m: f64) -> Result<Vec<T>> {
    if !(w_m >= 0.0 && w_m.is_finite()) {
        return Err(Error::validation("w_m", format!("must be a finite value ≥ 0, got {w_m}")));
    }
    let w = T::from_f64c(w_m);
    Ok(mapped.iter().zip(e).map(|(&m, &x)| m + w * (m - x)).collect())
}

/// Applies maps left to right.
pub fn compose_maps<T: Real>(e: &[T], seq: &[(&SteerMap<T>, &AugmentParams)]) -> Result<Vec<T>> {
    seq.iter().try_fold(e.to_vec(), |acc, (m, p)| m.apply(&acc, p))
}

/// An encoder whose parameters stay fixed while maps are fitted to it.
pub trait FrozenEncoder {
    fn embed_dim(&self) -> usize;
    /// Returns `(e(x_i), e(g(x_i; θ_i)))` as two `[N, D]` tensors.
    fn embed_views(&self, images: &[&Image], params: &[AugmentParams]) -> Result<(Tensor<f32>, Tensor<f32>)>;
}

/// A trained model plus the input standardization it expects.
pub struct FrozenModel<'a> {
    pub model: &'a Model<f32>,
    pub standardizer: &'a Standardizer,
}

/// Images per encoder call during inference.
pub const EMBED_CHUNK: usize = 256;

/// Embeds images in chunks, returning `[N, D]`.
pub fn embed_images(model: &Model<f32>, st: &Standardizer, images: &[&Image]) -> Result<Tensor<f32>> {
    if images.is_empty() {
        return Err(Error::validation("images", "nothing to embed"));
    }
    let mut data = Vec::with_capacity(images.len() * model.embed_dim());
    for chunk in images.chunks(EMBED_CHUNK) {
        let x = st.batch(chunk.iter().copied());
        data.extend(model.embed(&x)?.into_data());
    }
    Tensor::new(vec![images.len(), model.embed_dim()], data)
}

impl FrozenEncoder for FrozenModel<'_> {
    fn embed_dim(&self) -> usize {
        self.model.embed_dim()
    }

    fn embed_views(&self, images: &[&Image], params: &[AugmentParams]) -> Result<(Tensor<f32>, Tensor<f32>)> {
        let aug: Vec<Image> = images
            .iter()
            .zip(params)
            .map(|(img, p)| augment::apply(img, p))
            .collect::<Result<_>>()?;
        let clean = embed_images(self.model, self.standardizer, images)?;
        let augmented = embed_images(self.model, self.standardizer, &aug.iter().collect::<Vec<_>>())?;
        Ok((clean, augmented))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct FitConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub base_lr: f64,
    /// θ draws per training image.
    pub views_per_image: usize,
    /// Global gradient-norm clip; 0 disables.
    pub clip_norm: f64,
    pub seed: u64,
}

impl Default for FitConfig {
    fn default() -> Self {
        Self {
            epochs: 30,
            batch_size: 128,
            base_lr: 0.01,
            views_per_image: 2,
            clip_norm: 1.0,
            seed: 0,
        }
    }
}

/// Encoder outputs captured once and reused for every fitting epoch.
#[derive(Clone, Debug)]
pub struct PairCache {
    pub kind: AugmentKind,
    pub clean: Tensor<f32>,
    pub theta: Tensor<f32>,
    pub augmented: Tensor<f32>,
}

impl PairCache {
    pub fn collect(
        enc: &dyn FrozenEncoder,
        images: &[LabeledImage],
        kind: AugmentKind,
        views: usize,
        rng: &mut CounterRng,
    ) -> Result<Self> {
        let mut imgs = Vec::new();
        let mut params = Vec::new();
        for li in images {
            for _ in 0..views {
                imgs.push(&li.image);
                params.push(augment::sample_params_with(kind, rng, &SamplerConfig::default()));
            }
        }
        let (clean, augmented) = enc.embed_views(&imgs, &params)?;
        let theta = Tensor::raw(
            vec![params.len(), kind.theta_dim()],
            params.iter().flat_map(|p| p.theta_f32()).collect(),
        );
        Ok(Self {
            kind,
            clean,
            theta,
            augmented,
        })
    }

    pub fn len(&self) -> usize {
        self.clean.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn rows(&self, t: &Tensor<f32>, idx: &[usize]) -> Tensor<f32> {
        let d = t.last_dim();
        Tensor::raw(vec![idx.len(), d], idx.iter().flat_map(|&i| t.row(i).iter().copied()).collect())
    }
}

/// Batch-mean `‖M(e, θ) − e_aug‖²` on a graph.
pub fn equivariance_term<T: Real>(g: &mut Graph<T>, m: &SteerMap<T>, v: MapVars, e: Var, theta: Var, e_aug: Var) -> Result<Var> {
    let pred = m.forward(g, v, e, theta)?;
    let d = g.sq_l2_distance(pred, e_aug)?;
    Ok(g.mean(d))
}

/// Mean L_E of a map over a whole cache.
pub fn cache_loss(m: &SteerMap<f32>, cache: &PairCache) -> Result<f64> {
    let pred = m.apply_batch(&cache.clean, &cache.theta)?;
    let n = cache.len() as f64;
    Ok(pred
        .data()
        .chunks(m.embed_dim())
        .zip(cache.augmented.data().chunks(m.embed_dim()))
        .map(|(p, a)| p.iter().zip(a).map(|(&x, &y)| ((x - y) as f64).powi(2)).sum::<f64>())
        .sum::<f64>()
        / n)
}

#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
pub struct FitHistory {
    pub kind: AugmentKind,
    /// Full-cache L_E before training and after each epoch.
    pub loss: Vec<f64>,
}

/// Fits one map on cached pairs with Nesterov SGD and a cosine schedule.
pub fn fit_map(cache: &PairCache, cfg: &FitConfig) -> Result<(SteerMap<f32>, FitHistory)> {
    if cache.is_empty() || cfg.batch_size == 0 || cfg.epochs == 0 {
        return Err(Error::validation("fit", "need pairs, batch_size ≥ 1 and epochs ≥ 1"));
    }
    let d = cache.clean.last_dim();
    let mut map = SteerMap::<f32>::new(cache.kind, d, cfg.seed);
    let steps_per_epoch = cache.len().div_ceil(cfg.batch_size) as u64;
    let mut opt = OptimizerState::<f32>::new(SgdConfig {
        base_lr: cfg.base_lr,
        momentum: 0.9,
        nesterov: true,
        weight_decay: 0.0,
        warmup_steps: steps_per_epoch.min(100),
        total_steps: steps_per_epoch * cfg.epochs as u64,
    });
    let mut rng = CounterRng::new(cfg.seed).stream(0x6669_7400 + cache.kind as u64);
    let mut history = FitHistory {
        kind: cache.kind,
        loss: vec![cache_loss(&map, cache)?],
    };
    let mut order: Vec<usize> = (0..cache.len()).collect();
    for epoch in 0..cfg.epochs {
        rng.shuffle(&mut order);
        for idx in order.chunks(cfg.batch_size) {
            let mut g = Graph::<f32>::new();
            let v = map.bind(&mut g, true);
            let e = g.leaf(cache.rows(&cache.clean, idx));
            let t = g.leaf(cache.rows(&cache.theta, idx));
            let a = g.leaf(cache.rows(&cache.augmented, idx));
            let loss = equivariance_term(&mut g, &map, v, e, t, a)?;
            let lv = g.value(loss).item();
            if !lv.is_finite() {
                return Err(Error::NonFinite(format!("{} map fitting loss at epoch {epoch}", cache.kind)));
            }
            let grads = g.backward(loss)?;
            let vars = [v.theta_w, v.theta_b, v.fuse_w, v.fuse_b];
            let mut gs: Vec<Vec<f32>> = vars
                .iter()
                .zip(map.params())
                .map(|(&var, (_, t))| grads.get_or_zeros(var, t.len()))
                .collect();
            clip_global_norm(&mut gs, cfg.clip_norm);
            let mut ps: Vec<(String, &mut Tensor<f32>)> = map.params_mut().collect();
            opt.step(&mut ps, &gs)?;
        }
        let l = cache_loss(&map, cache)?;
        if !l.is_finite() {
            return Err(Error::NonFinite(format!("{} map fitting loss after epoch {epoch}", cache.kind)));
        }
        log::debug!("fit {} epoch {epoch}: L_E {l:.6}", cache.kind);
        history.loss.push(l);
    }
    Ok((map, history))
}

/// Rescales gradients so their joint l2 norm is at most `max_norm` (0 disables).
/// Returns the norm before clipping.
pub fn clip_global_norm<T: Real>(grads: &mut [Vec<T>], max_norm: f64) -> f64 {
    let norm = grads
        .iter()
        .flat_map(|g| g.iter())
        .map(|v| v.as_f64().powi(2))
        .sum::<f64>()
        .sqrt();
    if max_norm > 0.0 && norm > max_norm {
        let s = T::from_f64c(max_norm / norm);
        grads.iter_mut().flat_map(|g| g.iter_mut()).for_each(|v| *v = *v * s);
    }
    norm
}

/// Fits one map per kind against a frozen encoder; each kind sees its own θ draws.
pub fn fit_maps_frozen(
    enc: &dyn FrozenEncoder,
    images: &[LabeledImage],
    kinds: &[AugmentKind],
    cfg: &FitConfig,
) -> Result<(SteerMaps, Vec<FitHistory>)> {
    let mut maps = SteerMaps::new();
    let mut hist = Vec::new();
    for &kind in kinds {
        let mut rng = CounterRng::new(cfg.seed).stream(0x7061_6972 + kind as u64);
        let cache = PairCache::collect(enc, images, kind, cfg.views_per_image, &mut rng)?;
        let (m, h) = fit_map(&cache, cfg)?;
        log::info!(
            "fitted {kind} map: L_E {:.5} -> {:.5}",
            h.loss.first().copied().unwrap_or(f64::NAN),
            h.loss.last().copied().unwrap_or(f64::NAN)
        );
        maps.insert(kind, m);
        hist.push(h);
    }
    Ok((maps, hist))
}

/// Test double whose augmented embedding is exactly `e(x) + A·θ`.
pub struct AffineEncoder {
    /// `[pixels, D]` random projection giving `e(x)`.
    pub projection: Tensor<f32>,
    /// Per kind, `[θ_dim, D]`.
    pub shift: BTreeMap<AugmentKind, Tensor<f32>>,
}

impl AffineEncoder {
    pub fn new(pixels: usize, embed_dim: usize, scale: f64, seed: u64) -> Self {
        let mut rng = CounterRng::new(seed).stream(0xaff1);
        let proj_std = (1.0 / pixels as f64).sqrt();
        let projection = Tensor::raw(
            vec![pixels, embed_dim],
            (0..pixels * embed_dim).map(|_| (rng.normal() * proj_std) as f32).collect(),
        );
        let shift = AugmentKind::ALL
            .iter()
            .map(|&k| {
                let n = k.theta_dim() * embed_dim;
                let a = (0..n).map(|_| (rng.normal() * scale) as f32).collect();
                (k, Tensor::raw(vec![k.theta_dim(), embed_dim], a))
            })
            .collect();
        Self { projection, shift }
    }

    fn embed(&self, img: &Image) -> Vec<f32> {
        let d = self.projection.last_dim();
        let mut out = vec![0.0f32; d];
        for (p, &v) in img.pixels.iter().enumerate() {
            for (o, &w) in out.iter_mut().zip(self.projection.row(p)) {
                *o += v * w;
            }
        }
        out
    }
}

impl FrozenEncoder for AffineEncoder {
    fn embed_dim(&self) -> usize {
        self.projection.last_dim()
    }

    fn embed_views(&self, images: &[&Image], params: &[AugmentParams]) -> Result<(Tensor<f32>, Tensor<f32>)> {
        let d = self.embed_dim();
        let mut clean = Vec::new();
        let mut aug = Vec::new();
        for (img, p) in images.iter().zip(params) {
            let e = self.embed(img);
            let a = &self.shift[&p.kind];
            let mut shifted = e.clone();
            for (t, &th) in p.theta.iter().enumerate() {
                for (s, &w) in shifted.iter_mut().zip(a.row(t)) {
                    *s += th as f32 * w;
                }
            }
            clean.extend(e);
            aug.extend(shifted);
        }
        Ok((
            Tensor::new(vec![images.len(), d], clean)?,
            Tensor::new(vec![images.len(), d], aug)?,
        ))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::check_gradients;
    use proptest::prelude::*;

    fn photo(t: [f64; 3]) -> AugmentParams {
        AugmentParams::new(AugmentKind::Photo, t.to_vec()).unwrap()
    }

    #[test]
    fn output_shape_and_identity_map() {
        let m = SteerMap::<f32>::new(AugmentKind::Geo, 16, 1);
        let e: Vec<f32> = (0..16).map(|i| i as f32 * 0.1 - 0.5).collect();
        let p = AugmentParams::new(AugmentKind::Geo, vec![0.1, 0.2, 0.5, 0.6]).unwrap();
        assert_eq!(m.apply(&e, &p).unwrap().len(), 16);
        let id = SteerMap::<f32>::identity(AugmentKind::Geo, 16);
        assert_eq!(id.apply(&e, &p).unwrap(), e);
    }

    #[test]
    fn kind_mismatch_is_usage_error() {
        let m = SteerMap::<f32>::new(AugmentKind::Geo, 4, 1);
        let err = m.apply(&[0.0; 4], &photo([0.1, 0.0, 0.0])).unwrap_err();
        assert!(matches!(err, Error::Usage(_)), "{err:?}");
    }

    #[test]
    fn delta_examples() {
        // Hand-built M with M([1,0]) = [0,1]: a pure rotation in the fusion layer.
        let mut m = SteerMap::<f64>::identity(AugmentKind::Photo, 2);
        let fw = m.params_mut().nth(2).unwrap().1;
        let d = fw.data_mut();
        let base = MAP_HIDDEN * 2;
        d[base..base + 4].copy_from_slice(&[0.0, 1.0, -1.0, 0.0]);
        let p = photo([0.2, 0.0, 0.0]);
        assert_eq!(m.apply(&[1.0, 0.0], &p).unwrap(), vec![0.0, 1.0]);
        assert_eq!(delta_steer(&m, &[1.0, 0.0], &p, 5.0).unwrap(), vec![-5.0, 6.0]);
        assert_eq!(delta_steer(&m, &[1.0, 0.0], &p, 0.0).unwrap(), vec![0.0, 1.0]);

        let id = SteerMap::<f64>::identity(AugmentKind::Photo, 2);
        assert_eq!(delta_steer(&id, &[0.3, -0.7], &p, 9.0).unwrap(), vec![0.3, -0.7]);
        assert!(extrapolate(&[1.0f32], &[1.0], -1.0).is_err());
    }

    #[test]
    fn compose_examples() {
        let g = SteerMap::<f32>::new(AugmentKind::Geo, 8, 1);
        let e = vec![0.25f32; 8];
        assert_eq!(compose_maps::<f32>(&e, &[]).unwrap(), e);
        let p = AugmentParams::new(AugmentKind::Geo, vec![0.0, 0.0, 0.5, 0.5]).unwrap();
        assert_eq!(compose_maps(&e, &[(&g, &p)]).unwrap(), g.apply(&e, &p).unwrap());
    }

    #[test]
    fn map_gradients_match_finite_differences() {
        let m = SteerMap::<f64>::new(AugmentKind::Photo, 5, 3);
        let mut rng = CounterRng::new(4);
        let mut r = |shape: Vec<usize>| {
            let n: usize = shape.iter().product();
            Tensor::new(shape, (0..n).map(|_| rng.normal()).collect()).unwrap()
        };
        let mut inputs = vec![r(vec![4, 5]), r(vec![4, 3]), r(vec![4, 5])];
        inputs.extend(m.params().iter().map(|(_, t)| t.clone()));
        let report = check_gradients(
            &inputs,
            |g, vs| {
                let v = MapVars {
                    theta_w: vs[3],
                    theta_b: vs[4],
                    fuse_w: vs[5],
                    fuse_b: vs[6],
                };
                equivariance_term(g, &m, v, vs[0], vs[1], vs[2])
            },
            1e-4,
        )
        .unwrap();
        assert!(report.passed, "{report:?}");
    }

    #[test]
    fn fitting_recovers_affine_shift() {
        let ds = crate::data::generate_shapes(&crate::data::ShapesConfig {
            n_train: 600,
            n_eval: 10,
            ..Default::default()
        })
        .unwrap();
        let enc = AffineEncoder::new(32 * 32 * 3, 16, 0.3, 9);
        let cfg = FitConfig {
            epochs: 40,
            views_per_image: 4,
            ..Default::default()
        };
        let (maps, hist) = fit_maps_frozen(&enc, &ds.train, &[AugmentKind::Photo, AugmentKind::Geo], &cfg).unwrap();
        assert_eq!(maps.len(), 2);
        for h in hist {
            let (first, last) = (h.loss[0], *h.loss.last().unwrap());
            assert!(last <= first);
            assert!(last <= 1e-3, "{:?}: {first} -> {last}", h.kind);
        }
    }

    proptest! {
        #[test]
        fn delta_identity_holds(seed in 0u64..500, wm in 0.0f64..10.0) {
            let m = SteerMap::<f64>::new(AugmentKind::Rot, 6, seed);
            let mut rng = CounterRng::new(seed ^ 0x55);
            let e: Vec<f64> = (0..6).map(|_| rng.normal()).collect();
            let p = AugmentParams::new(AugmentKind::Rot, vec![rng.uniform(-1.0, 1.0)]).unwrap();
            let mapped = m.apply(&e, &p).unwrap();
            let delta = delta_steer(&m, &e, &p, wm).unwrap();
            for i in 0..6 {
                let lhs = delta[i] - e[i];
                let rhs = (1.0 + wm) * (mapped[i] - e[i]);
                prop_assert!((lhs - rhs).abs() <= 1e-6 * (1.0 + rhs.abs()));
            }
        }
    }
}
