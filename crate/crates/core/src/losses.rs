//! Training objectives and the equivariance measure ρ.
//!
//! Total objective: `L_CE + α Σ_a L_E^a + β (L_U(clean) + Σ_a L_U(aug_a))`, with the
//! `λ‖w‖²` part of the cross-entropy objective applied by the optimizer.

use crate::augment::{AugmentKind, AugmentParams};
use crate::error::{Error, Result};
use crate::model::{Model, ModelVars};
use crate::steer::{equivariance_term, MapVars, SteerMap, SteerMaps};
use crate::tensor::{Graph, Real, Tensor, Var};
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;

/// Floor on ρ's denominator.
pub const RHO_EPS: f64 = 1e-8;

/// Temperature quoted for raw embeddings.
pub const RAW_TAU: f64 = 0.1;
/// Desk default on the unit sphere, where squared distances live in [0, 4].
/// At 0.1 the term drives every pair of a 128 batch orthogonal and class
/// structure never forms.
pub const SPHERE_TAU: f64 = 1.0;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LossWeights {
    /// Equivariance weight α.
    pub alpha: f64,
    /// Uniformity weight β.
    pub beta: f64,
    /// Uniformity temperature τ.
    pub tau: f64,
    /// Weight decay λ.
    pub weight_decay: f64,
    /// Apply L_U to l2-normalized embeddings. On raw embeddings the term is
    /// unbounded below and training diverges.
    pub uniformity_on_sphere: bool,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self::main_text()
    }
}

impl LossWeights {
    /// α = β = 0.1.
    pub fn main_text() -> Self {
        Self {
            alpha: 0.1,
            beta: 0.1,
            tau: SPHERE_TAU,
            weight_decay: 1e-4,
            uniformity_on_sphere: true,
        }
    }

    /// α = 1.0, β = 0.1, the strongest setting of the α/β ablation.
    pub fn ablation_best() -> Self {
        Self {
            alpha: 1.0,
            ..Self::main_text()
        }
    }

    /// Cross-entropy and weight decay only.
    pub fn invariant() -> Self {
        Self {
            alpha: 0.0,
            beta: 0.0,
            ..Self::main_text()
        }
    }

    pub fn preset(name: &str) -> Result<Self> {
        match name {
            "main" => Ok(Self::main_text()),
            "ablation" => Ok(Self::ablation_best()),
            "invariant" => Ok(Self::invariant()),
            other => Err(Error::validation("preset", format!("`{other}` is not one of main, ablation, invariant"))),
        }
    }

    pub fn validate(&self) -> Result<()> {
        for (name, v) in [("alpha", self.alpha), ("beta", self.beta), ("weight_decay", self.weight_decay)] {
            if !(v >= 0.0 && v.is_finite()) {
                return Err(Error::validation(name, format!("must be finite and ≥ 0, got {v}")));
            }
        }
        if !(self.tau > 0.0 && self.tau.is_finite()) {
            return Err(Error::validation("tau", format!("must be > 0, got {}", self.tau)));
        }
        Ok(())
    }
}

/// Batch-mean softmax cross-entropy against one-hot labels.
pub fn cross_entropy_term<T: Real>(g: &mut Graph<T>, logits: Var, labels: &Tensor<T>) -> Result<Var> {
    g.softmax_cross_entropy(logits, labels)
}

/// Batch-mean `‖M(e, θ) − e_aug‖²`.
pub fn equivariance_loss<T: Real>(
    g: &mut Graph<T>,
    m: &SteerMap<T>,
    v: MapVars,
    e_clean: Var,
    theta: Var,
    e_aug: Var,
) -> Result<Var> {
    equivariance_term(g, m, v, e_clean, theta, e_aug)
}

/// `log Σ_{i≠j} exp(−‖e_i − e_j‖² / τ)`.
pub fn uniformity_loss<T: Real>(g: &mut Graph<T>, e: Var, tau: f64) -> Result<Var> {
    if !(tau > 0.0) {
        return Err(Error::validation("tau", "must be > 0"));
    }
    let d = g.pairwise_sq_distances(e)?;
    let s = g.scale(d, -1.0 / tau);
    g.logsumexp_off_diagonal(s)
}

/// Normalization eps for embeddings fed to the sphere variant of L_U.
pub const NORMALIZE_EPS: f64 = 1e-6;

fn uniformity_term<T: Real>(g: &mut Graph<T>, e: Var, w: &LossWeights) -> Result<Var> {
    let e = if w.uniformity_on_sphere { g.l2_normalize_floored(e, NORMALIZE_EPS) } else { e };
    uniformity_loss(g, e, w.tau)
}

/// One augmented view of the batch: images `g_a(x; θ_a)` and their θ rows.
#[derive(Clone, Debug)]
pub struct AugView<T: Real = f32> {
    pub kind: AugmentKind,
    pub images: Tensor<T>,
    pub theta: Tensor<T>,
}

#[derive(Clone, Debug)]
pub struct LossInputs<T: Real = f32> {
    pub clean: Tensor<T>,
    pub labels: Tensor<T>,
    pub views: Vec<AugView<T>>,
}

/// Graph nodes of every term, unweighted.
#[derive(Clone, Debug)]
pub struct LossTerms {
    pub total: Var,
    pub logits: Var,
    pub lce: Var,
    pub le: Vec<(AugmentKind, Var)>,
    pub lu_clean: Option<Var>,
    pub lu_aug: Vec<(AugmentKind, Var)>,
}

/// Logged values of each term, unweighted.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub lce: f64,
    pub le_geo: Option<f64>,
    pub le_photo: Option<f64>,
    pub le_rot: Option<f64>,
    pub lu_clean: Option<f64>,
    /// Sum over kinds of L_U on each augmented batch.
    pub lu_aug: Option<f64>,
    pub total: f64,
}

impl LossBreakdown {
    /// Recombines the terms with the given weights.
    pub fn weighted_sum(&self, w: &LossWeights) -> f64 {
        let le: f64 = [self.le_geo, self.le_photo, self.le_rot].iter().flatten().sum();
        self.lce + w.alpha * le + w.beta * (self.lu_clean.unwrap_or(0.0) + self.lu_aug.unwrap_or(0.0))
    }
}

impl LossTerms {
    pub fn breakdown<T: Real>(&self, g: &Graph<T>) -> LossBreakdown {
        let val = |v: Var| g.value(v).item().as_f64();
        let le = |k: AugmentKind| self.le.iter().find(|(kk, _)| *kk == k).map(|&(_, v)| val(v));
        LossBreakdown {
            lce: val(self.lce),
            le_geo: le(AugmentKind::Geo),
            le_photo: le(AugmentKind::Photo),
            le_rot: le(AugmentKind::Rot),
            lu_clean: self.lu_clean.map(val),
            lu_aug: (!self.lu_aug.is_empty()).then(|| self.lu_aug.iter().map(|&(_, v)| val(v)).sum()),
            total: val(self.total),
        }
    }
}

/// Builds the full objective on `g`. Terms whose weight is zero are not built at all,
/// so `α = β = 0` is exactly the cross-entropy term.
pub fn total_loss<T: Real>(
    g: &mut Graph<T>,
    model: &Model<T>,
    mv: &ModelVars,
    maps: &SteerMaps<T>,
    map_vars: &BTreeMap<AugmentKind, MapVars>,
    batch: &LossInputs<T>,
    w: &LossWeights,
) -> Result<LossTerms> {
    w.validate()?;
    let x = g.leaf(batch.clean.clone());
    let e = model.encode(g, mv, x)?;
    let logits = model.logits(g, mv, e)?;
    let lce = cross_entropy_term(g, logits, &batch.labels)?;
    let mut terms = LossTerms {
        total: lce,
        logits,
        lce,
        le: Vec::new(),
        lu_clean: None,
        lu_aug: Vec::new(),
    };
    if w.alpha == 0.0 && w.beta == 0.0 {
        return Ok(terms);
    }
    let mut reg = Vec::new();
    if w.beta > 0.0 {
        let lu = uniformity_term(g, e, w)?;
        terms.lu_clean = Some(lu);
        reg.push((w.beta, lu));
    }
    for view in &batch.views {
        let xa = g.leaf(view.images.clone());
        let ea = model.encode(g, mv, xa)?;
        if w.alpha > 0.0 {
            let (m, v) = match (maps.get(&view.kind), map_vars.get(&view.kind)) {
                (Some(m), Some(v)) => (m, *v),
                _ => return Err(Error::Usage(format!("no {} map bound for the equivariance term", view.kind))),
            };
            let th = g.leaf(view.theta.clone());
            let le = equivariance_loss(g, m, v, e, th, ea)?;
            terms.le.push((view.kind, le));
            reg.push((w.alpha, le));
        }
        if w.beta > 0.0 {
            let lu = uniformity_term(g, ea, w)?;
            terms.lu_aug.push((view.kind, lu));
            reg.push((w.beta, lu));
        }
    }
    let mut total = lce;
    for (c, v) in reg {
        let s = g.scale(v, c);
        total = g.add(total, s)?;
    }
    terms.total = total;
    Ok(terms)
}

fn l2(a: &[f32], b: &[f32]) -> f64 {
    a.iter().zip(b).map(|(&x, &y)| ((x - y) as f64).powi(2)).sum::<f64>().sqrt()
}

/// `‖M(e, θ) − e_aug‖ / max(‖e_aug − e‖, ε)` from precomputed embeddings.
pub fn rho_from_embeddings(mapped: &[f32], e_clean: &[f32], e_aug: &[f32]) -> f64 {
    l2(mapped, e_aug) / l2(e_aug, e_clean).max(RHO_EPS)
}

/// Per-sample ρ for one embedding pair. Identity θ leaves the denominator degenerate and is rejected.
pub fn rho(m: &SteerMap<f32>, e_clean: &[f32], e_aug: &[f32], p: &AugmentParams) -> Result<f64> {
    if p.is_identity() {
        return Err(Error::validation(
            "theta",
            "identity parameters make ρ degenerate; exclude them from the draw",
        ));
    }
    let mapped = m.apply(e_clean, p)?;
    Ok(rho_from_embeddings(&mapped, e_clean, e_aug))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::EncoderConfig;
    use crate::rng::CounterRng;
    use crate::tensor::{check_gradients, one_hot};
    use proptest::prelude::*;

    fn uni(rows: &[&[f64]], tau: f64) -> f64 {
        let d = rows[0].len();
        let mut g = Graph::<f64>::new();
        let x = g.leaf(Tensor::new(vec![rows.len(), d], rows.concat()).unwrap());
        let l = uniformity_loss(&mut g, x, tau).unwrap();
        g.value(l).item()
    }

    /// Direct double loop over ordered pairs, no stabilization.
    fn uni_oracle(rows: &[Vec<f64>], tau: f64) -> f64 {
        let mut s = 0.0;
        for (i, a) in rows.iter().enumerate() {
            for (j, b) in rows.iter().enumerate() {
                if i != j {
                    let d: f64 = a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum();
                    s += (-d / tau).exp();
                }
            }
        }
        s.ln()
    }

    #[test]
    fn uniformity_examples() {
        assert!((uni(&[&[1.0, 2.0], &[1.0, 2.0]], 0.7) - 2f64.ln()).abs() < 1e-12);
        let v = uni(&[&[0.0, 0.0], &[1.0, 0.0]], 0.1);
        assert!((v - (2f64.ln() - 10.0)).abs() < 1e-9, "{v}");
        assert!((v + 9.306853).abs() < 1e-6);
        let near = uni(&[&[0.0], &[0.5], &[2.0]], 0.1);
        let far = uni(&[&[0.0], &[0.6], &[2.0]], 0.1);
        assert!(far < near);
        let mut g = Graph::<f64>::new();
        let x = g.leaf(Tensor::new(vec![1, 2], vec![0.0, 1.0]).unwrap());
        assert!(uniformity_loss(&mut g, x, 0.1).is_err());
    }

    #[test]
    fn equivariance_examples() {
        let m = SteerMap::<f64>::identity(AugmentKind::Rot, 2);
        let mut g = Graph::<f64>::new();
        let v = m.bind(&mut g, false);
        let e = g.leaf(Tensor::new(vec![1, 2], vec![1.0, 1.0]).unwrap());
        let th = g.leaf(Tensor::new(vec![1, 1], vec![0.5]).unwrap());
        let same = g.leaf(Tensor::new(vec![1, 2], vec![1.0, 1.0]).unwrap());
        let off = g.leaf(Tensor::new(vec![1, 2], vec![4.0, 5.0]).unwrap());
        let zero = equivariance_loss(&mut g, &m, v, e, th, same).unwrap();
        let hand = equivariance_loss(&mut g, &m, v, e, th, off).unwrap();
        assert_eq!(g.value(zero).item(), 0.0);
        assert_eq!(g.value(hand).item(), 25.0);
    }

    #[test]
    fn rho_fixtures() {
        let id = SteerMap::<f32>::identity(AugmentKind::Photo, 3);
        let p = AugmentParams::new(AugmentKind::Photo, vec![0.5, 0.0, 0.0]).unwrap();
        let (e, ea) = ([1.0f32, 2.0, 3.0], [1.5f32, 2.0, 2.0]);
        assert!((rho(&id, &e, &ea, &p).unwrap() - 1.0).abs() < 1e-12);
        assert_eq!(rho_from_embeddings(&ea, &e, &ea), 0.0);
        let err = rho(&id, &e, &ea, &AugmentParams::identity(AugmentKind::Photo)).unwrap_err();
        assert!(err.to_string().contains("identity"));
    }

    fn tiny_setup(seed: u64) -> (Model<f64>, SteerMaps<f64>, LossInputs<f64>) {
        let cfg = EncoderConfig {
            embed_dim: 4,
            conv1_channels: 2,
            conv2_channels: 2,
            image_size: 7,
        };
        let model = Model::<f64>::new(cfg, 3, seed).unwrap();
        let mut rng = CounterRng::new(seed);
        let mut r = |shape: Vec<usize>, lo: f64, hi: f64| {
            let n: usize = shape.iter().product();
            Tensor::new(shape, (0..n).map(|_| rng.uniform(lo, hi)).collect()).unwrap()
        };
        let b = 3;
        let views = vec![
            AugView {
                kind: AugmentKind::Geo,
                images: r(vec![b, 7, 7, 3], -1.0, 1.0),
                theta: r(vec![b, 4], 0.0, 0.5),
            },
            AugView {
                kind: AugmentKind::Photo,
                images: r(vec![b, 7, 7, 3], -1.0, 1.0),
                theta: r(vec![b, 3], -1.0, 1.0),
            },
        ];
        let batch = LossInputs {
            clean: r(vec![b, 7, 7, 3], -1.0, 1.0),
            labels: one_hot(&[0, 2, 1], 3).unwrap(),
            views,
        };
        let maps = [AugmentKind::Geo, AugmentKind::Photo]
            .into_iter()
            .map(|k| (k, SteerMap::<f64>::new(k, 4, seed)))
            .collect();
        (model, maps, batch)
    }

    fn eval_total(model: &Model<f64>, maps: &SteerMaps<f64>, batch: &LossInputs<f64>, w: &LossWeights) -> (f64, LossBreakdown) {
        let mut g = Graph::<f64>::new();
        let mv = model.bind(&mut g, true);
        let vars = maps.iter().map(|(k, m)| (*k, m.bind(&mut g, true))).collect();
        let t = total_loss(&mut g, model, &mv, maps, &vars, batch, w).unwrap();
        (g.value(t.total).item(), t.breakdown(&g))
    }

    #[test]
    fn total_loss_reduces_and_adds_up() {
        let (model, maps, batch) = tiny_setup(1);
        let (ce_only, b0) = eval_total(&model, &maps, &batch, &LossWeights::invariant());
        assert_eq!(ce_only, b0.lce);
        assert!(b0.le_geo.is_none() && b0.lu_clean.is_none());
        let w = LossWeights::ablation_best();
        let (total, b) = eval_total(&model, &maps, &batch, &w);
        assert_eq!(b.lce, ce_only);
        assert!((b.weighted_sum(&w) - total).abs() < 1e-6);
        assert!(b.le_geo.is_some() && b.le_photo.is_some() && b.le_rot.is_none());
    }

    #[test]
    fn total_loss_gradient_matches_finite_differences() {
        let (model, maps, batch) = tiny_setup(2);
        let w = LossWeights::main_text();
        let geo = &maps[&AugmentKind::Geo];
        let photo = &maps[&AugmentKind::Photo];
        // Probe a few parameter tensors: the embed layer and both maps' fusion weights.
        let inputs = vec![
            model.params()[4].1.clone(),
            geo.params()[2].1.clone(),
            photo.params()[0].1.clone(),
        ];
        let report = check_gradients(
            &inputs,
            |g, vs| {
                let mut mv = model.bind(g, false);
                mv.0[4] = vs[0];
                let mut vars: BTreeMap<_, _> = maps.iter().map(|(k, m)| (*k, m.bind(g, false))).collect();
                vars.get_mut(&AugmentKind::Geo).unwrap().fuse_w = vs[1];
                vars.get_mut(&AugmentKind::Photo).unwrap().theta_w = vs[2];
                Ok(total_loss(g, &model, &mv, &maps, &vars, &batch, &w)?.total)
            },
            1e-4,
        )
        .unwrap();
        assert!(report.passed, "{report:?}");
    }

    proptest! {
        #[test]
        fn uniformity_matches_oracle_and_is_translation_and_permutation_invariant(
            seed in 0u64..1000, n in 2usize..7, d in 1usize..5, tau in 0.05f64..2.0,
        ) {
            let mut rng = CounterRng::new(seed);
            let rows: Vec<Vec<f64>> = (0..n).map(|_| (0..d).map(|_| rng.normal() * 0.3).collect()).collect();
            let refs: Vec<&[f64]> = rows.iter().map(|r| r.as_slice()).collect();
            let v = uni(&refs, tau);
            prop_assert!((v - uni_oracle(&rows, tau)).abs() < 1e-9);
            let shifted: Vec<Vec<f64>> = rows.iter().map(|r| r.iter().map(|x| x + 3.7).collect()).collect();
            let sref: Vec<&[f64]> = shifted.iter().map(|r| r.as_slice()).collect();
            prop_assert!((uni(&sref, tau) - v).abs() < 1e-6);
            let mut perm = refs.clone();
            perm.reverse();
            prop_assert!((uni(&perm, tau) - v).abs() < 1e-9);
        }

        #[test]
        fn rho_is_non_negative(seed in 0u64..1000) {
            let mut rng = CounterRng::new(seed);
            let m = SteerMap::<f32>::new(AugmentKind::Rot, 5, seed);
            let e: Vec<f32> = (0..5).map(|_| rng.normal() as f32).collect();
            let ea: Vec<f32> = (0..5).map(|_| rng.normal() as f32).collect();
            let p = AugmentParams::new(AugmentKind::Rot, vec![rng.uniform(0.01, 1.0)]).unwrap();
            prop_assert!(rho(&m, &e, &ea, &p).unwrap() >= 0.0);
        }

        #[test]
        fn equivariance_loss_is_permutation_invariant(seed in 0u64..500) {
            let m = SteerMap::<f64>::new(AugmentKind::Rot, 3, seed);
            let mut rng = CounterRng::new(seed);
            let e: Vec<f64> = (0..12).map(|_| rng.normal()).collect();
            let ea: Vec<f64> = (0..12).map(|_| rng.normal()).collect();
            let th: Vec<f64> = (0..4).map(|_| rng.uniform(-1.0, 1.0)).collect();
            let eval = |order: &[usize]| {
                let pick = |v: &[f64], w: usize| order.iter().flat_map(|&i| v[i * w..(i + 1) * w].to_vec()).collect::<Vec<_>>();
                let mut g = Graph::<f64>::new();
                let v = m.bind(&mut g, false);
                let a = g.leaf(Tensor::new(vec![4, 3], pick(&e, 3)).unwrap());
                let t = g.leaf(Tensor::new(vec![4, 1], pick(&th, 1)).unwrap());
                let b = g.leaf(Tensor::new(vec![4, 3], pick(&ea, 3)).unwrap());
                let l = equivariance_loss(&mut g, &m, v, a, t, b).unwrap();
                g.value(l).item()
            };
            prop_assert!((eval(&[0, 1, 2, 3]) - eval(&[2, 0, 3, 1])).abs() < 1e-12);
        }
    }
}
