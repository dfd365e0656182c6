//! Randomized finite-difference sweep over every differentiable op and loss.
//!
//! Each case draws fresh shapes and values, contracts the op output against a
//! fixed random tensor so every output coordinate matters, and runs
//! [`check_gradients`] in f64.

use crate::augment::AugmentKind;
use crate::error::Result;
use crate::losses::{
    cross_entropy_term, equivariance_loss, total_loss, uniformity_loss, AugView, LossInputs, LossWeights,
};
use crate::model::{EncoderConfig, Model, ModelVars};
use crate::rng::CounterRng;
use crate::steer::SteerMap;
use crate::tensor::{check_gradients, one_hot, GradReport, Graph, Tensor, Var};
use std::collections::BTreeMap;

pub const CASE_NAMES: [&str; 28] = [
    "dense",
    "conv2d_stride1",
    "conv2d_stride2",
    "add_bias",
    "relu",
    "exp",
    "log",
    "add",
    "sub",
    "mul",
    "scale",
    "sum",
    "mean",
    "concat",
    "sq_l2_distance",
    "l2_normalize",
    "l2_normalize_floored",
    "softmax_cross_entropy",
    "pairwise_sq_distances",
    "logsumexp_off_diagonal",
    "reshape",
    "cross_entropy_weight_decay",
    "equivariance_loss",
    "uniformity_loss",
    "uniformity_on_sphere",
    "total_loss",
    "steer_map",
    "encoder",
];

#[derive(Clone, Debug)]
pub struct CaseResult {
    pub name: &'static str,
    pub seed: u64,
    pub report: GradReport,
}

#[derive(Clone, Debug)]
pub struct SuiteReport {
    pub cases: Vec<CaseResult>,
    pub max_rel_err: f64,
    pub tolerance: f64,
}

impl SuiteReport {
    pub fn passed(&self) -> bool {
        self.cases.iter().all(|c| c.report.passed)
    }

    pub fn worst(&self) -> Option<&CaseResult> {
        self.cases
            .iter()
            .max_by(|a, b| a.report.max_rel_err.total_cmp(&b.report.max_rel_err))
    }
}

struct Draw {
    rng: CounterRng,
}

impl Draw {
    fn dim(&mut self, lo: usize, hi: usize) -> usize {
        lo + self.rng.below(hi - lo + 1)
    }

    fn normal(&mut self, shape: &[usize], s: f64) -> Tensor<f64> {
        let n = shape.iter().product();
        Tensor::raw(shape.to_vec(), (0..n).map(|_| self.rng.normal() * s).collect())
    }

    fn uniform(&mut self, shape: &[usize], lo: f64, hi: f64) -> Tensor<f64> {
        let n = shape.iter().product();
        Tensor::raw(shape.to_vec(), (0..n).map(|_| self.rng.uniform(lo, hi)).collect())
    }

    /// Values bounded away from zero so relu's kink is never straddled.
    fn off_zero(&mut self, shape: &[usize]) -> Tensor<f64> {
        let n = shape.iter().product();
        let v = (0..n)
            .map(|_| {
                let m = self.rng.uniform(0.1, 1.0);
                if self.rng.next_f64() < 0.5 { -m } else { m }
            })
            .collect();
        Tensor::raw(shape.to_vec(), v)
    }

    fn labels(&mut self, rows: usize, classes: usize) -> Tensor<f64> {
        let l: Vec<usize> = (0..rows).map(|_| self.rng.below(classes)).collect();
        one_hot(&l, classes).expect("labels in range")
    }
}

fn contract(g: &mut Graph<f64>, y: Var, r: &Tensor<f64>) -> Result<Var> {
    let rv = g.leaf(r.clone());
    let p = g.mul(y, rv)?;
    Ok(g.sum(p))
}

fn tiny_encoder() -> EncoderConfig {
    EncoderConfig {
        embed_dim: 4,
        conv1_channels: 2,
        conv2_channels: 3,
        image_size: 7,
    }
}

/// Runs one case by index into [`CASE_NAMES`].
pub fn run_case(index: usize, seed: u64, tol: f64) -> Result<CaseResult> {
    let mut d = Draw {
        rng: CounterRng::new(seed).stream(index as u64),
    };
    let name = CASE_NAMES[index];
    let report = match name {
        "dense" => {
            let (b, i, o) = (d.dim(1, 4), d.dim(1, 5), d.dim(1, 4));
            let r = d.normal(&[b, o], 1.0);
            let ins = [d.normal(&[b, i], 1.0), d.normal(&[i, o], 1.0), d.normal(&[o], 1.0)];
            check_gradients(&ins, |g, v| { let y = g.dense(v[0], v[1], v[2])?; contract(g, y, &r) }, tol)?
        }
        "conv2d_stride1" | "conv2d_stride2" => {
            let stride = if name.ends_with('1') { 1 } else { 2 };
            let (b, h, w, ci, co) = (d.dim(1, 2), d.dim(3, 6), d.dim(3, 6), d.dim(1, 3), d.dim(1, 3));
            let (kh, kw) = (d.dim(1, 3), d.dim(1, 3));
            let (oh, ow) = ((h - kh) / stride + 1, (w - kw) / stride + 1);
            let r = d.normal(&[b, oh, ow, co], 1.0);
            let ins = [d.normal(&[b, h, w, ci], 1.0), d.normal(&[kh, kw, ci, co], 1.0)];
            check_gradients(&ins, |g, v| { let y = g.conv2d(v[0], v[1], stride)?; contract(g, y, &r) }, tol)?
        }
        "add_bias" => {
            let (b, n) = (d.dim(1, 4), d.dim(1, 5));
            let r = d.normal(&[b, n], 1.0);
            let ins = [d.normal(&[b, n], 1.0), d.normal(&[n], 1.0)];
            check_gradients(&ins, |g, v| { let y = g.add_bias(v[0], v[1])?; contract(g, y, &r) }, tol)?
        }
        "relu" | "exp" | "log" | "scale" | "sum" | "mean" | "reshape" => {
            let (b, n) = (d.dim(1, 4), d.dim(1, 6));
            let x = match name {
                "relu" => d.off_zero(&[b, n]),
                "log" => d.uniform(&[b, n], 0.5, 2.0),
                _ => d.normal(&[b, n], 0.7),
            };
            let r = d.normal(&[b, n], 1.0);
            let c = d.rng.uniform(-2.0, 2.0);
            let rt = r.clone().reshaped(vec![n, b]).expect("same length");
            check_gradients(
                &[x],
                |g, v| match name {
                    "relu" => { let y = g.relu(v[0]); contract(g, y, &r) }
                    "exp" => { let y = g.exp(v[0]); contract(g, y, &r) }
                    "log" => { let y = g.log(v[0])?; contract(g, y, &r) }
                    "scale" => { let y = g.scale(v[0], c); contract(g, y, &r) }
                    "reshape" => { let y = g.reshape(v[0], vec![n, b])?; contract(g, y, &rt) }
                    // Square first so the reduction's gradient depends on the input.
                    "sum" => { let y = g.mul(v[0], v[0])?; Ok(g.sum(y)) }
                    _ => { let y = g.mul(v[0], v[0])?; Ok(g.mean(y)) }
                },
                tol,
            )?
        }
        "add" | "sub" | "mul" | "sq_l2_distance" => {
            let (b, n) = (d.dim(1, 4), d.dim(1, 5));
            let r = d.normal(&[b, n], 1.0);
            let rr = d.normal(&[b], 1.0);
            let ins = [d.normal(&[b, n], 1.0), d.normal(&[b, n], 1.0)];
            check_gradients(
                &ins,
                |g, v| match name {
                    "add" => { let y = g.add(v[0], v[1])?; contract(g, y, &r) }
                    "sub" => { let y = g.sub(v[0], v[1])?; contract(g, y, &r) }
                    "mul" => { let y = g.mul(v[0], v[1])?; contract(g, y, &r) }
                    _ => { let y = g.sq_l2_distance(v[0], v[1])?; contract(g, y, &rr) }
                },
                tol,
            )?
        }
        "concat" => {
            let (b, na, nb) = (d.dim(1, 4), d.dim(1, 4), d.dim(1, 4));
            let r = d.normal(&[b, na + nb], 1.0);
            let ins = [d.normal(&[b, na], 1.0), d.normal(&[b, nb], 1.0)];
            check_gradients(&ins, |g, v| { let y = g.concat(v[0], v[1])?; contract(g, y, &r) }, tol)?
        }
        "l2_normalize" | "l2_normalize_floored" => {
            let (b, n) = (d.dim(1, 4), d.dim(2, 6));
            let r = d.normal(&[b, n], 1.0);
            let x = d.normal(&[b, n], 1.0);
            let floored = name.ends_with("floored");
            check_gradients(
                &[x],
                |g, v| {
                    let y = if floored { g.l2_normalize_floored(v[0], 1e-6) } else { g.l2_normalize(v[0], 1e-6)? };
                    contract(g, y, &r)
                },
                tol,
            )?
        }
        "softmax_cross_entropy" => {
            let (b, c) = (d.dim(1, 5), d.dim(2, 6));
            let labels = d.labels(b, c);
            let x = d.normal(&[b, c], 2.0);
            check_gradients(&[x], |g, v| g.softmax_cross_entropy(v[0], &labels), tol)?
        }
        "pairwise_sq_distances" => {
            let (b, n) = (d.dim(2, 5), d.dim(1, 4));
            let r = d.normal(&[b, b], 1.0);
            let x = d.normal(&[b, n], 1.0);
            check_gradients(&[x], |g, v| { let y = g.pairwise_sq_distances(v[0])?; contract(g, y, &r) }, tol)?
        }
        "logsumexp_off_diagonal" => {
            let b = d.dim(2, 5);
            let x = d.normal(&[b, b], 2.0);
            check_gradients(&[x], |g, v| g.logsumexp_off_diagonal(v[0]), tol)?
        }
        "cross_entropy_weight_decay" => {
            let (b, i, c) = (d.dim(1, 5), d.dim(1, 5), d.dim(2, 5));
            let lambda = d.rng.uniform(1e-4, 1e-1);
            let labels = d.labels(b, c);
            let ins = [d.normal(&[b, i], 1.0), d.normal(&[i, c], 1.0), d.normal(&[c], 1.0)];
            check_gradients(
                &ins,
                |g, v| {
                    let logits = g.dense(v[0], v[1], v[2])?;
                    let ce = cross_entropy_term(g, logits, &labels)?;
                    let w2 = g.mul(v[1], v[1])?;
                    let s = g.sum(w2);
                    let wd = g.scale(s, lambda);
                    g.add(ce, wd)
                },
                tol,
            )?
        }
        "equivariance_loss" | "steer_map" => {
            let kind = AugmentKind::ALL[d.rng.below(3)];
            let (b, e) = (d.dim(1, 4), d.dim(1, 4));
            let m = SteerMap::<f64>::new(kind, e, seed);
            let mut ins = vec![d.normal(&[b, e], 1.0), d.uniform(&[b, kind.theta_dim()], 0.05, 0.95), d.normal(&[b, e], 1.0)];
            ins.extend(m.params().iter().map(|(_, t)| t.clone()));
            let r = d.normal(&[b, e], 1.0);
            let is_loss = name == "equivariance_loss";
            check_gradients(
                &ins,
                |g, v| {
                    let mut mv = m.bind(g, false);
                    mv.theta_w = v[3];
                    mv.theta_b = v[4];
                    mv.fuse_w = v[5];
                    mv.fuse_b = v[6];
                    if is_loss {
                        equivariance_loss(g, &m, mv, v[0], v[1], v[2])
                    } else {
                        let y = m.forward(g, mv, v[0], v[1])?;
                        contract(g, y, &r)
                    }
                },
                tol,
            )?
        }
        "uniformity_loss" | "uniformity_on_sphere" => {
            let (b, n) = (d.dim(2, 6), d.dim(1, 5));
            let tau = d.rng.uniform(0.1, 1.0);
            let sphere = name.ends_with("sphere");
            let x = d.normal(&[b, n], if sphere { 1.0 } else { 0.3 });
            check_gradients(
                &[x],
                |g, v| {
                    let e = if sphere { g.l2_normalize_floored(v[0], 1e-6) } else { v[0] };
                    uniformity_loss(g, e, tau)
                },
                tol,
            )?
        }
        "total_loss" => {
            let cfg = tiny_encoder();
            let model = Model::<f64>::new(cfg.clone(), 3, seed)?;
            let b = d.dim(2, 4);
            let s = cfg.image_size;
            let kinds = [AugmentKind::Geo, AugmentKind::Photo];
            let views: Vec<AugView<f64>> = kinds
                .iter()
                .map(|&k| AugView {
                    kind: k,
                    images: d.normal(&[b, s, s, 3], 1.0),
                    theta: d.uniform(&[b, k.theta_dim()], 0.05, 0.95),
                })
                .collect();
            let batch = LossInputs {
                clean: d.normal(&[b, s, s, 3], 1.0),
                labels: d.labels(b, 3),
                views,
            };
            let maps: BTreeMap<_, _> = kinds.iter().map(|&k| (k, SteerMap::<f64>::new(k, cfg.embed_dim, seed))).collect();
            let w = LossWeights {
                alpha: d.rng.uniform(0.05, 1.0),
                beta: d.rng.uniform(0.05, 0.5),
                tau: d.rng.uniform(0.1, 1.0),
                uniformity_on_sphere: d.rng.next_f64() < 0.5,
                ..LossWeights::default()
            };
            let ins = vec![
                model.params()[4].1.clone(),
                model.params()[6].1.clone(),
                maps[&AugmentKind::Geo].params()[2].1.clone(),
                maps[&AugmentKind::Photo].params()[0].1.clone(),
            ];
            check_gradients(
                &ins,
                |g, v| {
                    let mut mv = model.bind(g, false);
                    mv.0[4] = v[0];
                    mv.0[6] = v[1];
                    let mut vars: BTreeMap<_, _> = maps.iter().map(|(k, m)| (*k, m.bind(g, false))).collect();
                    vars.get_mut(&AugmentKind::Geo).expect("geo").fuse_w = v[2];
                    vars.get_mut(&AugmentKind::Photo).expect("photo").theta_w = v[3];
                    Ok(total_loss(g, &model, &mv, &maps, &vars, &batch, &w)?.total)
                },
                tol,
            )?
        }
        "encoder" => {
            let cfg = tiny_encoder();
            let model = Model::<f64>::new(cfg.clone(), 3, seed)?;
            let b = d.dim(1, 3);
            let s = cfg.image_size;
            let labels = d.labels(b, 3);
            let mut ins = vec![d.normal(&[b, s, s, 3], 1.0)];
            ins.extend(model.params().iter().map(|(_, t)| t.clone()));
            check_gradients(
                &ins,
                |g, v| {
                    let mv = ModelVars(v[1..].to_vec());
                    let e = model.encode(g, &mv, v[0])?;
                    let l = model.logits(g, &mv, e)?;
                    g.softmax_cross_entropy(l, &labels)
                },
                tol,
            )?
        }
        other => unreachable!("unknown case {other}"),
    };
    Ok(CaseResult { name, seed, report })
}

/// Runs `cases` cases, cycling through every name so each op is covered.
pub fn run_suite(cases: usize, seed: u64, tol: f64) -> Result<SuiteReport> {
    let mut out = Vec::with_capacity(cases);
    for i in 0..cases {
        out.push(run_case(i % CASE_NAMES.len(), seed.wrapping_add(i as u64), tol)?);
    }
    let max_rel_err = out.iter().map(|c| c.report.max_rel_err).fold(0.0, f64::max);
    Ok(SuiteReport {
        cases: out,
        max_rel_err,
        tolerance: tol,
    })
}
