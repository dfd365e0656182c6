//! Training loop for the invariant baseline and the equivariant model.

use crate::augment::{self, AugmentKind, AugmentParams, SamplerConfig};
use crate::checkpoint::{Checkpoint, MapsOrigin, Status};
use crate::data::{Dataset, DatasetSpec, Image, LabeledImage, Standardizer};
use crate::error::{Error, Result};
use crate::losses::{total_loss, AugView, LossBreakdown, LossInputs, LossWeights};
use crate::model::{EncoderConfig, Model};
use crate::rng::CounterRng;
use crate::steer::{
    clip_global_norm, embed_images, MapVars, SteerMap, SteerMaps, DEFAULT_WM_EQUIVARIANT, DEFAULT_WM_INVARIANT,
};
use crate::tensor::{one_hot, Graph, OptimizerState, SgdConfig, Tensor};
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;
use std::io::Write;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ModelKind {
    Invariant,
    Equivariant,
}

impl ModelKind {
    pub fn default_wm(self) -> f64 {
        match self {
            ModelKind::Invariant => DEFAULT_WM_INVARIANT,
            ModelKind::Equivariant => DEFAULT_WM_EQUIVARIANT,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub model_kind: ModelKind,
    /// Augmentation kinds with an extra view (and a co-trained map when equivariant).
    pub kinds: Vec<AugmentKind>,
    pub weights: LossWeights,
    pub epochs: usize,
    pub batch_size: usize,
    pub base_lr: f64,
    pub warmup_epochs: usize,
    pub momentum: f64,
    /// Global gradient-norm clip applied before each step; 0 disables.
    pub clip_norm: f64,
    pub seed: u64,
    /// Also feed a randomly augmented view (geo then photo) to the cross-entropy branch.
    pub ce_augment: bool,
    /// Steps between JSON log lines.
    pub log_every: usize,
    pub encoder: EncoderConfig,
    pub sampler: SamplerConfig,
    pub dataset: DatasetSpec,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            model_kind: ModelKind::Equivariant,
            kinds: vec![AugmentKind::Geo, AugmentKind::Photo],
            weights: LossWeights::default(),
            epochs: 40,
            batch_size: 128,
            base_lr: 0.05,
            warmup_epochs: 3,
            momentum: 0.9,
            clip_norm: 5.0,
            seed: 0,
            ce_augment: false,
            log_every: 10,
            encoder: EncoderConfig::default(),
            sampler: SamplerConfig::default(),
            dataset: DatasetSpec::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size < 2 {
            return Err(Error::validation("batch_size", "must be at least 2 (uniformity needs pairs)"));
        }
        if self.epochs == 0 {
            return Err(Error::validation("epochs", "must be at least 1"));
        }
        if self.warmup_epochs >= self.epochs {
            return Err(Error::validation("warmup_epochs", "must be smaller than epochs"));
        }
        if !(self.base_lr > 0.0 && self.base_lr.is_finite()) {
            return Err(Error::validation("base_lr", "must be positive"));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(Error::validation("momentum", "must lie in [0, 1)"));
        }
        let mut seen = self.kinds.clone();
        seen.sort();
        seen.dedup();
        if seen.len() != self.kinds.len() {
            return Err(Error::validation("kinds", "duplicate augmentation kind"));
        }
        if !(self.clip_norm >= 0.0) {
            return Err(Error::validation("clip_norm", "must be ≥ 0"));
        }
        if self.log_every == 0 {
            return Err(Error::validation("log_every", "must be at least 1"));
        }
        self.weights.validate()?;
        self.encoder.validate()
    }

    /// Loss weights actually used: the invariant model trains on cross-entropy only.
    pub fn effective_weights(&self) -> LossWeights {
        match self.model_kind {
            ModelKind::Invariant => LossWeights {
                alpha: 0.0,
                beta: 0.0,
                ..self.weights.clone()
            },
            ModelKind::Equivariant => self.weights.clone(),
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub mean_total: f64,
    pub eval_accuracy: f64,
    /// Per kind: mean L_E over mean squared displacement on a fixed probe batch.
    pub rho_proxy: BTreeMap<AugmentKind, f64>,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainHistory {
    /// Probe values before the first step.
    pub initial_rho_proxy: BTreeMap<AugmentKind, f64>,
    pub epochs: Vec<EpochRecord>,
    pub final_eval_accuracy: f64,
}

#[derive(Serialize)]
struct LogLine<'a> {
    step: u64,
    #[serde(flatten)]
    terms: &'a LossBreakdown,
    lr: f64,
    grad_norm: f64,
}

/// Training aborted; `checkpoint` carries the last finite parameters and a failure marker.
#[derive(Debug)]
pub struct TrainFailure {
    pub checkpoint: Box<Checkpoint>,
    pub error: Error,
}

/// Top-1 accuracy of the model's own head.
pub fn accuracy(model: &Model<f32>, st: &Standardizer, images: &[LabeledImage]) -> Result<f64> {
    let refs: Vec<&Image> = images.iter().map(|l| &l.image).collect();
    let e = embed_images(model, st, &refs)?;
    let logits = model.classify(&e)?;
    let c = model.num_classes;
    let correct = logits
        .data()
        .chunks(c)
        .zip(images)
        .filter(|(row, li)| argmax(row) == li.class_label)
        .count();
    Ok(correct as f64 / images.len() as f64)
}

pub fn argmax(row: &[f32]) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate() {
        if v > row[best] {
            best = i;
        }
    }
    best
}

/// Fixed eval images and θ draws used to track ρ during training.
struct Probe {
    clean: Tensor<f32>,
    views: Vec<(AugmentKind, Tensor<f32>, Tensor<f32>)>,
}

impl Probe {
    fn new(ds: &Dataset, st: &Standardizer, kinds: &[AugmentKind], seed: u64) -> Result<Self> {
        let n = ds.eval.len().min(128);
        let imgs: Vec<&Image> = ds.eval[..n].iter().map(|l| &l.image).collect();
        let mut views = Vec::new();
        for &kind in kinds {
            let mut rng = CounterRng::new(seed).stream(0x7072_6f62 + kind as u64);
            let params: Vec<AugmentParams> = (0..n)
                .map(|_| loop {
                    let p = augment::sample_params(kind, &mut rng);
                    if !p.is_identity() {
                        break p;
                    }
                })
                .collect();
            let aug: Vec<Image> = imgs
                .iter()
                .zip(&params)
                .map(|(i, p)| augment::apply(i, p))
                .collect::<Result<_>>()?;
            let theta = Tensor::raw(vec![n, kind.theta_dim()], params.iter().flat_map(|p| p.theta_f32()).collect());
            views.push((kind, st.batch(aug.iter()), theta));
        }
        Ok(Self {
            clean: st.batch(imgs),
            views,
        })
    }

    fn measure(&self, model: &Model<f32>, maps: &SteerMaps) -> Result<BTreeMap<AugmentKind, f64>> {
        let e = model.embed(&self.clean)?;
        let mut out = BTreeMap::new();
        for (kind, x, theta) in &self.views {
            let Some(m) = maps.get(kind) else { continue };
            let ea = model.embed(x)?;
            let pred = m.apply_batch(&e, theta)?;
            let sq = |a: &[f32], b: &[f32]| a.iter().zip(b).map(|(&x, &y)| ((x - y) as f64).powi(2)).sum::<f64>();
            let num = sq(pred.data(), ea.data());
            let den = sq(ea.data(), e.data()).max(1e-12);
            out.insert(*kind, num / den);
        }
        Ok(out)
    }
}

fn build_batch(
    ds: &Dataset,
    st: &Standardizer,
    idx: &[usize],
    cfg: &TrainConfig,
    with_views: bool,
    rng: &mut CounterRng,
) -> Result<LossInputs<f32>> {
    let mut base: Vec<Image> = Vec::with_capacity(idx.len());
    for &i in idx {
        let img = &ds.train[i].image;
        if cfg.ce_augment {
            let g = augment::sample_params_with(AugmentKind::Geo, rng, &cfg.sampler);
            let p = augment::sample_params_with(AugmentKind::Photo, rng, &cfg.sampler);
            base.push(augment::compose(img, &[g, p])?);
        } else {
            base.push(img.clone());
        }
    }
    let labels: Vec<usize> = idx.iter().map(|&i| ds.train[i].class_label).collect();
    let mut views = Vec::new();
    if with_views {
        for &kind in &cfg.kinds {
            let mut theta = Vec::with_capacity(idx.len() * kind.theta_dim());
            let mut imgs = Vec::with_capacity(idx.len());
            for img in &base {
                let p = augment::sample_params_with(kind, rng, &cfg.sampler);
                imgs.push(augment::apply(img, &p)?);
                theta.extend(p.theta_f32());
            }
            views.push(AugView {
                kind,
                images: st.batch(imgs.iter()),
                theta: Tensor::raw(vec![idx.len(), kind.theta_dim()], theta),
            });
        }
    }
    Ok(LossInputs {
        clean: st.batch(base.iter()),
        labels: one_hot(&labels, ds.num_classes)?,
        views,
    })
}

/// Trains a model. `log` receives one JSON line every `log_every` steps.
pub fn train(cfg: &TrainConfig, ds: &Dataset, mut log: Option<&mut dyn Write>) -> Result<Checkpoint, TrainFailure> {
    let fail_early = |error: Error| TrainFailure {
        checkpoint: Box::new(Checkpoint {
            config: cfg.clone(),
            model: Model::new(EncoderConfig::default(), 2, 0).expect("default model"),
            maps: SteerMaps::new(),
            maps_origin: None,
            standardizer: Standardizer {
                mean: [0.0; 3],
                std: [1.0; 3],
            },
            history: TrainHistory::default(),
            fit_history: Vec::new(),
            status: Status::Failed {
                reason: error.to_string(),
            },
        }),
        error,
    };
    if let Err(e) = cfg.validate() {
        return Err(fail_early(e));
    }
    if ds.train.len() < cfg.batch_size {
        return Err(fail_early(Error::validation(
            "batch_size",
            format!("{} exceeds the training split ({} images)", cfg.batch_size, ds.train.len()),
        )));
    }
    if ds.eval.is_empty() {
        return Err(fail_early(Error::validation("dataset", "eval split is empty")));
    }
    let st = Standardizer::fit(&ds.train);
    let mut model = match Model::<f32>::new(cfg.encoder.clone(), ds.num_classes, cfg.seed) {
        Ok(m) => m,
        Err(e) => return Err(fail_early(e)),
    };
    let weights = cfg.effective_weights();
    let equivariant = cfg.model_kind == ModelKind::Equivariant && weights.alpha > 0.0;
    let mut maps: SteerMaps = if equivariant {
        cfg.kinds
            .iter()
            .map(|&k| (k, SteerMap::new(k, cfg.encoder.embed_dim, cfg.seed)))
            .collect()
    } else {
        SteerMaps::new()
    };
    let with_views = weights.alpha > 0.0 || weights.beta > 0.0;

    let steps_per_epoch = (ds.train.len() / cfg.batch_size) as u64;
    let mut opt = OptimizerState::<f32>::new(SgdConfig {
        base_lr: cfg.base_lr,
        momentum: cfg.momentum,
        nesterov: true,
        weight_decay: weights.weight_decay,
        warmup_steps: steps_per_epoch * cfg.warmup_epochs as u64,
        total_steps: steps_per_epoch * cfg.epochs as u64,
    });
    let probe = match Probe::new(ds, &st, &cfg.kinds, cfg.seed) {
        Ok(p) => p,
        Err(e) => return Err(fail_early(e)),
    };
    let mut history = TrainHistory::default();

    let snapshot = |model: &Model<f32>, maps: &SteerMaps, history: &TrainHistory, status: Status| Checkpoint {
        config: cfg.clone(),
        model: model.clone(),
        maps: maps.clone(),
        maps_origin: (!maps.is_empty()).then_some(MapsOrigin::CoTrained),
        standardizer: st.clone(),
        history: history.clone(),
        fit_history: Vec::new(),
        status,
    };

    let mut run = |model: &mut Model<f32>,
               maps: &mut SteerMaps,
               history: &mut TrainHistory,
               log: &mut Option<&mut dyn Write>|
     -> Result<()> {
        history.initial_rho_proxy = probe.measure(model, maps)?;
        let mut order: Vec<usize> = (0..ds.train.len()).collect();
        let mut data_rng = CounterRng::new(cfg.seed).stream(0x6461_7461);
        for epoch in 0..cfg.epochs {
            data_rng.shuffle(&mut order);
            let mut sum_total = 0.0;
            for idx in order.chunks_exact(cfg.batch_size) {
                let batch = build_batch(ds, &st, idx, cfg, with_views, &mut data_rng)?;
                let mut g = Graph::<f32>::new();
                let mv = model.bind(&mut g, true);
                let map_vars: BTreeMap<AugmentKind, MapVars> =
                    maps.iter().map(|(k, m)| (*k, m.bind(&mut g, true))).collect();
                let terms = total_loss(&mut g, model, &mv, maps, &map_vars, &batch, &weights)?;
                let br = terms.breakdown(&g);
                if !br.total.is_finite() {
                    return Err(Error::NonFinite(format!("training loss at step {}", opt.step_count())));
                }
                let grads = g.backward(terms.total)?;
                let mut gs: Vec<Vec<f32>> = mv
                    .0
                    .iter()
                    .zip(model.params())
                    .map(|(&v, (_, t))| grads.get_or_zeros(v, t.len()))
                    .collect();
                for (k, m) in maps.iter() {
                    let v = map_vars[k];
                    for (var, (_, t)) in [v.theta_w, v.theta_b, v.fuse_w, v.fuse_b].into_iter().zip(m.params()) {
                        gs.push(grads.get_or_zeros(var, t.len()));
                    }
                }
                let grad_norm = clip_global_norm(&mut gs, cfg.clip_norm);
                let step = opt.step_count();
                let mut params: Vec<(String, &mut Tensor<f32>)> = model.params_mut().collect();
                for m in maps.values_mut() {
                    params.extend(m.params_mut());
                }
                let lr = opt.step(&mut params, &gs)?;
                sum_total += br.total;
                if step.is_multiple_of(cfg.log_every as u64) {
                    if let Some(w) = log.as_mut() {
                        let line = serde_json::to_string(&LogLine { step, terms: &br, lr, grad_norm }).expect("log line");
                        writeln!(w, "{line}").map_err(|e| Error::io("<training log>", e))?;
                    }
                }
            }
            let acc = accuracy(model, &st, &ds.eval)?;
            let rec = EpochRecord {
                epoch,
                mean_total: sum_total / steps_per_epoch as f64,
                eval_accuracy: acc,
                rho_proxy: probe.measure(model, maps)?,
            };
            log::info!(
                "epoch {epoch}: loss {:.4}, eval acc {:.4}, rho proxy {:?}",
                rec.mean_total,
                rec.eval_accuracy,
                rec.rho_proxy
            );
            history.final_eval_accuracy = acc;
            history.epochs.push(rec);
        }
        Ok(())
    };

    match run(&mut model, &mut maps, &mut history, &mut log) {
        Ok(()) => Ok(snapshot(&model, &maps, &history, Status::Complete)),
        Err(error) => {
            let status = Status::Failed {
                reason: error.to_string(),
            };
            Err(TrainFailure {
                checkpoint: Box::new(snapshot(&model, &maps, &history, status)),
                error,
            })
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{generate_shapes, ShapesConfig};

    fn tiny(kind: ModelKind) -> (TrainConfig, Dataset) {
        let shapes = ShapesConfig {
            n_train: 96,
            n_eval: 32,
            seed: 4,
            ..Default::default()
        };
        let cfg = TrainConfig {
            model_kind: kind,
            epochs: 2,
            warmup_epochs: 1,
            batch_size: 16,
            log_every: 1,
            encoder: EncoderConfig {
                embed_dim: 8,
                conv1_channels: 4,
                conv2_channels: 4,
                image_size: 32,
            },
            dataset: DatasetSpec::Shapes(shapes.clone()),
            ..Default::default()
        };
        (cfg, generate_shapes(&shapes).unwrap())
    }

    #[test]
    fn same_seed_reproduces_bitwise() {
        let (cfg, ds) = tiny(ModelKind::Equivariant);
        let mut log_a = Vec::new();
        let mut log_b = Vec::new();
        let a = train(&cfg, &ds, Some(&mut log_a)).unwrap();
        let b = train(&cfg, &ds, Some(&mut log_b)).unwrap();
        assert_eq!(a, b);
        assert_eq!(log_a, log_b);
        assert_eq!(a.maps.len(), 2);
    }

    #[test]
    fn invariant_run_logs_only_cross_entropy() {
        let (cfg, ds) = tiny(ModelKind::Invariant);
        let mut log = Vec::new();
        let ck = train(&cfg, &ds, Some(&mut log)).unwrap();
        assert!(ck.maps.is_empty());
        let text = String::from_utf8(log).unwrap();
        let first: serde_json::Value = serde_json::from_str(text.lines().next().unwrap()).unwrap();
        assert_eq!(first["lce"], first["total"]);
        assert!(first["le_geo"].is_null() && first["lu_clean"].is_null());
        for key in ["step", "lce", "le_geo", "le_photo", "le_rot", "lu_clean", "lu_aug", "total", "lr"] {
            assert!(first.get(key).is_some(), "missing {key}");
        }

        let (eq_cfg, _) = tiny(ModelKind::Equivariant);
        let mut eq_log = Vec::new();
        train(&eq_cfg, &ds, Some(&mut eq_log)).unwrap();
        let eq_first: serde_json::Value =
            serde_json::from_str(String::from_utf8(eq_log).unwrap().lines().next().unwrap()).unwrap();
        // Same seed, same clean batch and initial weights: only the extra terms differ.
        assert_eq!(eq_first["lce"], first["lce"]);
        assert!(eq_first["le_geo"].as_f64().unwrap() > 0.0);
    }

    #[test]
    fn divergence_keeps_a_marked_checkpoint() {
        let (mut cfg, ds) = tiny(ModelKind::Equivariant);
        cfg.base_lr = 1e30;
        let fail = train(&cfg, &ds, None).unwrap_err();
        assert_eq!(fail.error.exit_code(), 3, "{}", fail.error);
        assert!(matches!(fail.checkpoint.status, Status::Failed { .. }));
    }

    #[test]
    fn config_guards() {
        let (mut cfg, ds) = tiny(ModelKind::Equivariant);
        cfg.batch_size = 1;
        assert_eq!(train(&cfg, &ds, None).unwrap_err().error.exit_code(), 1);
        cfg.batch_size = 16;
        cfg.warmup_epochs = 2;
        assert!(cfg.validate().is_err());
    }
}
