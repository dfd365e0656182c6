use crate::checkpoint::Checkpoint;
use crate::data::{Dataset, Image, LabeledImage, COLOR_BUCKETS};
use crate::error::{Error, Result};
use crate::rng::CounterRng;
use crate::steer::embed_images;
use crate::tensor::{one_hot, Graph, Tensor};
use crate::trainer::argmax;
use serde::{Deserialize, Serialize};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ProbeTarget {
    Class,
    Color,
}

impl std::str::FromStr for ProbeTarget {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "class" | "class_label" => Ok(Self::Class),
            "color" | "aux_color_label" => Ok(Self::Color),
            other => Err(Error::validation("target", format!("`{other}` is not class or color"))),
        }
    }
}

impl ProbeTarget {
    fn label(self, li: &LabeledImage) -> usize {
        match self {
            Self::Class => li.class_label,
            Self::Color => li.aux_color_label,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ProbeConfig {
    pub steps: usize,
    pub lr: f64,
    /// Permute training labels; a sanity baseline that should land near chance.
    pub shuffle_labels: bool,
    pub seed: u64,
}

impl Default for ProbeConfig {
    fn default() -> Self {
        Self {
            steps: 500,
            lr: 0.1,
            shuffle_labels: false,
            seed: 0,
        }
    }
}

#[derive(Clone, Debug, Serialize)]
pub struct ProbeReport {
    pub target: ProbeTarget,
    pub classes: usize,
    pub train_accuracy: f64,
    pub eval_accuracy: f64,
    pub final_loss: f64,
}

/// A dense softmax layer trained by full-batch gradient descent on fixed features.
pub struct LinearProbe {
    mean: Vec<f64>,
    std: Vec<f64>,
    w: Tensor<f32>,
    b: Tensor<f32>,
}

impl LinearProbe {
    fn standardize(&self, x: &Tensor<f32>) -> Tensor<f32> {
        let d = self.mean.len();
        let data = x
            .data()
            .chunks(d)
            .flat_map(|r| r.iter().enumerate().map(|(j, &v)| ((v as f64 - self.mean[j]) / self.std[j]) as f32))
            .collect();
        Tensor::raw(x.shape().to_vec(), data)
    }

    /// Fits on `[N, D]` features; returns the probe and its final training loss.
    pub fn fit(x: &Tensor<f32>, labels: &[usize], classes: usize, cfg: &ProbeConfig) -> Result<(Self, f64)> {
        let (n, d) = (x.rows(), x.last_dim());
        if n == 0 || labels.len() != n {
            return Err(Error::validation("labels", "need one label per feature row"));
        }
        let mut mean = vec![0.0; d];
        let mut sq = vec![0.0; d];
        for r in x.data().chunks(d) {
            for j in 0..d {
                mean[j] += r[j] as f64;
                sq[j] += (r[j] as f64).powi(2);
            }
        }
        let std: Vec<f64> = (0..d)
            .map(|j| {
                mean[j] /= n as f64;
                (sq[j] / n as f64 - mean[j] * mean[j]).max(1e-12).sqrt()
            })
            .collect();
        let mut probe = Self {
            mean,
            std,
            w: Tensor::zeros(vec![d, classes]),
            b: Tensor::zeros(vec![classes]),
        };
        let xs = probe.standardize(x);
        let y = one_hot::<f32>(labels, classes)?;
        let mut loss = f64::NAN;
        for _ in 0..cfg.steps {
            let mut g = Graph::new();
            let xv = g.leaf(xs.clone());
            let wv = g.param(probe.w.clone());
            let bv = g.param(probe.b.clone());
            let logits = g.dense(xv, wv, bv)?;
            let l = g.softmax_cross_entropy(logits, &y)?;
            loss = g.value(l).item() as f64;
            if !loss.is_finite() {
                return Err(Error::NonFinite("linear probe loss".into()));
            }
            let grads = g.backward(l)?;
            for (t, v) in [(&mut probe.w, wv), (&mut probe.b, bv)] {
                let gr = grads.get_or_zeros(v, t.len());
                for (p, gv) in t.data_mut().iter_mut().zip(gr) {
                    *p -= cfg.lr as f32 * gv;
                }
            }
        }
        Ok((probe, loss))
    }

    pub fn predict(&self, x: &Tensor<f32>) -> Result<Vec<usize>> {
        let mut g = Graph::new();
        let xv = g.leaf(self.standardize(x));
        let wv = g.leaf(self.w.clone());
        let bv = g.leaf(self.b.clone());
        let l = g.dense(xv, wv, bv)?;
        let c = self.b.len();
        Ok(g.value(l).data().chunks(c).map(argmax).collect())
    }
}

fn embed_split(ck: &Checkpoint, images: &[LabeledImage]) -> Result<Tensor<f32>> {
    let refs: Vec<&Image> = images.iter().map(|l| &l.image).collect();
    embed_images(&ck.model, &ck.standardizer, &refs)
}

fn hit_rate(pred: &[usize], truth: &[usize]) -> f64 {
    pred.iter().zip(truth).filter(|(a, b)| a == b).count() as f64 / truth.len().max(1) as f64
}

/// Trains a linear probe on frozen train-split embeddings and scores it on the eval split.
pub fn linear_probe(ck: &Checkpoint, ds: &Dataset, target: ProbeTarget, cfg: &ProbeConfig) -> Result<ProbeReport> {
    if ds.train.is_empty() || ds.eval.is_empty() {
        return Err(Error::validation("dataset", "probe needs non-empty train and eval splits"));
    }
    let classes = match target {
        ProbeTarget::Class => ds.num_classes,
        ProbeTarget::Color => COLOR_BUCKETS,
    };
    let xtr = embed_split(ck, &ds.train)?;
    let xev = embed_split(ck, &ds.eval)?;
    let mut ytr: Vec<usize> = ds.train.iter().map(|l| target.label(l)).collect();
    let yev: Vec<usize> = ds.eval.iter().map(|l| target.label(l)).collect();
    if cfg.shuffle_labels {
        CounterRng::new(cfg.seed).stream(0x73687566).shuffle(&mut ytr);
    }
    let (probe, final_loss) = LinearProbe::fit(&xtr, &ytr, classes, cfg)?;
    Ok(ProbeReport {
        target,
        classes,
        train_accuracy: hit_rate(&probe.predict(&xtr)?, &ytr),
        eval_accuracy: hit_rate(&probe.predict(&xev)?, &yev),
        final_loss,
    })
}
