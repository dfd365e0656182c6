//! Desk-scale convolutional encoder `e(x)` and its linear classifier head.
//!
//! Layout: `conv3x3/2 → relu → conv3x3/2 → relu → flatten → dense(D)` for the
//! embedding, then `dense(C)` for the logits. Inputs are NHWC.

use crate::error::{Error, Result};
use crate::rng::CounterRng;
use crate::tensor::{Graph, Real, Tensor, Var};
use serde::{Deserialize, Serialize};
use std::sync::atomic::{AtomicU64, Ordering};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EncoderConfig {
    pub embed_dim: usize,
    pub conv1_channels: usize,
    pub conv2_channels: usize,
    pub image_size: usize,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        Self {
            embed_dim: 64,
            conv1_channels: 16,
            conv2_channels: 32,
            image_size: crate::data::IMAGE_SIZE,
        }
    }
}

impl EncoderConfig {
    fn spatial(&self) -> (usize, usize) {
        let s1 = (self.image_size - 3) / 2 + 1;
        let s2 = (s1 - 3) / 2 + 1;
        (s1, s2)
    }

    pub fn flat_dim(&self) -> usize {
        let (_, s2) = self.spatial();
        s2 * s2 * self.conv2_channels
    }

    pub fn validate(&self) -> Result<()> {
        if self.embed_dim == 0 || self.conv1_channels == 0 || self.conv2_channels == 0 {
            return Err(Error::validation("encoder", "dimensions must be positive"));
        }
        if self.image_size < 7 {
            return Err(Error::validation("image_size", "must be at least 7 for two stride-2 convolutions"));
        }
        Ok(())
    }
}

pub type NamedParams<T> = Vec<(String, Tensor<T>)>;

/// He-normal initialized tensor.
pub(crate) fn he_normal<T: Real>(shape: &[usize], fan_in: usize, rng: &mut CounterRng) -> Tensor<T> {
    let std = (2.0 / fan_in as f64).sqrt();
    let n: usize = shape.iter().product();
    Tensor::raw(shape.to_vec(), (0..n).map(|_| T::from_f64c(rng.normal() * std)).collect())
}

/// Encoder plus classifier head.
#[derive(Debug)]
pub struct Model<T: Real = f32> {
    pub config: EncoderConfig,
    pub num_classes: usize,
    params: NamedParams<T>,
    encoded: AtomicU64,
}

impl<T: Real> Clone for Model<T> {
    fn clone(&self) -> Self {
        Self {
            config: self.config.clone(),
            num_classes: self.num_classes,
            params: self.params.clone(),
            encoded: AtomicU64::new(0),
        }
    }
}

impl<T: Real> PartialEq for Model<T> {
    fn eq(&self, other: &Self) -> bool {
        self.config == other.config && self.num_classes == other.num_classes && self.params == other.params
    }
}

const PARAM_NAMES: [&str; 8] = [
    "encoder.conv1.kernel",
    "encoder.conv1.bias",
    "encoder.conv2.kernel",
    "encoder.conv2.bias",
    "encoder.embed.weight",
    "encoder.embed.bias",
    "head.weight",
    "head.bias",
];

/// Graph handles for a bound [`Model`], in parameter order.
#[derive(Clone, Debug)]
pub struct ModelVars(pub Vec<Var>);

impl<T: Real> Model<T> {
    pub fn new(config: EncoderConfig, num_classes: usize, seed: u64) -> Result<Self> {
        config.validate()?;
        if num_classes < 2 {
            return Err(Error::validation("num_classes", "need at least 2 classes"));
        }
        let mut rng = CounterRng::new(seed).stream(0x006d_6f64_656c);
        let (c1, c2, d) = (config.conv1_channels, config.conv2_channels, config.embed_dim);
        let flat = config.flat_dim();
        let zeros = |n: usize| Tensor::raw(vec![n], vec![T::zero(); n]);
        let params = vec![
            he_normal(&[3, 3, 3, c1], 27, &mut rng),
            zeros(c1),
            he_normal(&[3, 3, c1, c2], 9 * c1, &mut rng),
            zeros(c2),
            // Embedding starts near unit norm so the equivariance term is O(1) at step 0.
            he_normal(&[flat, d], 2 * flat * d, &mut rng),
            zeros(d),
            // Head: variance 1/fan_in, no relu follows.
            he_normal::<T>(&[d, num_classes], 2 * d, &mut rng),
            zeros(num_classes),
        ];
        Ok(Self::from_parts(
            config,
            num_classes,
            PARAM_NAMES.iter().map(|s| s.to_string()).zip(params).collect(),
        )
        .expect("freshly built parameters are consistent"))
    }

    /// Rebuilds a model from named tensors, checking every shape.
    pub fn from_parts(config: EncoderConfig, num_classes: usize, params: NamedParams<T>) -> Result<Self> {
        config.validate()?;
        let (c1, c2, d) = (config.conv1_channels, config.conv2_channels, config.embed_dim);
        let expected: [Vec<usize>; 8] = [
            vec![3, 3, 3, c1],
            vec![c1],
            vec![3, 3, c1, c2],
            vec![c2],
            vec![config.flat_dim(), d],
            vec![d],
            vec![d, num_classes],
            vec![num_classes],
        ];
        if params.len() != PARAM_NAMES.len() {
            return Err(Error::validation("model", format!("expected {} tensors, got {}", PARAM_NAMES.len(), params.len())));
        }
        for ((name, t), (want_name, want_shape)) in params.iter().zip(PARAM_NAMES.iter().zip(&expected)) {
            if name != want_name || t.shape() != want_shape.as_slice() {
                return Err(Error::validation(
                    name.clone(),
                    format!("expected {want_name} with shape {want_shape:?}, got shape {:?}", t.shape()),
                ));
            }
        }
        Ok(Self {
            config,
            num_classes,
            params,
            encoded: AtomicU64::new(0),
        })
    }

    pub fn embed_dim(&self) -> usize {
        self.config.embed_dim
    }

    pub fn params(&self) -> &NamedParams<T> {
        &self.params
    }

    pub fn params_mut(&mut self) -> impl Iterator<Item = (String, &mut Tensor<T>)> {
        self.params.iter_mut().map(|(n, t)| (n.clone(), t))
    }

    pub fn cast<U: Real>(&self) -> Model<U> {
        Model {
            config: self.config.clone(),
            num_classes: self.num_classes,
            params: self.params.iter().map(|(n, t)| (n.clone(), t.cast())).collect(),
            encoded: AtomicU64::new(0),
        }
    }

    /// Number of images pushed through the encoder since creation or the last reset.
    pub fn encoded_samples(&self) -> u64 {
        self.encoded.load(Ordering::Relaxed)
    }

    pub fn reset_encoded_samples(&self) {
        self.encoded.store(0, Ordering::Relaxed);
    }

    /// Puts the parameters on `g`, as trainable params or constants.
    pub fn bind(&self, g: &mut Graph<T>, trainable: bool) -> ModelVars {
        ModelVars(
            self.params
                .iter()
                .map(|(_, t)| if trainable { g.param(t.clone()) } else { g.leaf(t.clone()) })
                .collect(),
        )
    }

    /// `[B, H, W, 3] -> [B, D]`.
    pub fn encode(&self, g: &mut Graph<T>, v: &ModelVars, x: Var) -> Result<Var> {
        let batch = g.value(x).shape()[0];
        let p = &v.0;
        let h = g.conv2d(x, p[0], 2)?;
        let h = g.add_bias(h, p[1])?;
        let h = g.relu(h);
        let h = g.conv2d(h, p[2], 2)?;
        let h = g.add_bias(h, p[3])?;
        let h = g.relu(h);
        let h = g.reshape(h, vec![batch, self.config.flat_dim()])?;
        let e = g.dense(h, p[4], p[5])?;
        self.encoded.fetch_add(batch as u64, Ordering::Relaxed);
        Ok(e)
    }

    /// `[B, D] -> [B, C]`.
    pub fn logits(&self, g: &mut Graph<T>, v: &ModelVars, e: Var) -> Result<Var> {
        g.dense(e, v.0[6], v.0[7])
    }

    /// Inference-only embedding of a batch.
    pub fn embed(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        let mut g = Graph::new();
        let v = self.bind_encoder_only(&mut g);
        let xv = g.leaf(x.clone());
        let e = self.encode(&mut g, &v, xv)?;
        Ok(g.value(e).clone())
    }

    /// Inference-only logits from embeddings.
    pub fn classify(&self, e: &Tensor<T>) -> Result<Tensor<T>> {
        let mut g = Graph::new();
        let ev = g.leaf(e.clone());
        let w = g.leaf(self.params[6].1.clone());
        let b = g.leaf(self.params[7].1.clone());
        let l = g.dense(ev, w, b)?;
        Ok(g.value(l).clone())
    }

    fn bind_encoder_only(&self, g: &mut Graph<T>) -> ModelVars {
        // The head is never touched on the embedding path, so bind a dummy in its place.
        let mut vars: Vec<Var> = self.params[..6].iter().map(|(_, t)| g.leaf(t.clone())).collect();
        vars.extend([vars[5], vars[5]]);
        ModelVars(vars)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small() -> EncoderConfig {
        EncoderConfig {
            embed_dim: 8,
            conv1_channels: 4,
            conv2_channels: 4,
            image_size: 9,
        }
    }

    #[test]
    fn shapes_and_counter() {
        let m: Model<f32> = Model::new(EncoderConfig::default(), 10, 1).unwrap();
        assert_eq!(m.config.flat_dim(), 7 * 7 * 32);
        let x = Tensor::new(vec![3, 32, 32, 3], vec![0.1f32; 3 * 32 * 32 * 3]).unwrap();
        let e = m.embed(&x).unwrap();
        assert_eq!(e.shape(), &[3, 64]);
        assert_eq!(m.classify(&e).unwrap().shape(), &[3, 10]);
        assert_eq!(m.encoded_samples(), 3);
    }

    #[test]
    fn deterministic_init_and_shape_checks() {
        let a: Model<f32> = Model::new(small(), 3, 7).unwrap();
        let b: Model<f32> = Model::new(small(), 3, 7).unwrap();
        assert_eq!(a, b);
        let c: Model<f32> = Model::new(small(), 3, 8).unwrap();
        assert_ne!(a, c);
        let mut parts = a.params().clone();
        parts[4].1 = Tensor::zeros(vec![5, 8]);
        let err = Model::from_parts(small(), 3, parts).unwrap_err();
        assert!(err.to_string().contains("encoder.embed.weight"), "{err}");
    }

    #[test]
    fn encoder_gradients_match_finite_differences() {
        use crate::tensor::check_gradients;
        let m: Model<f64> = Model::new(small(), 3, 2).unwrap();
        let mut rng = CounterRng::new(3);
        let x = Tensor::new(vec![2, 9, 9, 3], (0..2 * 243).map(|_| rng.normal()).collect()).unwrap();
        let mut inputs = vec![x];
        inputs.extend(m.params().iter().map(|(_, t)| t.clone()));
        let labels = crate::tensor::one_hot::<f64>(&[0, 2], 3).unwrap();
        let report = check_gradients(
            &inputs,
            |g, vs| {
                let v = ModelVars(vs[1..].to_vec());
                let e = m.encode(g, &v, vs[0])?;
                let l = m.logits(g, &v, e)?;
                g.softmax_cross_entropy(l, &labels)
            },
            1e-4,
        )
        .unwrap();
        assert!(report.passed, "{report:?}");
    }
}
