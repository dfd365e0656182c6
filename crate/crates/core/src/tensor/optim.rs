use super::{Real, Tensor};
use crate::error::{Error, Result};
use serde::{Deserialize, Serialize};

/// Hyperparameters of Nesterov SGD with coupled weight decay and a warmup+cosine schedule.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SgdConfig {
    pub base_lr: f64,
    pub momentum: f64,
    pub nesterov: bool,
    /// λ in `λ‖w‖²`; contributes `2λw` to each gradient.
    pub weight_decay: f64,
    pub warmup_steps: u64,
    pub total_steps: u64,
}

/// Linear warmup to `base_lr`, then half-cosine decay to zero at `total_steps`.
pub fn cosine_lr(step: u64, warmup_steps: u64, total_steps: u64, base_lr: f64) -> f64 {
    if step < warmup_steps {
        return base_lr * step as f64 / warmup_steps as f64;
    }
    let span = total_steps.saturating_sub(warmup_steps).max(1) as f64;
    let t = (step.min(total_steps) - warmup_steps) as f64 / span;
    base_lr * 0.5 * (1.0 + (std::f64::consts::PI * t).cos())
}

#[derive(Clone, Debug)]
pub struct OptimizerState<T> {
    pub config: SgdConfig,
    buffers: Vec<Vec<T>>,
    step: u64,
}

impl<T: Real> OptimizerState<T> {
    pub fn new(config: SgdConfig) -> Self {
        Self {
            config,
            buffers: Vec::new(),
            step: 0,
        }
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    pub fn current_lr(&self) -> f64 {
        let c = &self.config;
        cosine_lr(self.step, c.warmup_steps, c.total_steps, c.base_lr)
    }

    /// Applies one update to every parameter and advances the schedule.
    /// Returns the learning rate that was used.
    pub fn step(&mut self, params: &mut [(String, &mut Tensor<T>)], grads: &[Vec<T>]) -> Result<f64> {
        if params.len() != grads.len() {
            return Err(Error::Usage(format!(
                "{} parameters but {} gradients",
                params.len(),
                grads.len()
            )));
        }
        for ((name, p), g) in params.iter().zip(grads) {
            if p.len() != g.len() {
                return Err(Error::Shape {
                    op: "sgd_momentum_step",
                    lhs: p.shape().to_vec(),
                    rhs: vec![g.len()],
                });
            }
            if g.iter().any(|v| !v.is_finite()) {
                return Err(Error::NonFinite(format!("gradient of `{name}`")));
            }
        }
        if self.buffers.is_empty() {
            self.buffers = params.iter().map(|(_, p)| vec![T::zero(); p.len()]).collect();
        }
        let lr = T::from_f64c(self.current_lr());
        let mu = T::from_f64c(self.config.momentum);
        let decay = T::from_f64c(2.0 * self.config.weight_decay);
        for (((_, p), g), buf) in params.iter_mut().zip(grads).zip(&mut self.buffers) {
            for ((w, &gv), v) in p.data_mut().iter_mut().zip(g).zip(buf.iter_mut()) {
                let d = gv + decay * *w;
                *v = mu * *v + d;
                let update = if self.config.nesterov { d + mu * *v } else { *v };
                *w = *w - lr * update;
            }
        }
        self.step += 1;
        Ok(lr.as_f64())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn cfg(momentum: f64, wd: f64) -> SgdConfig {
        SgdConfig {
            base_lr: 0.1,
            momentum,
            nesterov: true,
            weight_decay: wd,
            warmup_steps: 0,
            total_steps: 1_000_000,
        }
    }

    #[test]
    fn schedule_endpoints() {
        assert_eq!(cosine_lr(0, 10, 100, 0.1), 0.0);
        assert!((cosine_lr(10, 10, 100, 0.1) - 0.1).abs() < 1e-15);
        assert!(cosine_lr(100, 10, 100, 0.1).abs() < 1e-12);
        assert!((cosine_lr(5, 10, 100, 0.1) - 0.05).abs() < 1e-15);
    }

    #[test]
    fn plain_sgd_without_momentum() {
        let mut w = Tensor::<f64>::from_f64([2], &[1.0, -1.0]).unwrap();
        let mut opt = OptimizerState::new(cfg(0.0, 0.0));
        let lr = opt.step(&mut [("w".into(), &mut w)], &[vec![0.5, 2.0]]).unwrap();
        assert!((lr - 0.1).abs() < 1e-12);
        assert_eq!(w.data(), &[1.0 - 0.05, -1.0 - 0.2]);
    }

    #[test]
    fn pure_decay_shrinks() {
        let mut w = Tensor::<f64>::from_f64([2], &[3.0, 4.0]).unwrap();
        let mut opt = OptimizerState::new(cfg(0.9, 1e-2));
        opt.step(&mut [("w".into(), &mut w)], &[vec![0.0, 0.0]]).unwrap();
        assert!(w.sq_norm() < 25.0);
    }

    #[test]
    fn nesterov_two_steps_match_recursion() {
        // v1 = g, w1 = w0 - lr(g + mu v1); v2 = mu v1 + g, w2 = w1 - lr(g + mu v2).
        // The cosine schedule moves by ~1e-12 over two steps of a million.
        let (lr, mu, g) = (0.1, 0.9, 1.0);
        let v1 = g;
        let w1 = -lr * (g + mu * v1);
        let v2 = mu * v1 + g;
        let w2 = w1 - lr * (g + mu * v2);
        let mut w = Tensor::<f64>::from_f64([1], &[0.0]).unwrap();
        let mut opt = OptimizerState::new(cfg(mu, 0.0));
        opt.step(&mut [("w".into(), &mut w)], &[vec![g]]).unwrap();
        assert!((w.data()[0] - w1).abs() < 1e-10);
        opt.step(&mut [("w".into(), &mut w)], &[vec![g]]).unwrap();
        assert!((w.data()[0] - w2).abs() < 1e-10);
        assert_eq!(opt.step_count(), 2);
    }

    #[test]
    fn nan_gradient_names_parameter() {
        let mut w = Tensor::<f64>::zeros([1]);
        let mut opt = OptimizerState::new(cfg(0.9, 0.0));
        let err = opt
            .step(&mut [("encoder.fc.weight".into(), &mut w)], &[vec![f64::NAN]])
            .unwrap_err();
        assert!(err.to_string().contains("encoder.fc.weight"));
    }
}
