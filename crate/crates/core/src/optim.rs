//! Momentum SGD with L2 weight decay and a cosine
//! learning-rate schedule.

use serde::{Deserialize, Serialize};

use crate::encoder::{BoundEncoder, Encoder};
use crate::error::{Error, Result};
use crate::graph::Gradients;
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SgdConfig {
    pub lr: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    /// Final learning rate as a fraction of `lr`.
    pub final_lr_fraction: f64,
}

impl Default for SgdConfig {
    fn default() -> Self {
        Self {
            lr: 0.05,
            momentum: 0.9,
            weight_decay: 1e-4,
            final_lr_fraction: 0.0,
        }
    }
}

impl SgdConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(Error::Config(format!("lr must be positive, got {}", self.lr)));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(Error::Config(format!(
                "momentum must lie in [0, 1), got {}",
                self.momentum
            )));
        }
        if self.weight_decay < 0.0 || !(0.0..=1.0).contains(&self.final_lr_fraction) {
            return Err(Error::Config(
                "weight_decay must be >= 0 and final_lr_fraction in [0, 1]".into(),
            ));
        }
        Ok(())
    }

    /// Learning rate at `step` of `total` under cosine decay.
    pub fn lr_at(&self, step: usize, total: usize) -> f64 {
        if total <= 1 {
            return self.lr;
        }
        let t = step as f64 / (total - 1) as f64;
        let floor = self.lr * self.final_lr_fraction;
        floor + (self.lr - floor) * 0.5 * (1.0 + (std::f64::consts::PI * t).cos())
    }
}

/// Per-parameter momentum buffers.
#[derive(Clone, Debug)]
pub struct Sgd {
    config: SgdConfig,
    velocity: Vec<Tensor>,
}

impl Sgd {
    pub fn new(config: SgdConfig, params: &[Tensor]) -> Self {
        let velocity = params.iter().map(|p| Tensor::zeros(p.shape().to_vec())).collect();
        Self { config, velocity }
    }

    pub fn config(&self) -> &SgdConfig {
        &self.config
    }

    /// `v <- mu v + (g + wd p)`, `p <- p - lr v` for every parameter with a
    /// gradient; the others are left untouched.
    pub fn step(&mut self, params: &mut [Tensor], grads: &[Option<&Tensor>], lr: f64) {
        let (mu, wd) = (self.config.momentum, self.config.weight_decay);
        for ((p, v), g) in params.iter_mut().zip(&mut self.velocity).zip(grads) {
            let Some(g) = g else { continue };
            for ((pv, vv), gv) in p.data_mut().iter_mut().zip(v.data_mut()).zip(g.data()) {
                *vv = mu * *vv + gv + wd * *pv;
                *pv -= lr * *vv;
            }
        }
    }

    /// Applies the gradients of the trainable parameters in `bound`.
    pub fn step_encoder(&mut self, encoder: &mut Encoder, bound: &BoundEncoder, grads: &Gradients, lr: f64) {
        let g: Vec<Option<&Tensor>> = bound
            .vars()
            .iter()
            .enumerate()
            .map(|(i, &v)| if bound.is_trainable(i) { grads.get(v) } else { None })
            .collect();
        self.step(encoder.params_mut(), &g, lr);
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn cosine_schedule_endpoints() {
        let c = SgdConfig {
            lr: 0.1,
            final_lr_fraction: 0.1,
            ..Default::default()
        };
        assert!((c.lr_at(0, 11) - 0.1).abs() < 1e-15);
        assert!((c.lr_at(10, 11) - 0.01).abs() < 1e-15);
        assert!((c.lr_at(5, 11) - 0.055).abs() < 1e-15);
    }

    #[test]
    fn step_minimizes_a_quadratic() {
        let c = SgdConfig {
            lr: 0.1,
            weight_decay: 0.0,
            ..Default::default()
        };
        let mut p = vec![Tensor::new(vec![2], vec![3.0, -2.0])];
        let mut opt = Sgd::new(c, &p);
        for _ in 0..200 {
            let g = Tensor::new(vec![2], p[0].data().to_vec());
            opt.step(&mut p, &[Some(&g)], 0.1);
        }
        assert!(p[0].data().iter().all(|v| v.abs() < 1e-3));
    }

    #[test]
    fn missing_gradient_leaves_parameter_alone() {
        let mut p = vec![Tensor::new(vec![1], vec![1.0])];
        let mut opt = Sgd::new(SgdConfig::default(), &p);
        opt.step(&mut p, &[None], 0.1);
        assert_eq!(p[0].data(), &[1.0]);
    }
}
