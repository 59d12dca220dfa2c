//! Adam with coupled (L2) weight decay, as in `torch.optim.Adam`.

use serde::{Deserialize, Serialize};

use crate::scalar::Scalar;
use crate::tensor::Param;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self { beta1: 0.9, beta2: 0.999, eps: 1e-8, weight_decay: 0.0 }
    }
}

#[derive(Clone, Debug)]
pub struct Adam<T> {
    config: AdamConfig,
    step: u64,
    first: Vec<Vec<T>>,
    second: Vec<Vec<T>>,
}

impl<T: Scalar> Adam<T> {
    pub fn new(config: AdamConfig) -> Self {
        Self { config, step: 0, first: Vec::new(), second: Vec::new() }
    }

    pub fn steps_taken(&self) -> u64 {
        self.step
    }

    /// One update of every parameter from its accumulated gradient. The
    /// parameter list must be presented in the same order on every call.
    pub fn step(&mut self, params: Vec<&mut Param<T>>, lr: f64) {
        if self.first.is_empty() {
            self.first = params.iter().map(|p| vec![T::zero(); p.len()]).collect();
            self.second = self.first.clone();
        }
        assert_eq!(self.first.len(), params.len(), "parameter set changed between steps");
        self.step += 1;
        let c = &self.config;
        let t = self.step as i32;
        let bias1 = 1.0 - c.beta1.powi(t);
        let bias2 = 1.0 - c.beta2.powi(t);
        let step_size = T::from_f64_lossy(lr / bias1);
        let inv_sqrt_bias2 = T::from_f64_lossy(1.0 / bias2.sqrt());
        let (b1, b2) = (T::from_f64_lossy(c.beta1), T::from_f64_lossy(c.beta2));
        let (one_b1, one_b2) = (T::one() - b1, T::one() - b2);
        let eps = T::from_f64_lossy(c.eps);
        let wd = T::from_f64_lossy(c.weight_decay);
        for ((p, m), v) in params.into_iter().zip(&mut self.first).zip(&mut self.second) {
            assert_eq!(p.len(), m.len(), "parameter {} changed size", p.name);
            for i in 0..p.value.len() {
                let g = p.grad[i] + wd * p.value[i];
                m[i] = b1 * m[i] + one_b1 * g;
                v[i] = b2 * v[i] + one_b2 * g * g;
                let denom = v[i].sqrt() * inv_sqrt_bias2 + eps;
                p.value[i] -= step_size * m[i] / denom;
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn first_step_moves_by_learning_rate_against_gradient_sign() {
        let mut p = Param::new("w", vec![2], vec![1.0f64, -1.0]);
        p.grad = vec![0.5, -3.0];
        let mut opt = Adam::new(AdamConfig::default());
        opt.step(vec![&mut p], 0.01);
        assert!((p.value[0] - 0.99).abs() < 1e-6);
        assert!((p.value[1] + 0.99).abs() < 1e-6);
        assert_eq!(opt.steps_taken(), 1);
    }

    #[test]
    fn minimizes_a_quadratic() {
        let mut p = Param::new("w", vec![1], vec![5.0f64]);
        let mut opt = Adam::new(AdamConfig { weight_decay: 0.0, ..Default::default() });
        for _ in 0..2000 {
            p.grad[0] = 2.0 * (p.value[0] - 2.0);
            opt.step(vec![&mut p], 0.05);
        }
        assert!((p.value[0] - 2.0).abs() < 1e-2);
    }
}
