//! Bias-corrected Adam.

use alloc::vec::Vec;

use crate::error::{Error, Result};
use crate::graph::ParamStore;
use crate::matrix::Matrix;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self { lr: 1e-3, beta1: 0.9, beta2: 0.98, eps: 1e-8 }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct AdamState {
    pub config: AdamConfig,
    first: Vec<Matrix>,
    second: Vec<Matrix>,
    step: u64,
}

impl AdamState {
    pub fn new(config: AdamConfig, params: &ParamStore) -> Result<Self> {
        if !(config.lr >= 0.0) || !(0.0..1.0).contains(&config.beta1) || !(0.0..1.0).contains(&config.beta2) {
            return Err(Error::InvalidParameter(alloc::format!("bad Adam configuration {config:?}")));
        }
        let zeros = || params.iter().map(|(_, p)| Matrix::zeros(p.value.rows(), p.value.cols())).collect::<Vec<_>>();
        Ok(Self { config, first: zeros(), second: zeros(), step: 0 })
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    /// Applies one update from the parameters' accumulated gradients.
    pub fn step(&mut self, params: &mut ParamStore) {
        self.step += 1;
        let AdamConfig { lr, beta1, beta2, eps } = self.config;
        let t = self.step as i32;
        let c1 = 1.0 - libm::pow(beta1, t as f64);
        let c2 = 1.0 - libm::pow(beta2, t as f64);
        for ((p, m), v) in params.iter_mut().zip(&mut self.first).zip(&mut self.second) {
            let (theta, grad) = (p.value.data_mut(), p.grad.data());
            for (((x, g), mi), vi) in theta.iter_mut().zip(grad).zip(m.data_mut()).zip(v.data_mut()) {
                *mi = beta1 * *mi + (1.0 - beta1) * g;
                *vi = beta2 * *vi + (1.0 - beta2) * g * g;
                let m_hat = *mi / c1;
                let v_hat = *vi / c2;
                *x -= lr * m_hat / (libm::sqrt(v_hat) + eps);
            }
        }
    }
}
