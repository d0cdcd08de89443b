//! Adaptive-moment gradient descent.

use alloc::vec;
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::nn::Param;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub learning_rate: f32,
    pub beta1: f32,
    pub beta2: f32,
    pub eps: f32,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig { learning_rate: 1e-3, beta1: 0.9, beta2: 0.999, eps: 1e-8 }
    }
}

/// Adam with one moment pair per parameter tensor, matched by position.
#[derive(Debug, Clone)]
pub struct Adam {
    config: AdamConfig,
    step: i32,
    first: Vec<Vec<f32>>,
    second: Vec<Vec<f32>>,
}

impl Adam {
    pub fn new(config: AdamConfig) -> Self {
        Adam { config, step: 0, first: Vec::new(), second: Vec::new() }
    }

    pub fn steps(&self) -> i32 {
        self.step
    }

    /// Applies one update. Parameter order must be stable between calls.
    pub fn step(&mut self, params: &mut [&mut Param]) {
        if self.first.len() != params.len() {
            self.first = params.iter().map(|p| vec![0.0; p.len()]).collect();
            self.second = params.iter().map(|p| vec![0.0; p.len()]).collect();
        }
        self.step += 1;
        let c = self.config;
        let bias1 = 1.0 - libm::powf(c.beta1, self.step as f32);
        let bias2 = 1.0 - libm::powf(c.beta2, self.step as f32);
        for (k, p) in params.iter_mut().enumerate() {
            if p.grad.len() != p.value.len() {
                continue;
            }
            let (m, v) = (&mut self.first[k], &mut self.second[k]);
            if m.len() != p.len() {
                *m = vec![0.0; p.len()];
                *v = vec![0.0; p.len()];
            }
            for j in 0..p.value.len() {
                let g = p.grad[j];
                m[j] = c.beta1 * m[j] + (1.0 - c.beta1) * g;
                v[j] = c.beta2 * v[j] + (1.0 - c.beta2) * g * g;
                let m_hat = m[j] / bias1;
                let v_hat = v[j] / bias2;
                p.value[j] -= c.learning_rate * m_hat / (libm::sqrtf(v_hat) + c.eps);
            }
        }
    }
}
