use alloc::vec;
use alloc::vec::Vec;

use super::Param;
use crate::error::{bail, Result};
use crate::tensor::Tensor;

#[derive(Debug, Clone)]
struct BnCache {
    x_hat: Tensor,
    inv_std: Vec<f32>,
}

/// Per-channel batch normalisation with affine parameters and running statistics.
#[derive(Debug, Clone)]
pub struct BatchNorm2d {
    pub gamma: Param,
    pub beta: Param,
    pub running_mean: Vec<f32>,
    pub running_var: Vec<f32>,
    pub eps: f32,
    pub momentum: f32,
    cache: Option<BnCache>,
}

impl PartialEq for BatchNorm2d {
    fn eq(&self, other: &Self) -> bool {
        self.gamma.value == other.gamma.value
            && self.beta.value == other.beta.value
            && self.running_mean == other.running_mean
            && self.running_var == other.running_var
    }
}

impl BatchNorm2d {
    pub fn new(channels: usize) -> Self {
        BatchNorm2d {
            gamma: Param::new(vec![1.0; channels]),
            beta: Param::new(vec![0.0; channels]),
            running_mean: vec![0.0; channels],
            running_var: vec![1.0; channels],
            eps: 1e-5,
            momentum: 0.1,
            cache: None,
        }
    }

    pub fn channels(&self) -> usize {
        self.gamma.len()
    }

    fn check(&self, x: &Tensor) -> Result<()> {
        if x.channels() != self.channels() {
            bail!(Structural, "batch norm expects {} channels, got {}", self.channels(), x.channels());
        }
        Ok(())
    }

    /// Normalises with the stored running statistics.
    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        self.check(x)?;
        let mut out = x.clone();
        let (n, c, hw) = (x.batch(), x.channels(), x.plane());
        for ch in 0..c {
            let inv = 1.0 / libm::sqrtf(self.running_var[ch] + self.eps);
            let scale = self.gamma.value[ch] * inv;
            let shift = self.beta.value[ch] - self.running_mean[ch] * scale;
            for i in 0..n {
                let start = (i * c + ch) * hw;
                for v in &mut out.data_mut()[start..start + hw] {
                    *v = *v * scale + shift;
                }
            }
        }
        Ok(out)
    }

    /// Normalises with batch statistics, updates running statistics and caches for backward.
    pub fn forward_train(&mut self, x: &Tensor) -> Result<Tensor> {
        self.check(x)?;
        let (n, c, hw) = (x.batch(), x.channels(), x.plane());
        let m = (n * hw) as f32;
        let mut x_hat = Tensor::zeros(x.shape());
        let mut out = Tensor::zeros(x.shape());
        let mut inv_std = vec![0.0; c];
        for ch in 0..c {
            let mut sum = 0.0f64;
            for i in 0..n {
                let start = (i * c + ch) * hw;
                sum += x.data()[start..start + hw].iter().map(|&v| v as f64).sum::<f64>();
            }
            let mean = (sum / m as f64) as f32;
            let mut sq = 0.0f64;
            for i in 0..n {
                let start = (i * c + ch) * hw;
                sq += x.data()[start..start + hw]
                    .iter()
                    .map(|&v| {
                        let d = (v - mean) as f64;
                        d * d
                    })
                    .sum::<f64>();
            }
            let var = (sq / m as f64) as f32;
            let inv = 1.0 / libm::sqrtf(var + self.eps);
            inv_std[ch] = inv;
            let (g, b) = (self.gamma.value[ch], self.beta.value[ch]);
            for i in 0..n {
                let start = (i * c + ch) * hw;
                for j in start..start + hw {
                    let xh = (x.data()[j] - mean) * inv;
                    x_hat.data_mut()[j] = xh;
                    out.data_mut()[j] = xh * g + b;
                }
            }
            let unbiased = if m > 1.0 { var * m / (m - 1.0) } else { var };
            self.running_mean[ch] = (1.0 - self.momentum) * self.running_mean[ch] + self.momentum * mean;
            self.running_var[ch] = (1.0 - self.momentum) * self.running_var[ch] + self.momentum * unbiased;
        }
        self.cache = Some(BnCache { x_hat, inv_std });
        Ok(out)
    }

    pub fn backward(&mut self, grad_out: &Tensor) -> Result<Tensor> {
        let Some(cache) = self.cache.take() else {
            bail!(State, "batch norm backward called without a cached forward pass");
        };
        let (n, c, hw) = (grad_out.batch(), grad_out.channels(), grad_out.plane());
        let m = (n * hw) as f32;
        let mut grad_in = Tensor::zeros(grad_out.shape());
        let gamma = self.gamma.value.clone();
        let mut dgamma = vec![0.0f32; c];
        let mut dbeta = vec![0.0f32; c];
        for ch in 0..c {
            let (mut sum_dy, mut sum_dy_xh) = (0.0f32, 0.0f32);
            for i in 0..n {
                let start = (i * c + ch) * hw;
                for j in start..start + hw {
                    let dy = grad_out.data()[j];
                    sum_dy += dy;
                    sum_dy_xh += dy * cache.x_hat.data()[j];
                }
            }
            dgamma[ch] = sum_dy_xh;
            dbeta[ch] = sum_dy;
            let k = gamma[ch] * cache.inv_std[ch] / m;
            for i in 0..n {
                let start = (i * c + ch) * hw;
                for j in start..start + hw {
                    let dy = grad_out.data()[j];
                    grad_in.data_mut()[j] = k * (m * dy - sum_dy - cache.x_hat.data()[j] * sum_dy_xh);
                }
            }
        }
        for (g, d) in self.gamma.grad_mut().iter_mut().zip(&dgamma) {
            *g += *d;
        }
        for (g, d) in self.beta.grad_mut().iter_mut().zip(&dbeta) {
            *g += *d;
        }
        Ok(grad_in)
    }

    pub fn clear_cache(&mut self) {
        self.cache = None;
    }

    pub fn select(&self, keep: &[usize]) -> BatchNorm2d {
        let pick = |v: &[f32]| keep.iter().map(|&i| v[i]).collect::<Vec<_>>();
        BatchNorm2d {
            gamma: Param::new(pick(&self.gamma.value)),
            beta: Param::new(pick(&self.beta.value)),
            running_mean: pick(&self.running_mean),
            running_var: pick(&self.running_var),
            eps: self.eps,
            momentum: self.momentum,
            cache: None,
        }
    }
}
