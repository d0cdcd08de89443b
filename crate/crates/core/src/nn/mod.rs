//! Hand-written layers with explicit forward caches and backward passes.

mod batchnorm;
mod conv;
mod functional;
mod pool;

pub use batchnorm::BatchNorm2d;
pub use conv::Conv2d;
pub use functional::{cross_entropy, log_softmax_row, relu_backward_inplace, relu_inplace, softmax_row, softmax_rows};
pub use pool::{global_avg_pool, global_avg_pool_backward, MaxPool2d};

use alloc::vec;
use alloc::vec::Vec;

/// A trainable tensor with a lazily allocated gradient buffer.
#[derive(Debug, Clone, PartialEq)]
pub struct Param {
    pub value: Vec<f32>,
    pub grad: Vec<f32>,
}

impl Param {
    pub fn new(value: Vec<f32>) -> Self {
        Param { value, grad: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.value.len()
    }

    pub fn is_empty(&self) -> bool {
        self.value.is_empty()
    }

    pub fn zero_grad(&mut self) {
        if self.grad.len() == self.value.len() {
            self.grad.iter_mut().for_each(|g| *g = 0.0);
        } else {
            self.grad = vec![0.0; self.value.len()];
        }
    }

    /// Gradient buffer, allocated on first use.
    pub fn grad_mut(&mut self) -> &mut [f32] {
        if self.grad.len() != self.value.len() {
            self.grad = vec![0.0; self.value.len()];
        }
        &mut self.grad
    }

    /// Drops the gradient buffer (used when a module is frozen).
    pub fn release_grad(&mut self) {
        self.grad = Vec::new();
    }
}

/// Box-Muller normal sample.
pub(crate) fn sample_normal<R: rand::Rng + ?Sized>(rng: &mut R, std: f32) -> f32 {
    let u1: f32 = rng.gen_range(f32::EPSILON..1.0);
    let u2: f32 = rng.gen::<f32>();
    std * libm::sqrtf(-2.0 * libm::logf(u1)) * libm::cosf(core::f32::consts::TAU * u2)
}
