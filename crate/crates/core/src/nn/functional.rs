use alloc::vec::Vec;

use crate::tensor::{Matrix, Tensor};

pub fn relu_inplace(x: &mut Tensor) {
    x.data_mut().iter_mut().for_each(|v| *v = v.max(0.0));
}

/// Zeroes gradient entries where the ReLU output was not positive.
pub fn relu_backward_inplace(grad: &mut Tensor, output: &Tensor) {
    for (g, &o) in grad.data_mut().iter_mut().zip(output.data()) {
        if o <= 0.0 {
            *g = 0.0;
        }
    }
}

/// Numerically stable softmax of one row.
pub fn softmax_row(logits: &[f32], out: &mut [f32]) {
    let max = logits.iter().copied().fold(f32::NEG_INFINITY, f32::max);
    let mut sum = 0.0f32;
    for (o, &z) in out.iter_mut().zip(logits) {
        *o = libm::expf(z - max);
        sum += *o;
    }
    out.iter_mut().for_each(|o| *o /= sum);
}

pub fn softmax_rows(logits: &Matrix) -> Matrix {
    let mut out = Matrix::zeros(logits.rows(), logits.cols());
    for r in 0..logits.rows() {
        softmax_row(logits.row(r), out.row_mut(r));
    }
    out
}

pub fn log_softmax_row(logits: &[f32]) -> Vec<f32> {
    let max = logits.iter().copied().fold(f32::NEG_INFINITY, f32::max);
    let lse = max + libm::logf(logits.iter().map(|&z| libm::expf(z - max)).sum::<f32>());
    logits.iter().map(|&z| z - lse).collect()
}

/// Mean cross-entropy over rows; returns the loss and its gradient w.r.t. the logits.
pub fn cross_entropy(logits: &Matrix, targets: &[usize]) -> (f32, Matrix) {
    let n = logits.rows();
    let mut grad = softmax_rows(logits);
    let mut loss = 0.0f32;
    for (r, &t) in targets.iter().enumerate() {
        let p = grad.row(r)[t].max(f32::MIN_POSITIVE);
        loss -= libm::logf(p);
        grad.row_mut(r)[t] -= 1.0;
    }
    let scale = 1.0 / n as f32;
    grad.data_mut().iter_mut().for_each(|g| *g *= scale);
    (loss * scale, grad)
}
