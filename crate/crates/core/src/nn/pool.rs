use alloc::vec;
use alloc::vec::Vec;

use crate::error::{bail, Result};
use crate::tensor::{Matrix, Tensor};

/// Max pooling with square window.
#[derive(Debug, Clone, PartialEq)]
pub struct MaxPool2d {
    pub kernel: usize,
    pub stride: usize,
    pub padding: usize,
    #[doc(hidden)]
    argmax: Option<(Vec<usize>, [usize; 4])>,
}

impl MaxPool2d {
    pub fn new(kernel: usize, stride: usize, padding: usize) -> Self {
        MaxPool2d { kernel, stride, padding, argmax: None }
    }

    pub fn output_hw(&self, h: usize, w: usize) -> (usize, usize) {
        (
            (h + 2 * self.padding - self.kernel) / self.stride + 1,
            (w + 2 * self.padding - self.kernel) / self.stride + 1,
        )
    }

    fn run(&self, x: &Tensor, record: bool) -> (Tensor, Vec<usize>) {
        let [n, c, h, w] = x.shape();
        let (oh, ow) = self.output_hw(h, w);
        let mut out = Tensor::zeros([n, c, oh, ow]);
        let mut idx = if record { vec![0; n * c * oh * ow] } else { Vec::new() };
        let (s, p) = (self.stride as isize, self.padding as isize);
        for plane in 0..n * c {
            let src = &x.data()[plane * h * w..(plane + 1) * h * w];
            for oy in 0..oh {
                for ox in 0..ow {
                    let mut best = f32::NEG_INFINITY;
                    let mut best_i = 0;
                    for ky in 0..self.kernel {
                        let iy = oy as isize * s + ky as isize - p;
                        if iy < 0 || iy >= h as isize {
                            continue;
                        }
                        for kx in 0..self.kernel {
                            let ix = ox as isize * s + kx as isize - p;
                            if ix < 0 || ix >= w as isize {
                                continue;
                            }
                            let j = iy as usize * w + ix as usize;
                            if src[j] > best {
                                best = src[j];
                                best_i = j;
                            }
                        }
                    }
                    let o = plane * oh * ow + oy * ow + ox;
                    out.data_mut()[o] = best;
                    if record {
                        idx[o] = plane * h * w + best_i;
                    }
                }
            }
        }
        (out, idx)
    }

    pub fn forward(&self, x: &Tensor) -> Tensor {
        self.run(x, false).0
    }

    pub fn forward_train(&mut self, x: &Tensor) -> Tensor {
        let (out, idx) = self.run(x, true);
        self.argmax = Some((idx, x.shape()));
        out
    }

    pub fn backward(&mut self, grad_out: &Tensor) -> Result<Tensor> {
        let Some((idx, shape)) = self.argmax.take() else {
            bail!(State, "max-pool backward called without a cached forward pass");
        };
        let mut grad_in = Tensor::zeros(shape);
        for (o, &i) in idx.iter().enumerate() {
            grad_in.data_mut()[i] += grad_out.data()[o];
        }
        Ok(grad_in)
    }

    pub fn clear_cache(&mut self) {
        self.argmax = None;
    }
}

/// Spatial mean per channel: `N x C x H x W -> N x C`.
pub fn global_avg_pool(x: &Tensor) -> Matrix {
    let (n, c, hw) = (x.batch(), x.channels(), x.plane());
    let mut out = Matrix::zeros(n, c);
    for i in 0..n {
        for ch in 0..c {
            let start = (i * c + ch) * hw;
            let sum: f32 = x.data()[start..start + hw].iter().sum();
            out.row_mut(i)[ch] = sum / hw as f32;
        }
    }
    out
}

pub fn global_avg_pool_backward(grad: &Matrix, shape: [usize; 4]) -> Tensor {
    let [n, c, h, w] = shape;
    let hw = h * w;
    let mut out = Tensor::zeros(shape);
    for i in 0..n {
        for ch in 0..c {
            let g = grad.row(i)[ch] / hw as f32;
            let start = (i * c + ch) * hw;
            out.data_mut()[start..start + hw].iter_mut().for_each(|v| *v = g);
        }
    }
    out
}
