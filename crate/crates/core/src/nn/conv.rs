use alloc::vec;
use alloc::vec::Vec;

use rand::Rng;

use super::{sample_normal, Param};
use crate::error::{bail, Result};
use crate::gemm;
use crate::tensor::Tensor;

/// Bias-free 2-D convolution, weight layout `out x in x k x k`.
#[derive(Debug, Clone)]
pub struct Conv2d {
    pub weight: Param,
    pub out_channels: usize,
    pub in_channels: usize,
    pub kernel: usize,
    pub stride: usize,
    pub padding: usize,
    cache: Option<Tensor>,
}

impl PartialEq for Conv2d {
    fn eq(&self, other: &Self) -> bool {
        self.weight.value == other.weight.value
            && self.out_channels == other.out_channels
            && self.in_channels == other.in_channels
            && self.kernel == other.kernel
            && self.stride == other.stride
            && self.padding == other.padding
    }
}

impl Conv2d {
    pub fn zeros(in_channels: usize, out_channels: usize, kernel: usize, stride: usize, padding: usize) -> Self {
        Conv2d {
            weight: Param::new(vec![0.0; out_channels * in_channels * kernel * kernel]),
            out_channels,
            in_channels,
            kernel,
            stride,
            padding,
            cache: None,
        }
    }

    /// Kaiming-normal initialisation in fan-out mode.
    pub fn kaiming<R: Rng + ?Sized>(
        rng: &mut R,
        in_channels: usize,
        out_channels: usize,
        kernel: usize,
        stride: usize,
        padding: usize,
    ) -> Self {
        let mut conv = Self::zeros(in_channels, out_channels, kernel, stride, padding);
        let std = libm::sqrtf(2.0 / (out_channels * kernel * kernel) as f32);
        for w in conv.weight.value.iter_mut() {
            *w = sample_normal(rng, std);
        }
        conv
    }

    pub fn weight_shape(&self) -> [usize; 4] {
        [self.out_channels, self.in_channels, self.kernel, self.kernel]
    }

    /// Length of one output-channel filter (`in x k x k`).
    #[inline]
    pub fn filter_len(&self) -> usize {
        self.in_channels * self.kernel * self.kernel
    }

    pub fn output_hw(&self, h: usize, w: usize) -> (usize, usize) {
        (
            (h + 2 * self.padding - self.kernel) / self.stride + 1,
            (w + 2 * self.padding - self.kernel) / self.stride + 1,
        )
    }

    fn is_pointwise(&self) -> bool {
        self.kernel == 1 && self.stride == 1 && self.padding == 0
    }

    fn check_input(&self, x: &Tensor) -> Result<()> {
        let [_, c, h, w] = x.shape();
        if c != self.in_channels {
            bail!(Structural, "convolution expects {} input channels, got {}", self.in_channels, c);
        }
        if h + 2 * self.padding < self.kernel || w + 2 * self.padding < self.kernel {
            bail!(Input, "spatial size {}x{} too small for kernel {}", h, w, self.kernel);
        }
        Ok(())
    }

    fn im2col(&self, sample: &[f32], h: usize, w: usize, col: &mut [f32]) {
        let (oh, ow) = self.output_hw(h, w);
        let k = self.kernel;
        let (s, p) = (self.stride as isize, self.padding as isize);
        for c in 0..self.in_channels {
            let plane = &sample[c * h * w..(c + 1) * h * w];
            for ky in 0..k {
                for kx in 0..k {
                    let row = ((c * k + ky) * k + kx) * oh * ow;
                    for oy in 0..oh {
                        let iy = oy as isize * s + ky as isize - p;
                        let dst = &mut col[row + oy * ow..row + (oy + 1) * ow];
                        if iy < 0 || iy >= h as isize {
                            dst.iter_mut().for_each(|v| *v = 0.0);
                            continue;
                        }
                        let src = &plane[iy as usize * w..(iy as usize + 1) * w];
                        for (ox, d) in dst.iter_mut().enumerate() {
                            let ix = ox as isize * s + kx as isize - p;
                            *d = if ix < 0 || ix >= w as isize { 0.0 } else { src[ix as usize] };
                        }
                    }
                }
            }
        }
    }

    fn col2im_acc(&self, col: &[f32], h: usize, w: usize, out: &mut [f32]) {
        let (oh, ow) = self.output_hw(h, w);
        let k = self.kernel;
        let (s, p) = (self.stride as isize, self.padding as isize);
        for c in 0..self.in_channels {
            let plane = &mut out[c * h * w..(c + 1) * h * w];
            for ky in 0..k {
                for kx in 0..k {
                    let row = ((c * k + ky) * k + kx) * oh * ow;
                    for oy in 0..oh {
                        let iy = oy as isize * s + ky as isize - p;
                        if iy < 0 || iy >= h as isize {
                            continue;
                        }
                        let src = &col[row + oy * ow..row + (oy + 1) * ow];
                        let dst = &mut plane[iy as usize * w..(iy as usize + 1) * w];
                        for (ox, v) in src.iter().enumerate() {
                            let ix = ox as isize * s + kx as isize - p;
                            if ix >= 0 && ix < w as isize {
                                dst[ix as usize] += *v;
                            }
                        }
                    }
                }
            }
        }
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        self.check_input(x)?;
        let [n, _, h, w] = x.shape();
        let (oh, ow) = self.output_hw(h, w);
        let mut out = Tensor::zeros([n, self.out_channels, oh, ow]);
        let kk = self.filter_len();
        let mut col = if self.is_pointwise() { Vec::new() } else { vec![0.0; kk * oh * ow] };
        for i in 0..n {
            let rhs: &[f32] = if self.is_pointwise() {
                x.sample(i)
            } else {
                self.im2col(x.sample(i), h, w, &mut col);
                &col
            };
            gemm::matmul(self.out_channels, kk, oh * ow, &self.weight.value, rhs, out.sample_mut(i), 0.0);
        }
        Ok(out)
    }

    pub fn forward_train(&mut self, x: &Tensor) -> Result<Tensor> {
        let out = self.forward(x)?;
        self.cache = Some(x.clone());
        Ok(out)
    }

    /// Accumulates the weight gradient; returns the input gradient when requested.
    pub fn backward(&mut self, grad_out: &Tensor, need_input_grad: bool) -> Result<Option<Tensor>> {
        let Some(x) = self.cache.take() else {
            bail!(State, "convolution backward called without a cached forward pass");
        };
        let [n, _, h, w] = x.shape();
        let (oh, ow) = self.output_hw(h, w);
        let kk = self.filter_len();
        let pointwise = self.is_pointwise();
        let mut col = if pointwise { Vec::new() } else { vec![0.0; kk * oh * ow] };
        let mut dcol = vec![0.0; kk * oh * ow];
        let mut grad_in = if need_input_grad { Some(Tensor::zeros(x.shape())) } else { None };
        let out_channels = self.out_channels;
        let weight = self.weight.value.clone();
        self.weight.grad_mut();
        let mut dw = core::mem::take(&mut self.weight.grad);
        for i in 0..n {
            let dy = grad_out.sample(i);
            let rhs: &[f32] = if pointwise {
                x.sample(i)
            } else {
                self.im2col(x.sample(i), h, w, &mut col);
                &col
            };
            gemm::matmul_bt_acc(out_channels, oh * ow, kk, dy, rhs, &mut dw);
            if let Some(gi) = grad_in.as_mut() {
                gemm::matmul_at(kk, out_channels, oh * ow, &weight, dy, &mut dcol);
                if pointwise {
                    gi.sample_mut(i).copy_from_slice(&dcol);
                } else {
                    self.col2im_acc(&dcol, h, w, gi.sample_mut(i));
                }
            }
        }
        self.weight.grad = dw;
        Ok(grad_in)
    }

    pub fn clear_cache(&mut self) {
        self.cache = None;
    }

    /// Keeps only the listed output channels.
    pub fn select_outputs(&self, keep: &[usize]) -> Conv2d {
        let len = self.filter_len();
        let mut weight = Vec::with_capacity(keep.len() * len);
        for &o in keep {
            weight.extend_from_slice(&self.weight.value[o * len..(o + 1) * len]);
        }
        Conv2d {
            weight: Param::new(weight),
            out_channels: keep.len(),
            cache: None,
            ..*self
        }
    }

    /// Keeps only the listed input channels.
    pub fn select_inputs(&self, keep: &[usize]) -> Conv2d {
        let kk = self.kernel * self.kernel;
        let mut weight = Vec::with_capacity(self.out_channels * keep.len() * kk);
        for o in 0..self.out_channels {
            for &c in keep {
                let start = (o * self.in_channels + c) * kk;
                weight.extend_from_slice(&self.weight.value[start..start + kk]);
            }
        }
        Conv2d {
            weight: Param::new(weight),
            in_channels: keep.len(),
            cache: None,
            ..*self
        }
    }
}
