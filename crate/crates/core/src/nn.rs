//! Minimal layers with explicit forward caches and backward passes.
//!
//! Convolutions are 3x3 with zero padding 1, lowered to GEMM via im2col.

use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::scalar::{sigmoid, Scalar};
use crate::tensor::Tensor;

const KSIZE: usize = 3;
const KAREA: usize = KSIZE * KSIZE;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Conv2d<S> {
    pub in_channels: usize,
    pub out_channels: usize,
    pub stride: usize,
    /// `out x (in * 9)` row-major.
    pub weight: Vec<S>,
    pub bias: Vec<S>,
}

pub struct ConvCache<S> {
    cols: Vec<S>,
    in_shape: (usize, usize, usize),
    out_hw: (usize, usize),
}

impl<S: Scalar> Conv2d<S> {
    /// He-normal initialization scaled by `gain`.
    pub fn new<R: Rng + ?Sized>(in_channels: usize, out_channels: usize, stride: usize, gain: f64, rng: &mut R) -> Self {
        let fan_in = (in_channels * KAREA) as f64;
        let dist = Normal::new(0.0, gain * (2.0 / fan_in).sqrt()).expect("valid std");
        let weight = (0..out_channels * in_channels * KAREA).map(|_| S::from_f64_lossy(dist.sample(rng))).collect();
        Self { in_channels, out_channels, stride, weight, bias: vec![S::zero(); out_channels] }
    }

    pub fn zeros_like(&self) -> Self {
        Self {
            in_channels: self.in_channels,
            out_channels: self.out_channels,
            stride: self.stride,
            weight: vec![S::zero(); self.weight.len()],
            bias: vec![S::zero(); self.bias.len()],
        }
    }

    fn out_hw(&self, h: usize, w: usize) -> (usize, usize) {
        ((h - 1) / self.stride + 1, (w - 1) / self.stride + 1)
    }

    pub fn forward(&self, x: &Tensor<S>) -> (Tensor<S>, ConvCache<S>) {
        assert_eq!(x.channels(), self.in_channels, "conv input channels");
        let (ho, wo) = self.out_hw(x.height(), x.width());
        let n = ho * wo;
        let k = self.in_channels * KAREA;
        let cols = self.im2col(x, ho, wo);
        let mut out = Vec::with_capacity(self.out_channels * n);
        for &b in &self.bias {
            out.extend(std::iter::repeat_n(b, n));
        }
        S::gemm(self.out_channels, k, n, S::one(), &self.weight, (k as isize, 1), &cols, (n as isize, 1), S::one(), &mut out, (n as isize, 1));
        let y = Tensor::from_vec(self.out_channels, ho, wo, out).expect("conv output shape");
        (y, ConvCache { cols, in_shape: x.shape(), out_hw: (ho, wo) })
    }

    /// Accumulates parameter gradients into `grad` and returns the input gradient.
    pub fn backward(&self, cache: &ConvCache<S>, dy: &Tensor<S>, grad: &mut Self) -> Tensor<S> {
        let (ho, wo) = cache.out_hw;
        let n = ho * wo;
        let k = self.in_channels * KAREA;
        debug_assert_eq!(dy.shape(), (self.out_channels, ho, wo));
        let dyd = dy.data();
        for (o, gb) in grad.bias.iter_mut().enumerate() {
            *gb += dyd[o * n..(o + 1) * n].iter().copied().sum::<S>();
        }
        // dW += dy * cols^T
        S::gemm(self.out_channels, n, k, S::one(), dyd, (n as isize, 1), &cache.cols, (1, n as isize), S::one(), &mut grad.weight, (k as isize, 1));
        // dcols = W^T * dy
        let mut dcols = vec![S::zero(); k * n];
        S::gemm(k, self.out_channels, n, S::one(), &self.weight, (1, k as isize), dyd, (n as isize, 1), S::zero(), &mut dcols, (n as isize, 1));
        self.col2im(&dcols, cache.in_shape, ho, wo)
    }

    fn im2col(&self, x: &Tensor<S>, ho: usize, wo: usize) -> Vec<S> {
        let (c, h, w) = x.shape();
        let n = ho * wo;
        let mut cols = vec![S::zero(); c * KAREA * n];
        let xd = x.data();
        for ci in 0..c {
            let plane = &xd[ci * h * w..(ci + 1) * h * w];
            for ky in 0..KSIZE {
                for kx in 0..KSIZE {
                    let row = &mut cols[((ci * KAREA) + ky * KSIZE + kx) * n..][..n];
                    for oy in 0..ho {
                        let iy = (oy * self.stride + ky) as isize - 1;
                        if iy < 0 || iy >= h as isize {
                            continue;
                        }
                        let src = &plane[iy as usize * w..(iy as usize + 1) * w];
                        let dst = &mut row[oy * wo..(oy + 1) * wo];
                        for (ox, d) in dst.iter_mut().enumerate() {
                            let ix = (ox * self.stride + kx) as isize - 1;
                            if ix >= 0 && ix < w as isize {
                                *d = src[ix as usize];
                            }
                        }
                    }
                }
            }
        }
        cols
    }

    fn col2im(&self, dcols: &[S], in_shape: (usize, usize, usize), ho: usize, wo: usize) -> Tensor<S> {
        let (c, h, w) = in_shape;
        let n = ho * wo;
        let mut dx = Tensor::zeros(c, h, w);
        let dxd = dx.data_mut();
        for ci in 0..c {
            let plane = &mut dxd[ci * h * w..(ci + 1) * h * w];
            for ky in 0..KSIZE {
                for kx in 0..KSIZE {
                    let row = &dcols[((ci * KAREA) + ky * KSIZE + kx) * n..][..n];
                    for oy in 0..ho {
                        let iy = (oy * self.stride + ky) as isize - 1;
                        if iy < 0 || iy >= h as isize {
                            continue;
                        }
                        let dst = &mut plane[iy as usize * w..(iy as usize + 1) * w];
                        for (ox, &g) in row[oy * wo..(oy + 1) * wo].iter().enumerate() {
                            let ix = (ox * self.stride + kx) as isize - 1;
                            if ix >= 0 && ix < w as isize {
                                dst[ix as usize] += g;
                            }
                        }
                    }
                }
            }
        }
        dx
    }
}

/// Fully connected layer on vectors.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Linear<S> {
    pub in_features: usize,
    pub out_features: usize,
    /// `out x in` row-major.
    pub weight: Vec<S>,
    pub bias: Vec<S>,
}

impl<S: Scalar> Linear<S> {
    pub fn new<R: Rng + ?Sized>(in_features: usize, out_features: usize, gain: f64, rng: &mut R) -> Self {
        let dist = Normal::new(0.0, gain / (in_features as f64).sqrt()).expect("valid std");
        let weight = (0..in_features * out_features).map(|_| S::from_f64_lossy(dist.sample(rng))).collect();
        Self { in_features, out_features, weight, bias: vec![S::zero(); out_features] }
    }

    pub fn zeros_like(&self) -> Self {
        Self {
            in_features: self.in_features,
            out_features: self.out_features,
            weight: vec![S::zero(); self.weight.len()],
            bias: vec![S::zero(); self.bias.len()],
        }
    }

    pub fn forward(&self, x: &[S]) -> Vec<S> {
        debug_assert_eq!(x.len(), self.in_features);
        self.weight
            .chunks_exact(self.in_features)
            .zip(&self.bias)
            .map(|(row, &b)| b + row.iter().zip(x).map(|(&w, &v)| w * v).sum::<S>())
            .collect()
    }

    pub fn backward(&self, x: &[S], dy: &[S], grad: &mut Self) -> Vec<S> {
        let mut dx = vec![S::zero(); self.in_features];
        for (o, &g) in dy.iter().enumerate() {
            grad.bias[o] += g;
            let row = &self.weight[o * self.in_features..(o + 1) * self.in_features];
            let grow = &mut grad.weight[o * self.in_features..(o + 1) * self.in_features];
            for i in 0..self.in_features {
                grow[i] += g * x[i];
                dx[i] += g * row[i];
            }
        }
        dx
    }
}

#[inline]
pub fn silu<S: Scalar>(x: S) -> S {
    x * sigmoid(x)
}

#[inline]
pub fn silu_grad<S: Scalar>(x: S) -> S {
    let s = sigmoid(x);
    s * (S::one() + x * (S::one() - s))
}

pub fn silu_tensor<S: Scalar>(x: &Tensor<S>) -> Tensor<S> {
    x.map(silu)
}

/// `dL/dx` given the pre-activation `x` and `dL/dy`.
pub fn silu_backward<S: Scalar>(x: &Tensor<S>, dy: &Tensor<S>) -> Tensor<S> {
    x.zip_map(dy, |a, g| g * silu_grad(a))
}

/// Adds a per-channel bias vector in place.
pub fn add_channel_bias<S: Scalar>(x: &mut Tensor<S>, bias: &[S]) {
    let n = x.plane_len();
    for (plane, &b) in x.data_mut().chunks_exact_mut(n).zip(bias) {
        for v in plane {
            *v += b;
        }
    }
}

/// Per-channel sums, the gradient of [`add_channel_bias`] w.r.t. the bias.
pub fn channel_sums<S: Scalar>(x: &Tensor<S>) -> Vec<S> {
    x.data().chunks_exact(x.plane_len()).map(|p| p.iter().copied().sum()).collect()
}

pub fn upsample_nearest2<S: Scalar>(x: &Tensor<S>) -> Tensor<S> {
    let (c, h, w) = x.shape();
    let mut y = Tensor::zeros(c, h * 2, w * 2);
    for ci in 0..c {
        for yy in 0..h * 2 {
            for xx in 0..w * 2 {
                *y.at_mut(ci, yy, xx) = x.at(ci, yy / 2, xx / 2);
            }
        }
    }
    y
}

pub fn upsample_nearest2_backward<S: Scalar>(dy: &Tensor<S>) -> Tensor<S> {
    let (c, h2, w2) = dy.shape();
    let mut dx = Tensor::zeros(c, h2 / 2, w2 / 2);
    for ci in 0..c {
        for yy in 0..h2 {
            for xx in 0..w2 {
                *dx.at_mut(ci, yy / 2, xx / 2) += dy.at(ci, yy, xx);
            }
        }
    }
    dx
}
