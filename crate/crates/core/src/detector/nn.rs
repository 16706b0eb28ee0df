//! Convolution and dense layers with explicit backward passes. Tensors are
//! flat `f32` buffers in channel-major (CHW) order; matrix products go
//! through ndarray.

use ndarray::{Array2, ArrayView2};
use rand::Rng;
use rand_distr::{Distribution, Normal};

use super::params::{ParamId, ParamSet};

fn normal_init(rng: &mut impl Rng, n: usize, std: f32) -> Vec<f32> {
    let dist = Normal::new(0.0f32, std).expect("finite std");
    (0..n).map(|_| dist.sample(rng)).collect()
}

#[derive(Debug, Clone)]
pub struct Conv2d {
    pub weight: ParamId,
    pub bias: ParamId,
    pub cin: usize,
    pub cout: usize,
    pub k: usize,
    pub stride: usize,
    pub pad: usize,
}

/// Values kept from a forward pass for the backward pass.
#[derive(Debug, Clone)]
pub struct ConvCache {
    cols: Array2<f32>,
    in_h: usize,
    in_w: usize,
    out_h: usize,
    out_w: usize,
}

impl Conv2d {
    /// He-normal weights, or `N(0, init_std)` when `init_std` is given.
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        params: &mut ParamSet,
        name: &str,
        cin: usize,
        cout: usize,
        k: usize,
        stride: usize,
        pad: usize,
        init_std: Option<f32>,
        rng: &mut impl Rng,
    ) -> Self {
        let fan_in = cin * k * k;
        let std = init_std.unwrap_or_else(|| (2.0 / fan_in as f32).sqrt());
        let weight = params.push(format!("{name}.weight"), vec![cout, cin, k, k], normal_init(rng, cout * fan_in, std));
        let bias = params.push(format!("{name}.bias"), vec![cout], vec![0.0; cout]);
        Self { weight, bias, cin, cout, k, stride, pad }
    }

    pub fn out_size(&self, h: usize, w: usize) -> (usize, usize) {
        (
            (h + 2 * self.pad - self.k) / self.stride + 1,
            (w + 2 * self.pad - self.k) / self.stride + 1,
        )
    }

    fn im2col(&self, x: &[f32], h: usize, w: usize) -> (Array2<f32>, usize, usize) {
        let (oh, ow) = self.out_size(h, w);
        let kk = self.k * self.k;
        let mut cols = Array2::<f32>::zeros((self.cin * kk, oh * ow));
        let slice = cols.as_slice_mut().expect("standard layout");
        let ncol = oh * ow;
        for c in 0..self.cin {
            let plane = &x[c * h * w..(c + 1) * h * w];
            for ky in 0..self.k {
                for kx in 0..self.k {
                    let row = (c * kk + ky * self.k + kx) * ncol;
                    for oy in 0..oh {
                        let iy = (oy * self.stride + ky) as isize - self.pad as isize;
                        if iy < 0 || iy >= h as isize {
                            continue;
                        }
                        let src = &plane[iy as usize * w..(iy as usize + 1) * w];
                        let dst = &mut slice[row + oy * ow..row + (oy + 1) * ow];
                        for (ox, d) in dst.iter_mut().enumerate() {
                            let ix = (ox * self.stride + kx) as isize - self.pad as isize;
                            if ix >= 0 && ix < w as isize {
                                *d = src[ix as usize];
                            }
                        }
                    }
                }
            }
        }
        (cols, oh, ow)
    }

    fn col2im(&self, dcols: ArrayView2<f32>, h: usize, w: usize, oh: usize, ow: usize) -> Vec<f32> {
        let kk = self.k * self.k;
        let mut dx = vec![0.0f32; self.cin * h * w];
        for c in 0..self.cin {
            for ky in 0..self.k {
                for kx in 0..self.k {
                    let row = dcols.row(c * kk + ky * self.k + kx);
                    for oy in 0..oh {
                        let iy = (oy * self.stride + ky) as isize - self.pad as isize;
                        if iy < 0 || iy >= h as isize {
                            continue;
                        }
                        let base = c * h * w + iy as usize * w;
                        for ox in 0..ow {
                            let ix = (ox * self.stride + kx) as isize - self.pad as isize;
                            if ix >= 0 && ix < w as isize {
                                dx[base + ix as usize] += row[oy * ow + ox];
                            }
                        }
                    }
                }
            }
        }
        dx
    }

    pub fn forward(&self, params: &ParamSet, x: &[f32], h: usize, w: usize) -> (Vec<f32>, ConvCache) {
        debug_assert_eq!(x.len(), self.cin * h * w);
        let (cols, oh, ow) = self.im2col(x, h, w);
        let wmat = ArrayView2::from_shape((self.cout, self.cin * self.k * self.k), params.get(self.weight))
            .expect("weight shape");
        let mut out = wmat.dot(&cols);
        let bias = params.get(self.bias);
        for (mut row, &b) in out.rows_mut().into_iter().zip(bias) {
            row += b;
        }
        let out = out.into_raw_vec_and_offset().0;
        (out, ConvCache { cols, in_h: h, in_w: w, out_h: oh, out_w: ow })
    }

    /// Accumulates parameter gradients into `grads`; returns the input
    /// gradient when `need_dx`.
    pub fn backward(
        &self,
        params: &ParamSet,
        cache: &ConvCache,
        dout: &[f32],
        grads: &mut ParamSet,
        need_dx: bool,
    ) -> Option<Vec<f32>> {
        let n = cache.out_h * cache.out_w;
        let dmat = ArrayView2::from_shape((self.cout, n), dout).expect("dout shape");
        let dw = dmat.dot(&cache.cols.t());
        for (g, v) in grads.get_mut(self.weight).iter_mut().zip(dw.iter()) {
            *g += *v;
        }
        for (g, row) in grads.get_mut(self.bias).iter_mut().zip(dmat.rows()) {
            *g += row.sum();
        }
        if !need_dx {
            return None;
        }
        let wmat = ArrayView2::from_shape((self.cout, self.cin * self.k * self.k), params.get(self.weight))
            .expect("weight shape");
        let dcols = wmat.t().dot(&dmat);
        Some(self.col2im(dcols.view(), cache.in_h, cache.in_w, cache.out_h, cache.out_w))
    }
}

#[derive(Debug, Clone)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: ParamId,
    pub fan_in: usize,
    pub fan_out: usize,
}

impl Linear {
    pub fn new(
        params: &mut ParamSet,
        name: &str,
        fan_in: usize,
        fan_out: usize,
        init_std: Option<f32>,
        rng: &mut impl Rng,
    ) -> Self {
        let std = init_std.unwrap_or_else(|| (2.0 / fan_in as f32).sqrt());
        let weight = params.push(format!("{name}.weight"), vec![fan_out, fan_in], normal_init(rng, fan_in * fan_out, std));
        let bias = params.push(format!("{name}.bias"), vec![fan_out], vec![0.0; fan_out]);
        Self { weight, bias, fan_in, fan_out }
    }

    fn wmat<'a>(&self, params: &'a ParamSet) -> ArrayView2<'a, f32> {
        ArrayView2::from_shape((self.fan_out, self.fan_in), params.get(self.weight)).expect("weight shape")
    }

    /// `x` is `rows × fan_in`; returns `rows × fan_out`.
    pub fn forward(&self, params: &ParamSet, x: ArrayView2<f32>) -> Array2<f32> {
        let mut y = x.dot(&self.wmat(params).t());
        let b = ArrayView2::from_shape((1, self.fan_out), params.get(self.bias)).expect("bias shape");
        y += &b;
        y
    }

    pub fn backward(
        &self,
        params: &ParamSet,
        x: ArrayView2<f32>,
        dy: ArrayView2<f32>,
        grads: &mut ParamSet,
    ) -> Array2<f32> {
        let dw = dy.t().dot(&x);
        for (g, v) in grads.get_mut(self.weight).iter_mut().zip(dw.iter()) {
            *g += *v;
        }
        for (g, col) in grads.get_mut(self.bias).iter_mut().zip(dy.columns()) {
            *g += col.sum();
        }
        dy.dot(&self.wmat(params))
    }
}

pub fn relu_inplace(x: &mut [f32]) {
    x.iter_mut().for_each(|v| *v = v.max(0.0));
}

/// Zeroes `grad` where the ReLU output was not positive.
pub fn relu_backward(out: &[f32], grad: &mut [f32]) {
    for (g, &o) in grad.iter_mut().zip(out) {
        if o <= 0.0 {
            *g = 0.0;
        }
    }
}

/// Row-wise softmax in f64.
pub fn softmax_rows(logits: ArrayView2<f32>) -> Array2<f64> {
    let mut out = logits.mapv(|v| v as f64);
    for mut row in out.rows_mut() {
        let max = row.fold(f64::NEG_INFINITY, |a, &b| a.max(b));
        row.mapv_inplace(|v| (v - max).exp());
        let s = row.sum();
        row /= s;
    }
    out
}

#[inline]
pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}
