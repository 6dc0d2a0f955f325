//! Layer primitives with explicit backward passes.
//!
//! Batched reductions run over fixed-size epoch chunks summed in chunk order,
//! so results do not depend on the rayon pool size.

use std::ops::AddAssign;

use ndarray::linalg::general_mat_mul;
use ndarray::{Array2, ArrayView2, ArrayViewMut2};
use rayon::prelude::*;
use realfft::num_complex::Complex64;
use serde::{Deserialize, Serialize};

use crate::dsp::{irfft, next_fast_len, rfft_padded};

/// Epochs per reduction chunk.
const REDUCE_CHUNK: usize = 8;
/// Kernels at least this long convolve through the FFT.
pub const FFT_KERNEL_MIN: usize = 32;

/// Sum of per-item contributions, accumulated chunk by chunk in item order.
fn chunked_sum<T, F>(items: usize, len: usize, f: F) -> Vec<T>
where
    T: Copy + Default + AddAssign + Send,
    F: Fn(usize, &mut [T]) + Sync,
{
    let starts: Vec<usize> = (0..items).step_by(REDUCE_CHUNK).collect();
    let parts: Vec<Vec<T>> = starts
        .par_iter()
        .map(|&s| {
            let mut acc = vec![T::default(); len];
            for e in s..(s + REDUCE_CHUNK).min(items) {
                f(e, &mut acc);
            }
            acc
        })
        .collect();
    let mut total = vec![T::default(); len];
    for part in parts {
        for (t, p) in total.iter_mut().zip(part) {
            *t += p;
        }
    }
    total
}

/// Dot product with four interleaved accumulators (vectorises; fixed order).
fn dot(a: &[f64], b: &[f64]) -> f64 {
    let n = a.len().min(b.len());
    let (a, b) = (&a[..n], &b[..n]);
    let mut acc = [0.0; 4];
    let mut ca = a.chunks_exact(4);
    let mut cb = b.chunks_exact(4);
    for (x, y) in (&mut ca).zip(&mut cb) {
        for i in 0..4 {
            acc[i] += x[i] * y[i];
        }
    }
    let tail: f64 = ca.remainder().iter().zip(cb.remainder()).map(|(x, y)| x * y).sum();
    (acc[0] + acc[1]) + (acc[2] + acc[3]) + tail
}

fn sum(a: &[f64]) -> f64 {
    let mut acc = [0.0; 4];
    let mut chunks = a.chunks_exact(4);
    for x in &mut chunks {
        for i in 0..4 {
            acc[i] += x[i];
        }
    }
    (acc[0] + acc[1]) + (acc[2] + acc[3]) + chunks.remainder().iter().sum::<f64>()
}

fn centered_sq(a: &[f64], m: f64) -> f64 {
    let mut acc = [0.0; 4];
    let mut chunks = a.chunks_exact(4);
    for x in &mut chunks {
        for i in 0..4 {
            acc[i] += (x[i] - m) * (x[i] - m);
        }
    }
    (acc[0] + acc[1]) + (acc[2] + acc[3]) + chunks.remainder().iter().map(|v| (v - m) * (v - m)).sum::<f64>()
}

/// Batch of `n` items, each `c` channels of `t` samples, item-major.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor3 {
    pub n: usize,
    pub c: usize,
    pub t: usize,
    pub data: Vec<f64>,
}

impl Tensor3 {
    pub fn zeros(n: usize, c: usize, t: usize) -> Self {
        Tensor3 { n, c, t, data: vec![0.0; n * c * t] }
    }

    pub fn from_vec(n: usize, c: usize, t: usize, data: Vec<f64>) -> Self {
        assert_eq!(data.len(), n * c * t, "tensor length");
        Tensor3 { n, c, t, data }
    }

    pub fn item(&self, e: usize) -> &[f64] {
        let s = self.c * self.t;
        &self.data[e * s..(e + 1) * s]
    }

    pub fn row(&self, e: usize, c: usize) -> &[f64] {
        let start = (e * self.c + c) * self.t;
        &self.data[start..start + self.t]
    }
}

/// Row-major dense matrix product helper: `out[r] += a[r, :] · x` for a
/// matrix `a` with `cols` columns.
fn gemv_add(a: &[f64], cols: usize, x: &[f64], out: &mut [f64]) {
    for (o, row) in out.iter_mut().zip(a.chunks_exact(cols)) {
        *o += dot(row, x);
    }
}

/// `out += aᵀ · d` for a matrix `a` with `cols` columns.
fn gemv_t_add(a: &[f64], cols: usize, d: &[f64], out: &mut [f64]) {
    for (row, &dv) in a.chunks_exact(cols).zip(d) {
        if dv != 0.0 {
            for (o, w) in out.iter_mut().zip(row) {
                *o += w * dv;
            }
        }
    }
}

/// `g += d ⊗ x`.
fn outer_add(g: &mut [f64], d: &[f64], x: &[f64]) {
    let cols = x.len();
    for (row, &dv) in g.chunks_exact_mut(cols).zip(d) {
        if dv != 0.0 {
            for (gv, xv) in row.iter_mut().zip(x) {
                *gv += dv * xv;
            }
        }
    }
}

/// Stride-1 convolution with zero "same" padding and an odd kernel.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Conv1d {
    pub in_channels: usize,
    pub out_channels: usize,
    pub kernel: usize,
    /// out × in × kernel.
    pub weight: Vec<f64>,
    pub bias: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ConvGrads {
    pub weight: Vec<f64>,
    pub bias: Vec<f64>,
}

impl Conv1d {
    pub fn zeros(in_channels: usize, out_channels: usize, kernel: usize) -> Self {
        assert!(kernel % 2 == 1, "kernel must be odd");
        Conv1d { in_channels, out_channels, kernel, weight: vec![0.0; out_channels * in_channels * kernel], bias: vec![0.0; out_channels] }
    }

    fn pad(&self) -> usize {
        (self.kernel - 1) / 2
    }

    fn w(&self, o: usize, c: usize) -> &[f64] {
        let s = (o * self.in_channels + c) * self.kernel;
        &self.weight[s..s + self.kernel]
    }

    /// Valid output range for tap `k`: `t` with `0 <= t + k - pad < len`.
    fn tap_range(&self, k: usize, len: usize) -> (usize, usize, isize) {
        let shift = k as isize - self.pad() as isize;
        let lo = (-shift).max(0) as usize;
        let hi = (len as isize - shift).clamp(0, len as isize) as usize;
        (lo, hi.max(lo), shift)
    }

    pub fn forward(&self, x: &Tensor3) -> Tensor3 {
        if self.kernel >= FFT_KERNEL_MIN {
            self.forward_fft(x)
        } else {
            self.forward_direct(x)
        }
    }

    /// Column matrix `(c·kernel) × t` of shifted input rows for item `e`.
    fn im2col(&self, x: &Tensor3, e: usize) -> Array2<f64> {
        let t = x.t;
        let mut cols = Array2::zeros((self.in_channels * self.kernel, t));
        for c in 0..self.in_channels {
            let xs = x.row(e, c);
            for k in 0..self.kernel {
                let (lo, hi, shift) = self.tap_range(k, t);
                let mut row = cols.row_mut(c * self.kernel + k);
                let dst = row.as_slice_mut().expect("standard layout");
                dst[lo..hi].copy_from_slice(&xs[(lo as isize + shift) as usize..(hi as isize + shift) as usize]);
            }
        }
        cols
    }

    fn weight_matrix(&self) -> ArrayView2<'_, f64> {
        ArrayView2::from_shape((self.out_channels, self.in_channels * self.kernel), &self.weight).expect("weight shape")
    }

    pub fn forward_direct(&self, x: &Tensor3) -> Tensor3 {
        assert_eq!(x.c, self.in_channels, "conv input channels");
        let t = x.t;
        let w = self.weight_matrix();
        let mut out = Tensor3::zeros(x.n, self.out_channels, t);
        out.data.par_chunks_mut(self.out_channels * t).enumerate().for_each(|(e, item)| {
            for (o, row) in item.chunks_exact_mut(t).enumerate() {
                row.fill(self.bias[o]);
            }
            let mut z = ArrayViewMut2::from_shape((self.out_channels, t), item).expect("output shape");
            general_mat_mul(1.0, &w, &self.im2col(x, e), 1.0, &mut z);
        });
        out
    }

    pub fn forward_fft(&self, x: &Tensor3) -> Tensor3 {
        assert_eq!(x.c, self.in_channels, "conv input channels");
        let t = x.t;
        let k = self.kernel;
        let nfft = next_fast_len(t + k - 1);
        let offset = k - 1 - self.pad();
        let kernels: Vec<Vec<Complex64>> = (0..self.out_channels * self.in_channels)
            .map(|i| {
                let mut rev = self.w(i / self.in_channels, i % self.in_channels).to_vec();
                rev.reverse();
                rfft_padded(&rev, nfft)
            })
            .collect();
        let mut out = Tensor3::zeros(x.n, self.out_channels, t);
        out.data.par_chunks_mut(self.out_channels * t).enumerate().for_each(|(e, item)| {
            let spectra: Vec<Vec<Complex64>> = (0..self.in_channels).map(|c| rfft_padded(x.row(e, c), nfft)).collect();
            let bins = nfft / 2 + 1;
            for (o, row) in item.chunks_exact_mut(t).enumerate() {
                let mut acc = vec![Complex64::new(0.0, 0.0); bins];
                for (c, xs) in spectra.iter().enumerate() {
                    for ((a, xv), wv) in acc.iter_mut().zip(xs).zip(&kernels[o * self.in_channels + c]) {
                        *a += xv * wv;
                    }
                }
                let full = irfft(&acc, nfft);
                for (r, v) in row.iter_mut().zip(&full[offset..offset + t]) {
                    *r = self.bias[o] + v;
                }
            }
        });
        out
    }

    /// Parameter gradients and, when asked, the input gradient.
    pub fn backward(&self, x: &Tensor3, dout: &Tensor3, input_grad: bool) -> (ConvGrads, Option<Tensor3>) {
        if self.kernel >= FFT_KERNEL_MIN {
            self.backward_fft(x, dout, input_grad)
        } else {
            self.backward_direct(x, dout, input_grad)
        }
    }

    fn bias_grad(&self, dout: &Tensor3) -> Vec<f64> {
        chunked_sum(dout.n, self.out_channels, |e, acc: &mut [f64]| {
            for (o, a) in acc.iter_mut().enumerate() {
                *a += sum(dout.row(e, o));
            }
        })
    }

    pub fn backward_direct(&self, x: &Tensor3, dout: &Tensor3, input_grad: bool) -> (ConvGrads, Option<Tensor3>) {
        let t = x.t;
        let shape = (self.out_channels, self.in_channels * self.kernel);
        let weight = chunked_sum(x.n, self.weight.len(), |e, acc: &mut [f64]| {
            let d = ArrayView2::from_shape((self.out_channels, t), dout.item(e)).expect("grad shape");
            let mut g = ArrayViewMut2::from_shape(shape, acc).expect("weight shape");
            general_mat_mul(1.0, &d, &self.im2col(x, e).t(), 1.0, &mut g);
        });
        let grads = ConvGrads { weight, bias: self.bias_grad(dout) };
        if !input_grad {
            return (grads, None);
        }
        let w = self.weight_matrix();
        let mut dx = Tensor3::zeros(x.n, self.in_channels, t);
        dx.data.par_chunks_mut(self.in_channels * t).enumerate().for_each(|(e, item)| {
            let d = ArrayView2::from_shape((self.out_channels, t), dout.item(e)).expect("grad shape");
            let dcols = w.t().dot(&d);
            for (c, row) in item.chunks_exact_mut(t).enumerate() {
                for k in 0..self.kernel {
                    let (lo, hi, shift) = self.tap_range(k, t);
                    let src = dcols.row(c * self.kernel + k);
                    let src = src.as_slice().expect("standard layout");
                    let dst = &mut row[(lo as isize + shift) as usize..(hi as isize + shift) as usize];
                    for (r, v) in dst.iter_mut().zip(&src[lo..hi]) {
                        *r += v;
                    }
                }
            }
        });
        (grads, Some(dx))
    }

    pub fn backward_fft(&self, x: &Tensor3, dout: &Tensor3, input_grad: bool) -> (ConvGrads, Option<Tensor3>) {
        let t = x.t;
        let k = self.kernel;
        let p = self.pad();
        let nfft = next_fast_len(t + k);
        let bins = nfft / 2 + 1;
        let pairs = self.out_channels * self.in_channels;
        let cross = chunked_sum(x.n, pairs * bins, |e, acc: &mut [Complex64]| {
            let xs: Vec<Vec<Complex64>> = (0..self.in_channels).map(|c| rfft_padded(x.row(e, c), nfft)).collect();
            for o in 0..self.out_channels {
                let d = rfft_padded(dout.row(e, o), nfft);
                for (c, xc) in xs.iter().enumerate() {
                    let slot = &mut acc[(o * self.in_channels + c) * bins..][..bins];
                    for ((a, dv), xv) in slot.iter_mut().zip(&d).zip(xc) {
                        *a += dv.conj() * xv;
                    }
                }
            }
        });
        let mut weight = vec![0.0; self.weight.len()];
        for (pair, spec) in cross.chunks_exact(bins).enumerate() {
            let corr = irfft(spec, nfft);
            for kk in 0..k {
                let lag = (kk as isize - p as isize).rem_euclid(nfft as isize) as usize;
                weight[pair * k + kk] = corr[lag];
            }
        }
        let grads = ConvGrads { weight, bias: self.bias_grad(dout) };
        if !input_grad {
            return (grads, None);
        }
        let kernels: Vec<Vec<Complex64>> = (0..pairs).map(|i| rfft_padded(self.w(i / self.in_channels, i % self.in_channels), nfft)).collect();
        let mut dx = Tensor3::zeros(x.n, self.in_channels, t);
        dx.data.par_chunks_mut(self.in_channels * t).enumerate().for_each(|(e, item)| {
            let ds: Vec<Vec<Complex64>> = (0..self.out_channels).map(|o| rfft_padded(dout.row(e, o), nfft)).collect();
            for (c, row) in item.chunks_exact_mut(t).enumerate() {
                let mut acc = vec![Complex64::new(0.0, 0.0); bins];
                for (o, d) in ds.iter().enumerate() {
                    for ((a, dv), wv) in acc.iter_mut().zip(d).zip(&kernels[o * self.in_channels + c]) {
                        *a += dv * wv;
                    }
                }
                let full = irfft(&acc, nfft);
                row.copy_from_slice(&full[p..p + t]);
            }
        });
        (grads, Some(dx))
    }
}

/// Per-channel normalisation over the (item × time) axes.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BatchNorm {
    pub gamma: Vec<f64>,
    pub beta: Vec<f64>,
    pub running_mean: Vec<f64>,
    pub running_var: Vec<f64>,
    /// False until batch statistics have been folded into the running ones.
    pub has_running_stats: bool,
    pub momentum: f64,
    pub eps: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct BnCache {
    pub xhat: Tensor3,
    pub mean: Vec<f64>,
    pub var: Vec<f64>,
    pub inv_std: Vec<f64>,
}

impl BatchNorm {
    pub fn new(channels: usize) -> Self {
        BatchNorm {
            gamma: vec![1.0; channels],
            beta: vec![0.0; channels],
            running_mean: vec![0.0; channels],
            running_var: vec![1.0; channels],
            has_running_stats: false,
            momentum: 0.1,
            eps: 1e-5,
        }
    }

    pub fn channels(&self) -> usize {
        self.gamma.len()
    }

    fn affine(&self, x: &Tensor3, mean: &[f64], inv_std: &[f64]) -> (Tensor3, Tensor3) {
        let mut xhat = Tensor3::zeros(x.n, x.c, x.t);
        let mut y = Tensor3::zeros(x.n, x.c, x.t);
        let t = x.t;
        xhat.data
            .par_chunks_mut(t)
            .zip(y.data.par_chunks_mut(t))
            .zip(x.data.par_chunks(t))
            .enumerate()
            .for_each(|(r, ((h, yv), xv))| {
                let c = r % x.c;
                for ((hv, yy), &v) in h.iter_mut().zip(yv.iter_mut()).zip(xv) {
                    *hv = (v - mean[c]) * inv_std[c];
                    *yy = self.gamma[c] * *hv + self.beta[c];
                }
            });
        (y, xhat)
    }

    /// Normalise with the batch's own statistics.
    pub fn forward_train(&self, x: &Tensor3) -> (Tensor3, BnCache) {
        assert_eq!(x.c, self.channels(), "batch-norm channels");
        let count = (x.n * x.t) as f64;
        let sums = chunked_sum(x.n, x.c, |e, acc: &mut [f64]| {
            for (c, a) in acc.iter_mut().enumerate() {
                *a += sum(x.row(e, c));
            }
        });
        let mean: Vec<f64> = sums.iter().map(|s| s / count).collect();
        let sq = chunked_sum(x.n, x.c, |e, acc: &mut [f64]| {
            for (c, a) in acc.iter_mut().enumerate() {
                *a += centered_sq(x.row(e, c), mean[c]);
            }
        });
        let var: Vec<f64> = sq.iter().map(|s| s / count).collect();
        let inv_std: Vec<f64> = var.iter().map(|v| 1.0 / (v + self.eps).sqrt()).collect();
        let (y, xhat) = self.affine(x, &mean, &inv_std);
        (y, BnCache { xhat, mean, var, inv_std })
    }

    /// Normalise with the running statistics.
    pub fn forward_eval(&self, x: &Tensor3) -> Option<Tensor3> {
        if !self.has_running_stats {
            return None;
        }
        let inv_std: Vec<f64> = self.running_var.iter().map(|v| 1.0 / (v + self.eps).sqrt()).collect();
        Some(self.affine(x, &self.running_mean, &inv_std).0)
    }

    /// Fold one batch's statistics into the running averages (unbiased variance).
    pub fn update_running(&mut self, cache: &BnCache) {
        let count = (cache.xhat.n * cache.xhat.t) as f64;
        let correction = if count > 1.0 { count / (count - 1.0) } else { 1.0 };
        let m = self.momentum;
        for c in 0..self.channels() {
            self.running_mean[c] = (1.0 - m) * self.running_mean[c] + m * cache.mean[c];
            self.running_var[c] = (1.0 - m) * self.running_var[c] + m * cache.var[c] * correction;
        }
        self.has_running_stats = true;
    }

    /// Returns `(dgamma, dbeta, dx)`.
    pub fn backward(&self, cache: &BnCache, dy: &Tensor3) -> (Vec<f64>, Vec<f64>, Tensor3) {
        let xh = &cache.xhat;
        let c_n = xh.c;
        let sums = chunked_sum(xh.n, 2 * c_n, |e, acc: &mut [f64]| {
            for c in 0..c_n {
                let d = dy.row(e, c);
                acc[c] += sum(d);
                acc[c_n + c] += dot(d, xh.row(e, c));
            }
        });
        let dbeta = sums[..c_n].to_vec();
        let dgamma = sums[c_n..].to_vec();
        let count = (xh.n * xh.t) as f64;
        let mut dx = Tensor3::zeros(xh.n, c_n, xh.t);
        let t = xh.t;
        dx.data.par_chunks_mut(t).zip(dy.data.par_chunks(t)).zip(xh.data.par_chunks(t)).enumerate().for_each(
            |(r, ((out, d), h))| {
                let c = r % c_n;
                let scale = self.gamma[c] * cache.inv_std[c] / count;
                for ((o, &dv), &hv) in out.iter_mut().zip(d).zip(h) {
                    *o = scale * (count * dv - dbeta[c] - hv * dgamma[c]);
                }
            },
        );
        (dgamma, dbeta, dx)
    }
}

pub fn relu_in_place(x: &mut Tensor3) {
    x.data.par_iter_mut().for_each(|v| *v = v.max(0.0));
}

/// Gradient through ReLU given its output; zero where the output is 0.
pub fn relu_backward(output: &Tensor3, dout: &mut Tensor3) {
    dout.data.par_iter_mut().zip(output.data.par_iter()).for_each(|(d, &y)| {
        if y <= 0.0 {
            *d = 0.0;
        }
    });
}

/// Non-overlapping max pooling; the first maximum wins ties.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MaxPool {
    pub width: usize,
}

impl MaxPool {
    /// Pooled tensor and the input offset of each selected sample.
    pub fn forward(&self, x: &Tensor3) -> (Tensor3, Vec<u32>) {
        let w = self.width;
        let t_out = x.t / w;
        let mut out = Tensor3::zeros(x.n, x.c, t_out);
        let mut arg = vec![0u32; x.n * x.c * t_out];
        if t_out == 0 {
            return (out, arg);
        }
        out.data.par_chunks_mut(t_out).zip(arg.par_chunks_mut(t_out)).zip(x.data.par_chunks(x.t)).for_each(
            |((o, a), xs)| {
                for (i, (ov, av)) in o.iter_mut().zip(a.iter_mut()).enumerate() {
                    let mut best = i * w;
                    for j in i * w + 1..(i + 1) * w {
                        if xs[j] > xs[best] {
                            best = j;
                        }
                    }
                    *ov = xs[best];
                    *av = best as u32;
                }
            },
        );
        (out, arg)
    }

    pub fn backward(&self, arg: &[u32], input_t: usize, dout: &Tensor3) -> Tensor3 {
        let mut dx = Tensor3::zeros(dout.n, dout.c, input_t);
        if dout.t == 0 {
            return dx;
        }
        dx.data.par_chunks_mut(input_t).zip(dout.data.par_chunks(dout.t)).zip(arg.par_chunks(dout.t)).for_each(
            |((row, d), a)| {
                for (&dv, &j) in d.iter().zip(a) {
                    row[j as usize] += dv;
                }
            },
        );
        dx
    }
}

/// One LSTM direction; gates packed as input, forget, cell, output.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Lstm {
    pub input: usize,
    pub hidden: usize,
    /// 4H × input.
    pub w_ih: Vec<f64>,
    /// 4H × H.
    pub w_hh: Vec<f64>,
    pub bias: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct LstmCache {
    /// Activated gates per step, 4H each.
    gates: Vec<f64>,
    cells: Vec<f64>,
    hidden: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct LstmGrads {
    pub w_ih: Vec<f64>,
    pub w_hh: Vec<f64>,
    pub bias: Vec<f64>,
}

fn sigmoid(v: f64) -> f64 {
    1.0 / (1.0 + (-v).exp())
}

impl Lstm {
    pub fn zeros(input: usize, hidden: usize) -> Self {
        Lstm { input, hidden, w_ih: vec![0.0; 4 * hidden * input], w_hh: vec![0.0; 4 * hidden * hidden], bias: vec![0.0; 4 * hidden] }
    }

    /// Hidden states for the `steps` rows of `x` (row-major, `input` wide).
    pub fn forward(&self, x: &[f64], steps: usize) -> (Vec<f64>, LstmCache) {
        let h_n = self.hidden;
        let mut gates = vec![0.0; steps * 4 * h_n];
        let mut cells = vec![0.0; steps * h_n];
        let mut hidden = vec![0.0; steps * h_n];
        // Input projections do not depend on the recurrence.
        gates.par_chunks_mut(4 * h_n).zip(x.par_chunks(self.input)).for_each(|(g, xt)| {
            g.copy_from_slice(&self.bias);
            gemv_add(&self.w_ih, self.input, xt, g);
        });
        let mut h_prev = vec![0.0; h_n];
        let mut c_prev = vec![0.0; h_n];
        for t in 0..steps {
            let g = &mut gates[t * 4 * h_n..(t + 1) * 4 * h_n];
            gemv_add(&self.w_hh, h_n, &h_prev, g);
            for j in 0..h_n {
                g[j] = sigmoid(g[j]);
                g[h_n + j] = sigmoid(g[h_n + j]);
                g[2 * h_n + j] = g[2 * h_n + j].tanh();
                g[3 * h_n + j] = sigmoid(g[3 * h_n + j]);
                let c = g[h_n + j] * c_prev[j] + g[j] * g[2 * h_n + j];
                cells[t * h_n + j] = c;
                hidden[t * h_n + j] = g[3 * h_n + j] * c.tanh();
            }
            h_prev.copy_from_slice(&hidden[t * h_n..(t + 1) * h_n]);
            c_prev.copy_from_slice(&cells[t * h_n..(t + 1) * h_n]);
        }
        let out = hidden.clone();
        (out, LstmCache { gates, cells, hidden })
    }

    /// Backpropagation through time. Returns parameter and input gradients.
    pub fn backward(&self, x: &[f64], cache: &LstmCache, dh: &[f64]) -> (LstmGrads, Vec<f64>) {
        let h_n = self.hidden;
        let steps = dh.len() / h_n;
        let mut grads = LstmGrads { w_ih: vec![0.0; self.w_ih.len()], w_hh: vec![0.0; self.w_hh.len()], bias: vec![0.0; 4 * h_n] };
        let mut pre = vec![0.0; steps * 4 * h_n];
        let mut dh_next = vec![0.0; h_n];
        let mut dc_next = vec![0.0; h_n];
        let zeros = vec![0.0; h_n];
        for t in (0..steps).rev() {
            let g = &cache.gates[t * 4 * h_n..(t + 1) * 4 * h_n];
            let c_prev = if t > 0 { &cache.cells[(t - 1) * h_n..t * h_n] } else { &zeros[..] };
            let da = &mut pre[t * 4 * h_n..(t + 1) * 4 * h_n];
            for j in 0..h_n {
                let (i, f, gg, o) = (g[j], g[h_n + j], g[2 * h_n + j], g[3 * h_n + j]);
                let tc = cache.cells[t * h_n + j].tanh();
                let dhv = dh[t * h_n + j] + dh_next[j];
                let dc = dhv * o * (1.0 - tc * tc) + dc_next[j];
                da[j] = dc * gg * i * (1.0 - i);
                da[h_n + j] = dc * c_prev[j] * f * (1.0 - f);
                da[2 * h_n + j] = dc * i * (1.0 - gg * gg);
                da[3 * h_n + j] = dhv * tc * o * (1.0 - o);
                dc_next[j] = dc * f;
            }
            dh_next.fill(0.0);
            gemv_t_add(&self.w_hh, h_n, da, &mut dh_next);
            if t > 0 {
                outer_add(&mut grads.w_hh, da, &cache.hidden[(t - 1) * h_n..t * h_n]);
            }
            for (b, d) in grads.bias.iter_mut().zip(da.iter()) {
                *b += d;
            }
        }
        for (da, xt) in pre.chunks_exact(4 * h_n).zip(x.chunks_exact(self.input)) {
            outer_add(&mut grads.w_ih, da, xt);
        }
        let mut dx = vec![0.0; steps * self.input];
        dx.par_chunks_mut(self.input).zip(pre.par_chunks(4 * h_n)).for_each(|(d, da)| gemv_t_add(&self.w_ih, self.input, da, d));
        (grads, dx)
    }
}

/// Affine map `z = h W + b` with `W` stored input × output.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Linear {
    pub input: usize,
    pub output: usize,
    pub weight: Vec<f64>,
    pub bias: Vec<f64>,
}

impl Linear {
    pub fn zeros(input: usize, output: usize) -> Self {
        Linear { input, output, weight: vec![0.0; input * output], bias: vec![0.0; output] }
    }

    pub fn forward(&self, h: &[f64]) -> Vec<f64> {
        let rows = h.len() / self.input;
        let mut z = Vec::with_capacity(rows * self.output);
        for row in h.chunks_exact(self.input) {
            let mut out = self.bias.clone();
            for (&hv, w) in row.iter().zip(self.weight.chunks_exact(self.output)) {
                for (o, wv) in out.iter_mut().zip(w) {
                    *o += hv * wv;
                }
            }
            z.extend(out);
        }
        z
    }

    /// Returns `(dW, db, dh)`.
    pub fn backward(&self, h: &[f64], dz: &[f64]) -> (Vec<f64>, Vec<f64>, Vec<f64>) {
        let mut dw = vec![0.0; self.weight.len()];
        let mut db = vec![0.0; self.output];
        let mut dh = vec![0.0; h.len()];
        for ((row, d), dhr) in h.chunks_exact(self.input).zip(dz.chunks_exact(self.output)).zip(dh.chunks_exact_mut(self.input)) {
            outer_add(&mut dw, row, d);
            for (b, v) in db.iter_mut().zip(d) {
                *b += v;
            }
            gemv_add(&self.weight, self.output, d, dhr);
        }
        (dw, db, dh)
    }
}

/// Row-wise softmax of `rows × k` scores.
pub fn softmax_rows(z: &[f64], k: usize) -> Vec<f64> {
    let mut p = z.to_vec();
    for row in p.chunks_exact_mut(k) {
        let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let mut sum = 0.0;
        for v in row.iter_mut() {
            *v = (*v - max).exp();
            sum += *v;
        }
        for v in row.iter_mut() {
            *v /= sum;
        }
    }
    p
}

/// Mean cross-entropy with the log clamped at `1e-12`.
pub fn cross_entropy(probabilities: &[f64], k: usize, labels: &[usize]) -> f64 {
    let total: f64 = probabilities.chunks_exact(k).zip(labels).map(|(row, &y)| -row[y].max(1e-12).ln()).sum();
    total / labels.len() as f64
}

/// Gradient of the mean cross-entropy with respect to the scores: `(s - y) / n`.
pub fn softmax_cross_entropy_grad(probabilities: &[f64], k: usize, labels: &[usize]) -> Vec<f64> {
    let n = labels.len() as f64;
    let mut d = probabilities.to_vec();
    for (row, &y) in d.chunks_exact_mut(k).zip(labels) {
        row[y] -= 1.0;
        for v in row.iter_mut() {
            *v /= n;
        }
    }
    d
}
