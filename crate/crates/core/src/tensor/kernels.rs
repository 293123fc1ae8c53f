//! Raw slice kernels behind the tape operations.

use super::tape::{Result, TensorError};
use crate::Scalar;

pub(crate) fn sigmoid<T: Scalar>(x: T) -> T {
    if x >= T::zero() {
        T::one() / (T::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (T::one() + e)
    }
}

/// `max(x, 0) - x t + ln(1 + exp(-|x|))`.
pub(crate) fn bce_logit<T: Scalar>(x: T, t: T) -> T {
    x.max(T::zero()) - x * t + (-x.abs()).exp().ln_1p()
}

pub(crate) fn softmax_in_place<T: Scalar>(row: &mut [T]) {
    let m = row.iter().copied().fold(T::neg_infinity(), T::max);
    let mut total = T::zero();
    for v in row.iter_mut() {
        *v = (*v - m).exp();
        total += *v;
    }
    for v in row.iter_mut() {
        *v /= total;
    }
}

pub(crate) fn log_softmax_in_place<T: Scalar>(row: &mut [T]) {
    let m = row.iter().copied().fold(T::neg_infinity(), T::max);
    let lse = m + row.iter().map(|&v| (v - m).exp()).sum::<T>().ln();
    for v in row.iter_mut() {
        *v -= lse;
    }
}

/// `out += a[m,k] b[k,n]`.
pub(crate) fn matmul<T: Scalar>(a: &[T], b: &[T], out: &mut [T], m: usize, k: usize, n: usize) {
    T::gemm(m, k, n, (a, (k, 1)), (b, (n, 1)), (out, (n, 1)));
}

/// `da += g[m,n] b^T`.
pub(crate) fn matmul_grad_lhs<T: Scalar>(g: &[T], b: &[T], da: &mut [T], m: usize, k: usize, n: usize) {
    T::gemm(m, n, k, (g, (n, 1)), (b, (1, n)), (da, (k, 1)));
}

/// `db += a^T g[m,n]`.
pub(crate) fn matmul_grad_rhs<T: Scalar>(a: &[T], g: &[T], db: &mut [T], m: usize, k: usize, n: usize) {
    T::gemm(k, m, n, (a, (1, k)), (g, (n, 1)), (db, (n, 1)));
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub(crate) struct ConvGeom {
    pub batch: usize,
    pub in_ch: usize,
    pub h: usize,
    pub w: usize,
    pub out_ch: usize,
    pub kh: usize,
    pub kw: usize,
    pub stride: usize,
    pub pad: usize,
    pub oh: usize,
    pub ow: usize,
}

impl ConvGeom {
    pub fn new(x: &[usize], k: &[usize], stride: usize, pad: usize) -> Result<Self> {
        let mismatch = || TensorError::ShapeMismatch { op: "conv2d", lhs: x.to_vec(), rhs: k.to_vec() };
        if x.len() != 4 || k.len() != 4 || x[1] != k[1] || stride == 0 {
            return Err(mismatch());
        }
        let (h, w, kh, kw) = (x[2], x[3], k[2], k[3]);
        if h + 2 * pad < kh || w + 2 * pad < kw {
            return Err(mismatch());
        }
        Ok(ConvGeom {
            batch: x[0],
            in_ch: x[1],
            h,
            w,
            out_ch: k[0],
            kh,
            kw,
            stride,
            pad,
            oh: (h + 2 * pad - kh) / stride + 1,
            ow: (w + 2 * pad - kw) / stride + 1,
        })
    }

    pub fn out_shape(&self) -> [usize; 4] {
        [self.batch, self.out_ch, self.oh, self.ow]
    }

    /// Output positions `o` along one axis whose input coordinate
    /// `o * stride + offset - pad` lies in `0..len`.
    fn valid(&self, offset: usize, len: usize, out_len: usize) -> impl Iterator<Item = (usize, usize)> + '_ {
        (0..out_len).filter_map(move |o| {
            let i = (o * self.stride + offset).checked_sub(self.pad)?;
            (i < len).then_some((o, i))
        })
    }
}

impl ConvGeom {
    fn patch(&self) -> usize {
        self.in_ch * self.kh * self.kw
    }

    /// Unfolds one image into a `[in_ch * kh * kw, oh * ow]` matrix.
    fn im2col<T: Scalar>(&self, x: &[T], cols: &mut [T]) {
        let plane = self.oh * self.ow;
        cols.iter_mut().for_each(|v| *v = T::zero());
        for c in 0..self.in_ch {
            let src = &x[c * self.h * self.w..][..self.h * self.w];
            for ky in 0..self.kh {
                for kx in 0..self.kw {
                    let row = &mut cols[((c * self.kh + ky) * self.kw + kx) * plane..][..plane];
                    for (oy, iy) in self.valid(ky, self.h, self.oh) {
                        for (ox, ix) in self.valid(kx, self.w, self.ow) {
                            row[oy * self.ow + ox] = src[iy * self.w + ix];
                        }
                    }
                }
            }
        }
    }

    /// Adjoint of [`ConvGeom::im2col`]: folds columns back onto an image.
    fn col2im<T: Scalar>(&self, cols: &[T], dx: &mut [T]) {
        let plane = self.oh * self.ow;
        for c in 0..self.in_ch {
            let dst = &mut dx[c * self.h * self.w..][..self.h * self.w];
            for ky in 0..self.kh {
                for kx in 0..self.kw {
                    let row = &cols[((c * self.kh + ky) * self.kw + kx) * plane..][..plane];
                    for (oy, iy) in self.valid(ky, self.h, self.oh) {
                        for (ox, ix) in self.valid(kx, self.w, self.ow) {
                            dst[iy * self.w + ix] += row[oy * self.ow + ox];
                        }
                    }
                }
            }
        }
    }
}

pub(crate) fn conv2d_forward<T: Scalar>(g: &ConvGeom, x: &[T], k: &[T], bias: Option<&[T]>) -> Vec<T> {
    let plane = g.oh * g.ow;
    let (patch, image) = (g.patch(), g.in_ch * g.h * g.w);
    let mut out = vec![T::zero(); g.batch * g.out_ch * plane];
    let mut cols = vec![T::zero(); patch * plane];
    for b in 0..g.batch {
        let dst = &mut out[b * g.out_ch * plane..][..g.out_ch * plane];
        if let Some(bias) = bias {
            for (o, chunk) in dst.chunks_mut(plane).enumerate() {
                chunk.iter_mut().for_each(|v| *v = bias[o]);
            }
        }
        g.im2col(&x[b * image..][..image], &mut cols);
        T::gemm(g.out_ch, patch, plane, (k, (patch, 1)), (&cols, (plane, 1)), (dst, (plane, 1)));
    }
    out
}

pub(crate) fn conv2d_grad_input<T: Scalar>(g: &ConvGeom, grad: &[T], k: &[T], dx: &mut [T]) {
    let plane = g.oh * g.ow;
    let (patch, image) = (g.patch(), g.in_ch * g.h * g.w);
    let mut cols = vec![T::zero(); patch * plane];
    for b in 0..g.batch {
        cols.iter_mut().for_each(|v| *v = T::zero());
        let go = &grad[b * g.out_ch * plane..][..g.out_ch * plane];
        T::gemm(patch, g.out_ch, plane, (k, (1, patch)), (go, (plane, 1)), (&mut cols, (plane, 1)));
        g.col2im(&cols, &mut dx[b * image..][..image]);
    }
}

pub(crate) fn conv2d_grad_kernel<T: Scalar>(g: &ConvGeom, grad: &[T], x: &[T], dk: &mut [T]) {
    let plane = g.oh * g.ow;
    let (patch, image) = (g.patch(), g.in_ch * g.h * g.w);
    let mut cols = vec![T::zero(); patch * plane];
    for b in 0..g.batch {
        g.im2col(&x[b * image..][..image], &mut cols);
        let go = &grad[b * g.out_ch * plane..][..g.out_ch * plane];
        T::gemm(g.out_ch, plane, patch, (go, (plane, 1)), (&cols, (1, plane)), (dk, (patch, 1)));
    }
}

pub(crate) fn conv2d_grad_bias<T: Scalar>(g: &ConvGeom, grad: &[T], db: &mut [T]) {
    let plane = g.oh * g.ow;
    for b in 0..g.batch {
        for (o, d) in db.iter_mut().enumerate() {
            *d += grad[(b * g.out_ch + o) * plane..][..plane].iter().copied().sum::<T>();
        }
    }
}

/// Geometry shared by pooling (shrinks) and upsampling (grows).
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub(crate) struct PoolGeom {
    pub planes: usize,
    pub h: usize,
    pub w: usize,
    pub factor: usize,
    pub out: [usize; 4],
}

impl PoolGeom {
    fn check(x: &[usize], factor: usize) -> Result<()> {
        if x.len() != 4 || factor == 0 {
            return Err(TensorError::BadArgument(format!("expected [B, C, H, W] and factor > 0, got {x:?}")));
        }
        Ok(())
    }

    pub fn pool(x: &[usize], window: usize) -> Result<Self> {
        Self::check(x, window)?;
        if x[2] < window || x[3] < window {
            return Err(TensorError::BadArgument(format!("pool window {window} larger than {x:?}")));
        }
        Ok(PoolGeom {
            planes: x[0] * x[1],
            h: x[2],
            w: x[3],
            factor: window,
            out: [x[0], x[1], x[2] / window, x[3] / window],
        })
    }

    pub fn upsample(x: &[usize], factor: usize) -> Result<Self> {
        Self::check(x, factor)?;
        Ok(PoolGeom {
            planes: x[0] * x[1],
            h: x[2],
            w: x[3],
            factor,
            out: [x[0], x[1], x[2] * factor, x[3] * factor],
        })
    }

    pub fn out_shape(&self) -> [usize; 4] {
        self.out
    }
}

/// Returns pooled values and the flat input index each one came from.
pub(crate) fn maxpool_forward<T: Scalar>(g: &PoolGeom, x: &[T]) -> (Vec<T>, Vec<usize>) {
    let (oh, ow, f) = (g.out[2], g.out[3], g.factor);
    let mut value = Vec::with_capacity(g.planes * oh * ow);
    let mut argmax = Vec::with_capacity(value.capacity());
    for p in 0..g.planes {
        let base = p * g.h * g.w;
        for oy in 0..oh {
            for ox in 0..ow {
                let mut best = base + oy * f * g.w + ox * f;
                for dy in 0..f {
                    for dx in 0..f {
                        let i = base + (oy * f + dy) * g.w + ox * f + dx;
                        if x[i] > x[best] {
                            best = i;
                        }
                    }
                }
                value.push(x[best]);
                argmax.push(best);
            }
        }
    }
    (value, argmax)
}

pub(crate) fn upsample_forward<T: Scalar>(g: &PoolGeom, x: &[T]) -> Vec<T> {
    let (oh, ow, f) = (g.out[2], g.out[3], g.factor);
    let mut out = Vec::with_capacity(g.planes * oh * ow);
    for p in 0..g.planes {
        for oy in 0..oh {
            let row = &x[p * g.h * g.w + (oy / f) * g.w..][..g.w];
            out.extend((0..ow).map(|ox| row[ox / f]));
        }
    }
    out
}

pub(crate) fn upsample_backward<T: Scalar>(g: &PoolGeom, grad: &[T], dx: &mut [T]) {
    let (oh, ow, f) = (g.out[2], g.out[3], g.factor);
    for p in 0..g.planes {
        for oy in 0..oh {
            for ox in 0..ow {
                dx[p * g.h * g.w + (oy / f) * g.w + ox / f] += grad[(p * oh + oy) * ow + ox];
            }
        }
    }
}

/// Per-channel mean and biased variance of an `[outer, c, inner]` layout.
pub(crate) fn channel_moments<T: Scalar>(x: &[T], [outer, c, inner]: [usize; 3]) -> (Vec<T>, Vec<T>) {
    let count = T::from_usize_lossy((outer * inner).max(1));
    let mut mean = vec![T::zero(); c];
    for o in 0..outer {
        for (ch, m) in mean.iter_mut().enumerate() {
            *m += x[(o * c + ch) * inner..][..inner].iter().copied().sum::<T>();
        }
    }
    mean.iter_mut().for_each(|m| *m /= count);
    let mut var = vec![T::zero(); c];
    for o in 0..outer {
        for ch in 0..c {
            var[ch] += x[(o * c + ch) * inner..][..inner]
                .iter()
                .map(|&v| (v - mean[ch]) * (v - mean[ch]))
                .sum::<T>();
        }
    }
    var.iter_mut().for_each(|v| *v /= count);
    (mean, var)
}

/// Returns `(gamma * xhat + beta, xhat)`.
pub(crate) fn bn_apply<T: Scalar>(
    x: &[T],
    [outer, c, inner]: [usize; 3],
    mean: &[T],
    inv_std: &[T],
    gamma: &[T],
    beta: &[T],
) -> (Vec<T>, Vec<T>) {
    let mut y = vec![T::zero(); x.len()];
    let mut xhat = vec![T::zero(); x.len()];
    for o in 0..outer {
        for ch in 0..c {
            let base = (o * c + ch) * inner;
            for i in base..base + inner {
                xhat[i] = (x[i] - mean[ch]) * inv_std[ch];
                y[i] = gamma[ch] * xhat[i] + beta[ch];
            }
        }
    }
    (y, xhat)
}

/// Per-channel `sum(g)` and `sum(g * xhat)`.
pub(crate) fn bn_sums<T: Scalar>(g: &[T], xhat: &[T], [outer, c, inner]: [usize; 3]) -> (Vec<T>, Vec<T>) {
    let mut sum_g = vec![T::zero(); c];
    let mut sum_gx = vec![T::zero(); c];
    for o in 0..outer {
        for ch in 0..c {
            let base = (o * c + ch) * inner;
            for i in base..base + inner {
                sum_g[ch] += g[i];
                sum_gx[ch] += g[i] * xhat[i];
            }
        }
    }
    (sum_g, sum_gx)
}

#[allow(clippy::too_many_arguments)]
pub(crate) fn bn_train_grad_input<T: Scalar>(
    g: &[T],
    xhat: &[T],
    [outer, c, inner]: [usize; 3],
    gamma: &[T],
    inv_std: &[T],
    sum_g: &[T],
    sum_gx: &[T],
    dx: &mut [T],
) {
    let m = T::from_usize_lossy((outer * inner).max(1));
    for o in 0..outer {
        for ch in 0..c {
            let scale = gamma[ch] * inv_std[ch] / m;
            let base = (o * c + ch) * inner;
            for i in base..base + inner {
                dx[i] += scale * (m * g[i] - sum_g[ch] - xhat[i] * sum_gx[ch]);
            }
        }
    }
}
