//! Layer kernels with explicit forward caches and backward passes.

use crate::linalg::{gemm, MatRef, Matrix};

/// Channel-major activations: `data[((c·n + i)·h + y)·w + x]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Act {
    pub c: usize,
    pub n: usize,
    pub h: usize,
    pub w: usize,
    pub data: Vec<f64>,
}

impl Act {
    pub fn plane(&self) -> usize {
        self.n * self.h * self.w
    }
}

/// Output side for a 3×3 convolution with stride 2 and padding 1.
pub fn conv_out(side: usize) -> usize {
    (side - 1) / 2 + 1
}

/// Unfolds 3×3 stride-2 patches into a `(c·9) × (n·ho·wo)` matrix.
fn im2col(x: &Act, ho: usize, wo: usize) -> Vec<f64> {
    let p = x.n * ho * wo;
    let mut cols = vec![0.0; x.c * 9 * p];
    for ci in 0..x.c {
        for ky in 0..3 {
            for kx in 0..3 {
                let row = &mut cols[((ci * 3 + ky) * 3 + kx) * p..][..p];
                for i in 0..x.n {
                    let src = &x.data[(ci * x.n + i) * x.h * x.w..][..x.h * x.w];
                    for oy in 0..ho {
                        let iy = (oy * 2 + ky) as isize - 1;
                        if iy < 0 || iy >= x.h as isize {
                            continue;
                        }
                        let dst = &mut row[(i * ho + oy) * wo..][..wo];
                        let src_row = &src[iy as usize * x.w..][..x.w];
                        for (ox, d) in dst.iter_mut().enumerate() {
                            let ix = (ox * 2 + kx) as isize - 1;
                            if ix >= 0 && ix < x.w as isize {
                                *d = src_row[ix as usize];
                            }
                        }
                    }
                }
            }
        }
    }
    cols
}

/// Adjoint of [`im2col`].
fn col2im(cols: &[f64], c: usize, n: usize, h: usize, w: usize, ho: usize, wo: usize) -> Vec<f64> {
    let p = n * ho * wo;
    let mut out = vec![0.0; c * n * h * w];
    for ci in 0..c {
        for ky in 0..3 {
            for kx in 0..3 {
                let row = &cols[((ci * 3 + ky) * 3 + kx) * p..][..p];
                for i in 0..n {
                    let dst = &mut out[(ci * n + i) * h * w..][..h * w];
                    for oy in 0..ho {
                        let iy = (oy * 2 + ky) as isize - 1;
                        if iy < 0 || iy >= h as isize {
                            continue;
                        }
                        let src = &row[(i * ho + oy) * wo..][..wo];
                        let dst_row = &mut dst[iy as usize * w..][..w];
                        for (ox, s) in src.iter().enumerate() {
                            let ix = (ox * 2 + kx) as isize - 1;
                            if ix >= 0 && ix < w as isize {
                                dst_row[ix as usize] += s;
                            }
                        }
                    }
                }
            }
        }
    }
    out
}

pub struct ConvCache {
    cols: Vec<f64>,
    in_shape: (usize, usize, usize, usize),
    /// Post-activation output; positive entries mark active ReLUs.
    pub out: Act,
}

/// 3×3 stride-2 convolution followed by ReLU. `weight` is `out_c × (in_c·9)`.
pub fn conv_relu_forward(x: &Act, weight: &[f64], bias: &[f64], out_c: usize) -> ConvCache {
    let (ho, wo) = (conv_out(x.h), conv_out(x.w));
    let p = x.n * ho * wo;
    let k = x.c * 9;
    let cols = im2col(x, ho, wo);
    let mut out = vec![0.0; out_c * p];
    for (o, b) in bias.iter().enumerate() {
        out[o * p..(o + 1) * p].fill(*b);
    }
    gemm(out_c, k, p, 1.0, MatRef::new(weight, k, false), MatRef::new(&cols, p, false), 1.0, &mut out);
    out.iter_mut().for_each(|v| *v = v.max(0.0));
    ConvCache {
        cols,
        in_shape: (x.c, x.n, x.h, x.w),
        out: Act {
            c: out_c,
            n: x.n,
            h: ho,
            w: wo,
            data: out,
        },
    }
}

/// Back-propagates `d_out` (gradient w.r.t. the post-ReLU output). Adds the
/// parameter gradients into `gw`, `gb` and returns the input gradient when
/// `need_input` is set.
pub fn conv_relu_backward(
    cache: &ConvCache,
    d_out: &[f64],
    weight: &[f64],
    gw: &mut [f64],
    gb: &mut [f64],
    need_input: bool,
) -> Option<Vec<f64>> {
    let (c, n, h, w) = cache.in_shape;
    let out = &cache.out;
    let p = out.plane();
    let k = c * 9;
    let oc = out.c;
    let mut d_pre: Vec<f64> = d_out
        .iter()
        .zip(&out.data)
        .map(|(g, y)| if *y > 0.0 { *g } else { 0.0 })
        .collect();
    for o in 0..oc {
        gb[o] += d_pre[o * p..(o + 1) * p].iter().sum::<f64>();
    }
    gemm(oc, p, k, 1.0, MatRef::new(&d_pre, p, false), MatRef::new(&cache.cols, p, true), 1.0, gw);
    if !need_input {
        return None;
    }
    let mut d_cols = vec![0.0; k * p];
    gemm(k, oc, p, 1.0, MatRef::new(weight, k, true), MatRef::new(&d_pre, p, false), 0.0, &mut d_cols);
    d_pre.clear();
    Some(col2im(&d_cols, c, n, h, w, out.h, out.w))
}

/// `x Wᵀ + b` with `W` stored `out × in`.
pub fn linear_forward(x: &Matrix, weight: &[f64], bias: &[f64]) -> Matrix {
    let (n, fin) = x.shape();
    let fout = bias.len();
    let mut out = Matrix::zeros(n, fout);
    for r in 0..n {
        out.row_mut(r).copy_from_slice(bias);
    }
    gemm(
        n,
        fin,
        fout,
        1.0,
        MatRef::new(x.as_slice(), fin, false),
        MatRef::new(weight, fin, true),
        1.0,
        out.as_mut_slice(),
    );
    out
}

/// Accumulates weight/bias gradients and returns the input gradient.
pub fn linear_backward(x: &Matrix, dy: &Matrix, weight: &[f64], gw: &mut [f64], gb: &mut [f64], need_input: bool) -> Option<Matrix> {
    let (n, fin) = x.shape();
    let fout = dy.cols();
    for r in 0..n {
        for (g, d) in gb.iter_mut().zip(dy.row(r)) {
            *g += d;
        }
    }
    gemm(
        fout,
        n,
        fin,
        1.0,
        MatRef::new(dy.as_slice(), fout, true),
        MatRef::new(x.as_slice(), fin, false),
        1.0,
        gw,
    );
    need_input.then(|| {
        let mut dx = Matrix::zeros(n, fin);
        gemm(
            n,
            fout,
            fin,
            1.0,
            MatRef::new(dy.as_slice(), fout, false),
            MatRef::new(weight, fin, false),
            0.0,
            dx.as_mut_slice(),
        );
        dx
    })
}

pub fn relu(x: &mut Matrix) {
    x.as_mut_slice().iter_mut().for_each(|v| *v = v.max(0.0));
}

/// Zeroes gradient entries where the ReLU output was not positive.
pub fn relu_backward(y: &Matrix, dy: &mut Matrix) {
    for (g, v) in dy.as_mut_slice().iter_mut().zip(y.as_slice()) {
        if *v <= 0.0 {
            *g = 0.0;
        }
    }
}

pub const BN_EPS: f64 = 1e-5;
/// Weight of the old value in the running-statistics update.
pub const BN_MOMENTUM: f64 = 0.9;

pub struct BnCache {
    xhat: Matrix,
    inv_std: Vec<f64>,
    pub batch_mean: Vec<f64>,
    /// Unbiased batch variance, the quantity tracked by the running average.
    pub batch_var_unbiased: Vec<f64>,
}

/// Batch-statistics normalisation followed by the affine map.
pub fn batchnorm_train(x: &Matrix, gamma: &[f64], beta: &[f64]) -> (Matrix, BnCache) {
    let (n, f) = x.shape();
    let nf = n as f64;
    let mean = x.col_means();
    let mut var = vec![0.0; f];
    for r in 0..n {
        for ((acc, v), m) in var.iter_mut().zip(x.row(r)).zip(&mean) {
            *acc += (v - m) * (v - m);
        }
    }
    let unbiased: Vec<f64> = var.iter().map(|s| s / (nf - 1.0)).collect();
    let inv_std: Vec<f64> = var.iter().map(|s| 1.0 / (s / nf + BN_EPS).sqrt()).collect();
    let mut xhat = Matrix::zeros(n, f);
    let mut y = Matrix::zeros(n, f);
    for r in 0..n {
        for j in 0..f {
            let h = (x.get(r, j) - mean[j]) * inv_std[j];
            xhat.set(r, j, h);
            y.set(r, j, gamma[j] * h + beta[j]);
        }
    }
    (
        y,
        BnCache {
            xhat,
            inv_std,
            batch_mean: mean,
            batch_var_unbiased: unbiased,
        },
    )
}

pub fn batchnorm_eval(x: &Matrix, gamma: &[f64], beta: &[f64], mean: &[f64], var: &[f64]) -> Matrix {
    let (n, f) = x.shape();
    let mut y = Matrix::zeros(n, f);
    for r in 0..n {
        for j in 0..f {
            let h = (x.get(r, j) - mean[j]) / (var[j] + BN_EPS).sqrt();
            y.set(r, j, gamma[j] * h + beta[j]);
        }
    }
    y
}

pub fn batchnorm_backward(cache: &BnCache, dy: &Matrix, gamma: &[f64], gg: &mut [f64], gbeta: &mut [f64]) -> Matrix {
    let (n, f) = dy.shape();
    let nf = n as f64;
    let mut dx = Matrix::zeros(n, f);
    for j in 0..f {
        let mut sum_d = 0.0;
        let mut sum_dx = 0.0;
        for r in 0..n {
            let d = dy.get(r, j);
            sum_d += d;
            sum_dx += d * cache.xhat.get(r, j);
        }
        gg[j] += sum_dx;
        gbeta[j] += sum_d;
        let k = gamma[j] * cache.inv_std[j] / nf;
        for r in 0..n {
            let v = k * (nf * dy.get(r, j) - sum_d - cache.xhat.get(r, j) * sum_dx);
            dx.set(r, j, v);
        }
    }
    dx
}
