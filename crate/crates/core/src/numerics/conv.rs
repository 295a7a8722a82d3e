//! Batched 2-D cross-correlation kernels (im2col + gemm) and their adjoints.

use super::{Real, Tensor};
use crate::error::{invalid, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub(crate) struct ConvGeometry {
    pub batch: usize,
    pub c_in: usize,
    pub h: usize,
    pub w: usize,
    pub c_out: usize,
    pub k: usize,
    pub stride: usize,
    pub pad: usize,
    pub h_out: usize,
    pub w_out: usize,
}

impl ConvGeometry {
    pub fn new(x_shape: &[usize], w_shape: &[usize], stride: usize, pad: usize) -> Result<Self> {
        if x_shape.len() != 4 || w_shape.len() != 4 {
            return Err(invalid!(
                "conv2d expects [N,C,H,W] input and [Cout,Cin,k,k] kernel, got {x_shape:?} and {w_shape:?}"
            ));
        }
        let (batch, c_in, h, w) = (x_shape[0], x_shape[1], x_shape[2], x_shape[3]);
        let (c_out, kc_in, kh, kw) = (w_shape[0], w_shape[1], w_shape[2], w_shape[3]);
        if kc_in != c_in {
            return Err(invalid!(
                "kernel expects {kc_in} input channels, input has {c_in}"
            ));
        }
        if kh != kw || kh % 2 == 0 {
            return Err(invalid!("kernel must be square with odd size, got {kh}x{kw}"));
        }
        if stride == 0 {
            return Err(invalid!("stride must be at least 1"));
        }
        if h + 2 * pad < kh || w + 2 * pad < kw {
            return Err(invalid!(
                "kernel {kh}x{kw} larger than padded input {}x{}",
                h + 2 * pad,
                w + 2 * pad
            ));
        }
        Ok(Self {
            batch,
            c_in,
            h,
            w,
            c_out,
            k: kh,
            stride,
            pad,
            h_out: (h + 2 * pad - kh) / stride + 1,
            w_out: (w + 2 * pad - kw) / stride + 1,
        })
    }

    fn is_pointwise(&self) -> bool {
        self.k == 1 && self.stride == 1 && self.pad == 0
    }

    fn col_rows(&self) -> usize {
        self.c_in * self.k * self.k
    }

    fn out_pixels(&self) -> usize {
        self.h_out * self.w_out
    }

    fn in_pixels(&self) -> usize {
        self.h * self.w
    }
}

fn im2col<R: Real>(g: &ConvGeometry, x: &[R], col: &mut [R]) {
    let (k, s, p) = (g.k, g.stride, g.pad as isize);
    let cols = g.out_pixels();
    for c in 0..g.c_in {
        let plane = &x[c * g.in_pixels()..(c + 1) * g.in_pixels()];
        for ki in 0..k {
            for kj in 0..k {
                let row = (c * k + ki) * k + kj;
                let dst = &mut col[row * cols..(row + 1) * cols];
                for oi in 0..g.h_out {
                    let ii = (oi * s) as isize + ki as isize - p;
                    let line = &mut dst[oi * g.w_out..(oi + 1) * g.w_out];
                    if ii < 0 || ii >= g.h as isize {
                        line.fill(R::zero());
                        continue;
                    }
                    let src = &plane[ii as usize * g.w..(ii as usize + 1) * g.w];
                    if s == 1 {
                        // contiguous run of valid columns, zeros on either side
                        let off = kj as isize - p;
                        let lo = (-off).clamp(0, g.w_out as isize) as usize;
                        let hi = (g.w as isize - off).clamp(lo as isize, g.w_out as isize) as usize;
                        line[..lo].fill(R::zero());
                        line[lo..hi].copy_from_slice(&src[(lo as isize + off) as usize..(hi as isize + off) as usize]);
                        line[hi..].fill(R::zero());
                        continue;
                    }
                    for (oj, v) in line.iter_mut().enumerate() {
                        let jj = (oj * s) as isize + kj as isize - p;
                        *v = if jj < 0 || jj >= g.w as isize {
                            R::zero()
                        } else {
                            src[jj as usize]
                        };
                    }
                }
            }
        }
    }
}

fn col2im_add<R: Real>(g: &ConvGeometry, col: &[R], x: &mut [R]) {
    let (k, s, p) = (g.k, g.stride, g.pad as isize);
    let cols = g.out_pixels();
    for c in 0..g.c_in {
        let plane = &mut x[c * g.in_pixels()..(c + 1) * g.in_pixels()];
        for ki in 0..k {
            for kj in 0..k {
                let row = (c * k + ki) * k + kj;
                let src = &col[row * cols..(row + 1) * cols];
                for oi in 0..g.h_out {
                    let ii = (oi * s) as isize + ki as isize - p;
                    if ii < 0 || ii >= g.h as isize {
                        continue;
                    }
                    let dst = &mut plane[ii as usize * g.w..(ii as usize + 1) * g.w];
                    if s == 1 {
                        let off = kj as isize - p;
                        let lo = (-off).clamp(0, g.w_out as isize) as usize;
                        let hi = (g.w as isize - off).clamp(lo as isize, g.w_out as isize) as usize;
                        let run = &src[oi * g.w_out + lo..oi * g.w_out + hi];
                        let start = (lo as isize + off) as usize;
                        for (d, v) in dst[start..start + run.len()].iter_mut().zip(run) {
                            *d += *v;
                        }
                        continue;
                    }
                    for oj in 0..g.w_out {
                        let jj = (oj * s) as isize + kj as isize - p;
                        if jj >= 0 && jj < g.w as isize {
                            dst[jj as usize] += src[oi * g.w_out + oj];
                        }
                    }
                }
            }
        }
    }
}

pub(crate) fn conv2d_forward<R: Real>(x: &Tensor<R>, w: &Tensor<R>, stride: usize, pad: usize) -> Result<Tensor<R>> {
    let g = ConvGeometry::new(x.shape(), w.shape(), stride, pad)?;
    let mut out = Tensor::zeros(&[g.batch, g.c_out, g.h_out, g.w_out]);
    let (rows, cols) = (g.col_rows(), g.out_pixels());
    let mut col = if g.is_pointwise() {
        Vec::new()
    } else {
        vec![R::zero(); rows * cols]
    };
    let in_len = g.c_in * g.in_pixels();
    let out_len = g.c_out * cols;
    for n in 0..g.batch {
        let xs = &x.data()[n * in_len..(n + 1) * in_len];
        let b: &[R] = if g.is_pointwise() {
            xs
        } else {
            im2col(&g, xs, &mut col);
            &col
        };
        let dst = &mut out.data_mut()[n * out_len..(n + 1) * out_len];
        R::gemm(
            g.c_out,
            rows,
            cols,
            R::one(),
            w.data(),
            (rows as isize, 1),
            b,
            (cols as isize, 1),
            R::zero(),
            dst,
            (cols as isize, 1),
        );
    }
    Ok(out)
}

/// Gradients of a conv2d w.r.t. its input and kernel, each computed only when requested.
/// Input and kernel gradients, each present only when requested.
pub(crate) type ConvGrads<R> = (Option<Tensor<R>>, Option<Tensor<R>>);

pub(crate) fn conv2d_backward<R: Real>(
    x: &Tensor<R>,
    w: &Tensor<R>,
    grad_out: &Tensor<R>,
    stride: usize,
    pad: usize,
    want_input: bool,
    want_kernel: bool,
) -> Result<ConvGrads<R>> {
    let g = ConvGeometry::new(x.shape(), w.shape(), stride, pad)?;
    let (rows, cols) = (g.col_rows(), g.out_pixels());
    let in_len = g.c_in * g.in_pixels();
    let out_len = g.c_out * cols;
    let mut gx = want_input.then(|| Tensor::zeros(x.shape()));
    let mut gw = want_kernel.then(|| Tensor::zeros(w.shape()));
    let mut col = vec![R::zero(); if g.is_pointwise() { 0 } else { rows * cols }];
    let mut gcol = vec![R::zero(); if want_input && !g.is_pointwise() { rows * cols } else { 0 }];
    for n in 0..g.batch {
        let go = &grad_out.data()[n * out_len..(n + 1) * out_len];
        if let Some(gw) = gw.as_mut() {
            let xs = &x.data()[n * in_len..(n + 1) * in_len];
            let b: &[R] = if g.is_pointwise() {
                xs
            } else {
                im2col(&g, xs, &mut col);
                &col
            };
            // gw[Cout, rows] += go[Cout, cols] * col^T[cols, rows]
            R::gemm(
                g.c_out,
                cols,
                rows,
                R::one(),
                go,
                (cols as isize, 1),
                b,
                (1, cols as isize),
                R::one(),
                gw.data_mut(),
                (rows as isize, 1),
            );
        }
        if let Some(gx) = gx.as_mut() {
            let dst = &mut gx.data_mut()[n * in_len..(n + 1) * in_len];
            // gcol[rows, cols] = w^T[rows, Cout] * go[Cout, cols]
            if g.is_pointwise() {
                R::gemm(
                    rows,
                    g.c_out,
                    cols,
                    R::one(),
                    w.data(),
                    (1, rows as isize),
                    go,
                    (cols as isize, 1),
                    R::one(),
                    dst,
                    (cols as isize, 1),
                );
            } else {
                R::gemm(
                    rows,
                    g.c_out,
                    cols,
                    R::one(),
                    w.data(),
                    (1, rows as isize),
                    go,
                    (cols as isize, 1),
                    R::zero(),
                    &mut gcol,
                    (cols as isize, 1),
                );
                col2im_add(&g, &gcol, dst);
            }
        }
    }
    Ok((gx, gw))
}

/// Folds the central-difference term into the kernel: the centre tap becomes
/// `w_c - theta * sum(w)` per (out, in) channel pair.
pub(crate) fn cdc_kernel<R: Real>(w: &Tensor<R>, theta: R) -> Result<Tensor<R>> {
    let shape = w.shape();
    if shape.len() != 4 || shape[2] != shape[3] || shape[2].is_multiple_of(2) {
        return Err(invalid!("cdc kernel must be [Cout,Cin,k,k] with odd k, got {shape:?}"));
    }
    let kk = shape[2] * shape[3];
    let centre = kk / 2;
    let mut out = w.clone();
    for taps in out.data_mut().chunks_exact_mut(kk) {
        let total: R = taps.iter().copied().sum();
        taps[centre] -= theta * total;
    }
    Ok(out)
}

pub(crate) fn cdc_kernel_backward<R: Real>(grad: &Tensor<R>, theta: R) -> Tensor<R> {
    let kk = grad.shape()[2] * grad.shape()[3];
    let centre = kk / 2;
    let mut out = grad.clone();
    for taps in out.data_mut().chunks_exact_mut(kk) {
        let gc = taps[centre];
        for t in taps.iter_mut() {
            *t -= theta * gc;
        }
    }
    out
}
