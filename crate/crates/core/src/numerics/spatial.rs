//! Pooling and resampling kernels over `[N,C,H,W]` tensors.

use super::{Real, Tensor};
use crate::error::{invalid, Result};

fn dims4<R: Real>(x: &Tensor<R>) -> Result<(usize, usize, usize, usize)> {
    match *x.shape() {
        [n, c, h, w] => Ok((n, c, h, w)),
        _ => Err(invalid!("expected [N,C,H,W], got {:?}", x.shape())),
    }
}

fn even_dims<R: Real>(x: &Tensor<R>) -> Result<(usize, usize, usize, usize)> {
    let (n, c, h, w) = dims4(x)?;
    if h % 2 != 0 || w % 2 != 0 {
        return Err(invalid!("2x2 pooling needs even spatial size, got {h}x{w}"));
    }
    Ok((n, c, h, w))
}

/// 2x2 max pooling; also returns the flat source index of every output.
pub(crate) fn max_pool2<R: Real>(x: &Tensor<R>) -> Result<(Tensor<R>, Vec<usize>)> {
    let (n, c, h, w) = even_dims(x)?;
    let (ho, wo) = (h / 2, w / 2);
    let mut out = Tensor::zeros(&[n, c, ho, wo]);
    let mut argmax = vec![0usize; n * c * ho * wo];
    let src = x.data();
    for plane in 0..n * c {
        let base = plane * h * w;
        for i in 0..ho {
            for j in 0..wo {
                let mut best = base + 2 * i * w + 2 * j;
                for (di, dj) in [(0, 1), (1, 0), (1, 1)] {
                    let idx = base + (2 * i + di) * w + 2 * j + dj;
                    if src[idx] > src[best] {
                        best = idx;
                    }
                }
                let o = (plane * ho + i) * wo + j;
                out.data_mut()[o] = src[best];
                argmax[o] = best;
            }
        }
    }
    Ok((out, argmax))
}

pub(crate) fn max_pool2_backward<R: Real>(input_shape: &[usize], argmax: &[usize], grad: &Tensor<R>) -> Tensor<R> {
    let mut gx = Tensor::zeros(input_shape);
    for (&src, &g) in argmax.iter().zip(grad.data()) {
        gx.data_mut()[src] += g;
    }
    gx
}

pub(crate) fn avg_pool2<R: Real>(x: &Tensor<R>) -> Result<Tensor<R>> {
    let (n, c, h, w) = even_dims(x)?;
    let (ho, wo) = (h / 2, w / 2);
    let quarter = R::of(0.25);
    let src = x.data();
    Ok(Tensor::from_fn(&[n, c, ho, wo], |o| {
        let plane = o / (ho * wo);
        let (i, j) = ((o % (ho * wo)) / wo, o % wo);
        let b = plane * h * w + 2 * i * w + 2 * j;
        (src[b] + src[b + 1] + src[b + w] + src[b + w + 1]) * quarter
    }))
}

pub(crate) fn avg_pool2_backward<R: Real>(input_shape: &[usize], grad: &Tensor<R>) -> Tensor<R> {
    let (h, w) = (input_shape[2], input_shape[3]);
    let (ho, wo) = (h / 2, w / 2);
    let quarter = R::of(0.25);
    let g = grad.data();
    Tensor::from_fn(input_shape, |idx| {
        let plane = idx / (h * w);
        let (i, j) = ((idx % (h * w)) / w, idx % w);
        g[(plane * ho + i / 2) * wo + j / 2] * quarter
    })
}

pub(crate) fn upsample_nearest2<R: Real>(x: &Tensor<R>) -> Result<Tensor<R>> {
    let (n, c, h, w) = dims4(x)?;
    let src = x.data();
    Ok(Tensor::from_fn(&[n, c, 2 * h, 2 * w], |idx| {
        let plane = idx / (4 * h * w);
        let (i, j) = ((idx % (4 * h * w)) / (2 * w), idx % (2 * w));
        src[(plane * h + i / 2) * w + j / 2]
    }))
}

pub(crate) fn upsample_nearest2_backward<R: Real>(input_shape: &[usize], grad: &Tensor<R>) -> Tensor<R> {
    let (h, w) = (input_shape[2], input_shape[3]);
    let mut gx = Tensor::zeros(input_shape);
    for (idx, &g) in grad.data().iter().enumerate() {
        let plane = idx / (4 * h * w);
        let (i, j) = ((idx % (4 * h * w)) / (2 * w), idx % (2 * w));
        gx.data_mut()[(plane * h + i / 2) * w + j / 2] += g;
    }
    gx
}

/// Two-tap linear interpolation stencil at continuous pixel-centre coordinate
/// `pos`, clamped to `[0, len-1]`.
#[derive(Debug, Clone, Copy)]
pub(crate) struct Tap {
    pub lo: usize,
    pub hi: usize,
    pub frac: f64,
}

impl Tap {
    pub fn at(pos: f64, len: usize) -> Self {
        let max = (len - 1) as f64;
        let p = pos.clamp(0.0, max);
        let lo = p.floor() as usize;
        let hi = (lo + 1).min(len - 1);
        Self {
            lo,
            hi,
            frac: p - lo as f64,
        }
    }

    /// Tap for output index `i` of a resize from `in_len` to `out_len`
    /// with half-pixel-centre alignment.
    pub fn resize(i: usize, in_len: usize, out_len: usize) -> Self {
        let scale = in_len as f64 / out_len as f64;
        Self::at((i as f64 + 0.5) * scale - 0.5, in_len)
    }
}

/// Bilinear sample of one `h x w` plane.
pub(crate) fn sample_plane<R: Real>(plane: &[R], w: usize, ty: Tap, tx: Tap) -> R {
    let (fy, fx) = (R::of(ty.frac), R::of(tx.frac));
    let one = R::one();
    let top = plane[ty.lo * w + tx.lo] * (one - fx) + plane[ty.lo * w + tx.hi] * fx;
    let bottom = plane[ty.hi * w + tx.lo] * (one - fx) + plane[ty.hi * w + tx.hi] * fx;
    top * (one - fy) + bottom * fy
}

pub(crate) fn resize_bilinear<R: Real>(x: &Tensor<R>, out_h: usize, out_w: usize) -> Result<Tensor<R>> {
    let (n, c, h, w) = dims4(x)?;
    if out_h == 0 || out_w == 0 {
        return Err(invalid!("resize target must be positive"));
    }
    let ys: Vec<Tap> = (0..out_h).map(|i| Tap::resize(i, h, out_h)).collect();
    let xs: Vec<Tap> = (0..out_w).map(|j| Tap::resize(j, w, out_w)).collect();
    let mut out = Tensor::zeros(&[n, c, out_h, out_w]);
    for p in 0..n * c {
        let plane = &x.data()[p * h * w..(p + 1) * h * w];
        let dst = &mut out.data_mut()[p * out_h * out_w..(p + 1) * out_h * out_w];
        for (i, &ty) in ys.iter().enumerate() {
            for (j, &tx) in xs.iter().enumerate() {
                dst[i * out_w + j] = sample_plane(plane, w, ty, tx);
            }
        }
    }
    Ok(out)
}

pub(crate) fn resize_bilinear_backward<R: Real>(input_shape: &[usize], grad: &Tensor<R>) -> Tensor<R> {
    let (h, w) = (input_shape[2], input_shape[3]);
    let (out_h, out_w) = (grad.shape()[2], grad.shape()[3]);
    let planes = input_shape[0] * input_shape[1];
    let ys: Vec<Tap> = (0..out_h).map(|i| Tap::resize(i, h, out_h)).collect();
    let xs: Vec<Tap> = (0..out_w).map(|j| Tap::resize(j, w, out_w)).collect();
    let one = R::one();
    let mut gx = Tensor::zeros(input_shape);
    for p in 0..planes {
        let src = &grad.data()[p * out_h * out_w..(p + 1) * out_h * out_w];
        let dst = &mut gx.data_mut()[p * h * w..(p + 1) * h * w];
        for (i, ty) in ys.iter().enumerate() {
            let fy = R::of(ty.frac);
            for (j, tx) in xs.iter().enumerate() {
                let fx = R::of(tx.frac);
                let g = src[i * out_w + j];
                dst[ty.lo * w + tx.lo] += g * (one - fy) * (one - fx);
                dst[ty.lo * w + tx.hi] += g * (one - fy) * fx;
                dst[ty.hi * w + tx.lo] += g * fy * (one - fx);
                dst[ty.hi * w + tx.hi] += g * fy * fx;
            }
        }
    }
    gx
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn pools_on_known_block() {
        let x = Tensor::<f64>::new(&[1, 1, 2, 4], vec![1.0, 5.0, -1.0, -2.0, 3.0, 2.0, -4.0, -3.0]).unwrap();
        let (m, arg) = max_pool2(&x).unwrap();
        assert_eq!(m.data(), &[5.0, -1.0]);
        assert_eq!(arg, vec![1, 2]);
        let a = avg_pool2(&x).unwrap();
        assert_eq!(a.data(), &[2.75, -2.5]);
    }

    #[test]
    fn resize_to_same_size_is_identity() {
        let x = Tensor::<f64>::from_fn(&[1, 2, 3, 5], |i| i as f64 * 0.3);
        let y = resize_bilinear(&x, 3, 5).unwrap();
        assert_eq!(x, y);
    }

    #[test]
    fn resize_adjoint_identity() {
        // <resize(x), g> == <x, resize^T(g)>
        let x = Tensor::<f64>::from_fn(&[1, 1, 4, 3], |i| (i as f64).cos());
        let g = Tensor::<f64>::from_fn(&[1, 1, 7, 9], |i| (i as f64 * 0.7).sin());
        let y = resize_bilinear(&x, 7, 9).unwrap();
        let gx = resize_bilinear_backward(x.shape(), &g);
        let lhs: f64 = y.data().iter().zip(g.data()).map(|(a, b)| a * b).sum();
        let rhs: f64 = x.data().iter().zip(gx.data()).map(|(a, b)| a * b).sum();
        assert!((lhs - rhs).abs() < 1e-12);
    }
}
