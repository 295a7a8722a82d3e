//! Minimal differentiable numeric core.

mod adam;
mod conv;
mod gradcheck;
mod graph;
mod real;
pub mod serial;
pub(crate) mod spatial;
mod tensor;

pub use adam::{adam_step, AdamConfig, AdamState};
pub use gradcheck::{finite_diff_grad, max_relative_error};
pub use graph::{Gradients, Graph, Var};
pub use real::Real;
pub use tensor::Tensor;

use crate::error::{invalid, Result};

fn batched(input: &Tensor<impl Real>) -> Result<()> {
    if input.rank() != 3 {
        return Err(invalid!("expected [C,H,W] input, got {:?}", input.shape()));
    }
    Ok(())
}

/// Zero-padded cross-correlation of a single `[C_in,H,W]` image.
pub fn conv2d<R: Real>(input: &Tensor<R>, kernel: &Tensor<R>, stride: usize, padding: usize) -> Result<Tensor<R>> {
    batched(input)?;
    let out = conv::conv2d_forward(&input.clone().unsqueeze0(), kernel, stride, padding)?;
    out.index0(0)
}

/// Central-difference convolution of a single `[C_in,H,W]` image:
/// `y(p0) = sum_n w(pn) x(p0+pn) - theta * x(p0) * sum_n w(pn)`.
pub fn cdc2d<R: Real>(input: &Tensor<R>, kernel: &Tensor<R>, theta: R, stride: usize, padding: usize) -> Result<Tensor<R>> {
    batched(input)?;
    if !(theta >= R::zero() && theta <= R::one()) {
        return Err(invalid!("cdc theta must lie in [0, 1], got {theta}"));
    }
    let folded = conv::cdc_kernel(kernel, theta)?;
    conv2d(input, &folded, stride, padding)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random(shape: &[usize], seed: u64) -> Tensor<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Tensor::from_fn(shape, |_| rng.random_range(-1.0..1.0))
    }

    /// Direct double loop over output pixels and kernel taps.
    fn naive_cdc(x: &Tensor<f64>, w: &Tensor<f64>, theta: f64, pad: usize) -> Tensor<f64> {
        let (c_in, h, wd) = (x.shape()[0], x.shape()[1], x.shape()[2]);
        let (c_out, k) = (w.shape()[0], w.shape()[2]);
        let (ho, wo) = (h + 2 * pad - k + 1, wd + 2 * pad - k + 1);
        let r = (k / 2) as isize;
        let at = |c: usize, i: isize, j: isize| -> f64 {
            if i < 0 || j < 0 || i >= h as isize || j >= wd as isize {
                0.0
            } else {
                x.data()[(c * h + i as usize) * wd + j as usize]
            }
        };
        Tensor::from_fn(&[c_out, ho, wo], |idx| {
            let o = idx / (ho * wo);
            let (i, j) = ((idx % (ho * wo)) / wo, idx % wo);
            let (ci, cj) = ((i + k / 2) as isize - pad as isize, (j + k / 2) as isize - pad as isize);
            let mut vanilla = 0.0;
            let mut centre = 0.0;
            for c in 0..c_in {
                let mut wsum = 0.0;
                for a in -r..=r {
                    for b in -r..=r {
                        let wv = w.data()[((o * c_in + c) * k + (a + r) as usize) * k + (b + r) as usize];
                        vanilla += wv * at(c, ci + a, cj + b);
                        wsum += wv;
                    }
                }
                centre += at(c, ci, cj) * wsum;
            }
            vanilla - theta * centre
        })
    }

    #[test]
    fn identity_kernel_is_identity() {
        let x = random(&[1, 5, 4], 1);
        let k = Tensor::new(&[1, 1, 1, 1], vec![1.0]).unwrap();
        assert_eq!(conv2d(&x, &k, 1, 0).unwrap(), x);
    }

    #[test]
    fn constant_input_sums_kernel() {
        let x = Tensor::full(&[2, 6, 6], 1.5);
        let k = random(&[3, 2, 3, 3], 2);
        let y = conv2d(&x, &k, 1, 0).unwrap();
        for o in 0..3 {
            let wsum: f64 = k.data()[o * 18..(o + 1) * 18].iter().sum();
            for v in &y.data()[o * 16..(o + 1) * 16] {
                assert!((v - 1.5 * wsum).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn cdc_with_zero_theta_is_bitwise_conv() {
        let x = random(&[3, 8, 8], 3);
        let k = random(&[4, 3, 3, 3], 4);
        for (stride, pad) in [(1, 1), (2, 1), (1, 0)] {
            let a = conv2d(&x, &k, stride, pad).unwrap();
            let b = cdc2d(&x, &k, 0.0, stride, pad).unwrap();
            assert!(a.data().iter().zip(b.data()).all(|(p, q)| p.to_bits() == q.to_bits()));
        }
    }

    #[test]
    fn cdc_on_constant_input_scales_by_one_minus_theta() {
        let x = Tensor::full(&[1, 7, 7], -0.8);
        let k = random(&[1, 1, 3, 3], 5);
        let wsum: f64 = k.data().iter().sum();
        for theta in [0.0, 0.3, 0.7, 1.0] {
            let y = cdc2d(&x, &k, theta, 1, 0).unwrap();
            for v in y.data() {
                assert!((v - (1.0 - theta) * -0.8 * wsum).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn cdc_matches_naive_loop() {
        let x = random(&[2, 6, 5], 6);
        let k = random(&[3, 2, 3, 3], 7);
        for pad in [0, 1] {
            let fast = cdc2d(&x, &k, 0.7, 1, pad).unwrap();
            let slow = naive_cdc(&x, &k, 0.7, pad);
            assert_eq!(fast.shape(), slow.shape());
            for (a, b) in fast.data().iter().zip(slow.data()) {
                assert!((a - b).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn cdc_rejects_theta_outside_unit_interval() {
        let x = random(&[1, 4, 4], 8);
        let k = random(&[1, 1, 3, 3], 9);
        assert!(cdc2d(&x, &k, 1.5, 1, 1).is_err());
        assert!(cdc2d(&x, &k, -0.1, 1, 1).is_err());
    }

    fn check_conv_gradients(cdc_theta: Option<f64>) {
        let x0 = random(&[1, 1, 5, 5], 10);
        let w0 = random(&[1, 1, 3, 3], 11);
        let probe = random(&[1, 1, 5, 5], 12);
        let loss = |x: &Tensor<f64>, w: &Tensor<f64>, backprop: bool| {
            let mut g = Graph::new();
            let xv = g.param(x.clone());
            let wv = g.param(w.clone());
            let y = match cdc_theta {
                Some(t) => g.cdc2d(xv, wv, t, 1, 1).unwrap(),
                None => g.conv2d(xv, wv, 1, 1).unwrap(),
            };
            let p = g.input(probe.clone());
            let yp = g.mul(y, p).unwrap();
            let sq = g.square(yp);
            let l = g.mean(sq);
            let value = g.value(l).item();
            let grads = backprop.then(|| {
                let gr = g.backward(l).unwrap();
                (gr.get(xv).unwrap().clone(), gr.get(wv).unwrap().clone())
            });
            (value, grads)
        };
        let (_, grads) = loss(&x0, &w0, true);
        let (gx, gw) = grads.unwrap();
        let fx = finite_diff_grad(|x| Ok(loss(x, &w0, false).0), &x0, 1e-5).unwrap();
        let fw = finite_diff_grad(|w| Ok(loss(&x0, w, false).0), &w0, 1e-5).unwrap();
        assert!(max_relative_error(&gx, &fx, 1e-8) < 1e-6);
        assert!(max_relative_error(&gw, &fw, 1e-8) < 1e-6);
    }

    #[test]
    fn conv_gradients_match_finite_differences() {
        check_conv_gradients(None);
    }

    #[test]
    fn cdc_gradients_match_finite_differences() {
        check_conv_gradients(Some(0.7));
    }

    proptest! {
        #[test]
        fn output_shape_formula(h in 1usize..12, half_k in 0usize..3, stride in 1usize..4, pad in 0usize..3) {
            let k = 2 * half_k + 1;
            prop_assume!(h + 2 * pad >= k);
            let x = Tensor::<f64>::zeros(&[1, h, h + 1]);
            let w = Tensor::<f64>::zeros(&[2, 1, k, k]);
            let y = conv2d(&x, &w, stride, pad).unwrap();
            prop_assert_eq!(y.shape(), &[2, (h + 2 * pad - k) / stride + 1, (h + 1 + 2 * pad - k) / stride + 1]);
        }
    }
}
