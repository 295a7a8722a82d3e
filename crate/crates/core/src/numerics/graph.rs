//! Tape-based reverse-mode automatic differentiation.
//!
//! Every operation appends a node holding its forward value. Nodes are
//! created in topological order, so [`Graph::backward`] is a single reverse
//! sweep over the tape. Gradients are only propagated into nodes that depend
//! on a parameter registered with [`Graph::param`].

use super::conv::{cdc_kernel, cdc_kernel_backward, conv2d_backward, conv2d_forward};
use super::spatial;
use super::{Real, Tensor};
use crate::error::{invalid, Result};

/// Handle to a node on a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

enum Op<R> {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, R),
    Square(Var),
    BiasAdd(Var, Var),
    ChannelAdd(Var, Var),
    Linear(Var, Var),
    Conv2d { x: Var, w: Var, stride: usize, pad: usize },
    CdcKernel { w: Var, theta: R },
    Relu(Var),
    Silu(Var),
    Sigmoid(Var),
    MaxPool2 { x: Var, argmax: Vec<usize> },
    AvgPool2(Var),
    UpsampleNearest2(Var),
    ResizeBilinear(Var),
    ConcatChannels(Var, Var),
    Mean(Var),
    Reshape(Var),
}

struct Node<R> {
    value: Tensor<R>,
    op: Op<R>,
    needs_grad: bool,
}

#[derive(Default)]
pub struct Graph<R> {
    nodes: Vec<Node<R>>,
}

/// Gradients of a scalar with respect to the parameters of a graph.
pub struct Gradients<R> {
    grads: Vec<Option<Tensor<R>>>,
}

impl<R: Real> Gradients<R> {
    pub fn get(&self, v: Var) -> Option<&Tensor<R>> {
        self.grads.get(v.0).and_then(Option::as_ref)
    }

    /// Gradient of `v`, or zeros shaped like `like` when `v` did not influence the output.
    pub fn get_or_zeros(&self, v: Var, like: &[usize]) -> Tensor<R> {
        self.get(v).cloned().unwrap_or_else(|| Tensor::zeros(like))
    }

    pub fn take(&mut self, v: Var) -> Option<Tensor<R>> {
        self.grads.get_mut(v.0).and_then(Option::take)
    }
}

fn accumulate<R: Real>(grads: &mut [Option<Tensor<R>>], v: Var, g: Tensor<R>) {
    match &mut grads[v.0] {
        Some(acc) => {
            for (a, b) in acc.data_mut().iter_mut().zip(g.data()) {
                *a += *b;
            }
        }
        slot @ None => *slot = Some(g),
    }
}

fn sigmoid<R: Real>(x: R) -> R {
    R::one() / (R::one() + (-x).exp())
}

impl<R: Real> Graph<R> {
    pub fn new() -> Self {
        Self { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor<R>, op: Op<R>, needs_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn needs(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    /// A constant input; no gradient flows into it.
    pub fn input(&mut self, value: Tensor<R>) -> Var {
        self.push(value, Op::Leaf, false)
    }

    /// A differentiable leaf.
    pub fn param(&mut self, value: Tensor<R>) -> Var {
        self.push(value, Op::Leaf, true)
    }

    pub fn value(&self, v: Var) -> &Tensor<R> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    /// Copy of `v` cut off from gradient flow.
    pub fn detach(&mut self, v: Var) -> Var {
        let value = self.value(v).clone();
        self.input(value)
    }

    fn binary(&mut self, a: Var, b: Var, f: impl Fn(R, R) -> R, op: Op<R>) -> Result<Var> {
        let value = self.value(a).zip_map(self.value(b), f)?;
        let needs = self.needs(a) || self.needs(b);
        Ok(self.push(value, op, needs))
    }

    fn unary(&mut self, a: Var, f: impl Fn(R) -> R, op: Op<R>) -> Var {
        let value = self.value(a).map(f);
        let needs = self.needs(a);
        self.push(value, op, needs)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, |x, y| x + y, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, |x, y| x - y, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, |x, y| x * y, Op::Mul(a, b))
    }

    pub fn scale(&mut self, a: Var, c: R) -> Var {
        self.unary(a, |x| x * c, Op::Scale(a, c))
    }

    pub fn square(&mut self, a: Var) -> Var {
        self.unary(a, |x| x * x, Op::Square(a))
    }

    pub fn relu(&mut self, a: Var) -> Var {
        self.unary(a, |x| x.max(R::zero()), Op::Relu(a))
    }

    pub fn silu(&mut self, a: Var) -> Var {
        self.unary(a, |x| x * sigmoid(x), Op::Silu(a))
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        self.unary(a, sigmoid, Op::Sigmoid(a))
    }

    /// Adds `b[c]` to every element of channel `c` of `x: [N,C,...]`.
    pub fn bias_add(&mut self, x: Var, b: Var) -> Result<Var> {
        let xs = self.shape(x);
        let bs = self.shape(b);
        if xs.len() < 2 || bs != [xs[1]] {
            return Err(invalid!("bias {bs:?} does not match channels of {xs:?}"));
        }
        let c = xs[1];
        let inner: usize = xs[2..].iter().product();
        let bias = self.value(b).data().to_vec();
        let mut value = self.value(x).clone();
        for (i, v) in value.data_mut().iter_mut().enumerate() {
            *v += bias[(i / inner) % c];
        }
        let needs = self.needs(x) || self.needs(b);
        Ok(self.push(value, Op::BiasAdd(x, b), needs))
    }

    /// Adds `v[n, c]` to every pixel of sample `n`, channel `c` of `x: [N,C,H,W]`.
    pub fn channel_add(&mut self, x: Var, v: Var) -> Result<Var> {
        let xs = self.shape(x);
        let vs = self.shape(v);
        if xs.len() != 4 || vs != [xs[0], xs[1]] {
            return Err(invalid!("per-sample bias {vs:?} does not match {xs:?}"));
        }
        let hw = xs[2] * xs[3];
        let add = self.value(v).data().to_vec();
        let mut value = self.value(x).clone();
        for (i, e) in value.data_mut().iter_mut().enumerate() {
            *e += add[i / hw];
        }
        let needs = self.needs(x) || self.needs(v);
        Ok(self.push(value, Op::ChannelAdd(x, v), needs))
    }

    /// `x: [N,in]` times `w: [out,in]` transposed.
    pub fn linear(&mut self, x: Var, w: Var) -> Result<Var> {
        let (xs, ws) = (self.shape(x), self.shape(w));
        if xs.len() != 2 || ws.len() != 2 || xs[1] != ws[1] {
            return Err(invalid!("linear: input {xs:?} incompatible with weight {ws:?}"));
        }
        let (n, k, m) = (xs[0], xs[1], ws[0]);
        let mut out = Tensor::zeros(&[n, m]);
        R::gemm(
            n,
            k,
            m,
            R::one(),
            self.value(x).data(),
            (k as isize, 1),
            self.value(w).data(),
            (1, k as isize),
            R::zero(),
            out.data_mut(),
            (m as isize, 1),
        );
        let needs = self.needs(x) || self.needs(w);
        Ok(self.push(out, Op::Linear(x, w), needs))
    }

    /// Zero-padded cross-correlation of `x: [N,Cin,H,W]` with `w: [Cout,Cin,k,k]`.
    pub fn conv2d(&mut self, x: Var, w: Var, stride: usize, pad: usize) -> Result<Var> {
        let value = conv2d_forward(self.value(x), self.value(w), stride, pad)?;
        let needs = self.needs(x) || self.needs(w);
        Ok(self.push(value, Op::Conv2d { x, w, stride, pad }, needs))
    }

    /// Central-difference convolution: `conv(x, w) - theta * x(p0) * sum(w)`,
    /// realised by folding the second term into the kernel's centre tap.
    pub fn cdc2d(&mut self, x: Var, w: Var, theta: R, stride: usize, pad: usize) -> Result<Var> {
        if !(theta >= R::zero() && theta <= R::one()) {
            return Err(invalid!("cdc theta must lie in [0, 1], got {theta}"));
        }
        let folded = cdc_kernel(self.value(w), theta)?;
        let needs = self.needs(w);
        let wk = self.push(folded, Op::CdcKernel { w, theta }, needs);
        self.conv2d(x, wk, stride, pad)
    }

    pub fn max_pool2(&mut self, x: Var) -> Result<Var> {
        let (value, argmax) = spatial::max_pool2(self.value(x))?;
        let needs = self.needs(x);
        Ok(self.push(value, Op::MaxPool2 { x, argmax }, needs))
    }

    pub fn avg_pool2(&mut self, x: Var) -> Result<Var> {
        let value = spatial::avg_pool2(self.value(x))?;
        let needs = self.needs(x);
        Ok(self.push(value, Op::AvgPool2(x), needs))
    }

    pub fn upsample_nearest2(&mut self, x: Var) -> Result<Var> {
        let value = spatial::upsample_nearest2(self.value(x))?;
        let needs = self.needs(x);
        Ok(self.push(value, Op::UpsampleNearest2(x), needs))
    }

    pub fn resize_bilinear(&mut self, x: Var, out_h: usize, out_w: usize) -> Result<Var> {
        let value = spatial::resize_bilinear(self.value(x), out_h, out_w)?;
        let needs = self.needs(x);
        Ok(self.push(value, Op::ResizeBilinear(x), needs))
    }

    /// Concatenates two `[N,C,H,W]` tensors along channels.
    pub fn concat_channels(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa.len() != 4 || sb.len() != 4 || sa[0] != sb[0] || sa[2..] != sb[2..] {
            return Err(invalid!("cannot concatenate {sa:?} with {sb:?}"));
        }
        let (n, ca, cb, hw) = (sa[0], sa[1], sb[1], sa[2] * sa[3]);
        let shape = [n, ca + cb, sa[2], sa[3]];
        let mut data = Vec::with_capacity(n * (ca + cb) * hw);
        for i in 0..n {
            data.extend_from_slice(&self.value(a).data()[i * ca * hw..(i + 1) * ca * hw]);
            data.extend_from_slice(&self.value(b).data()[i * cb * hw..(i + 1) * cb * hw]);
        }
        let needs = self.needs(a) || self.needs(b);
        Ok(self.push(Tensor::new(&shape, data)?, Op::ConcatChannels(a, b), needs))
    }

    /// Same data viewed under a new shape with equal element count.
    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let value = self.value(x).clone().reshape(shape)?;
        let needs = self.needs(x);
        Ok(self.push(value, Op::Reshape(x), needs))
    }

    /// Mean over all elements, as a one-element tensor.
    pub fn mean(&mut self, x: Var) -> Var {
        let m = self.value(x).mean();
        let needs = self.needs(x);
        self.push(Tensor::scalar(m), Op::Mean(x), needs)
    }

    /// Reverse sweep from a one-element `loss`.
    pub fn backward(&self, loss: Var) -> Result<Gradients<R>> {
        if self.value(loss).numel() != 1 {
            return Err(invalid!(
                "backward needs a scalar, got {:?}",
                self.shape(loss)
            ));
        }
        let mut grads: Vec<Option<Tensor<R>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::full(self.shape(loss), R::one()));
        for i in (0..=loss.0).rev() {
            let node = &self.nodes[i];
            if !node.needs_grad || matches!(node.op, Op::Leaf) {
                continue;
            }
            let Some(g) = grads[i].take() else {
                continue;
            };
            self.propagate(node, &g, &mut grads)?;
        }
        Ok(Gradients { grads })
    }

    fn propagate(&self, node: &Node<R>, g: &Tensor<R>, grads: &mut [Option<Tensor<R>>]) -> Result<()> {
        let val = |v: Var| &self.nodes[v.0].value;
        match &node.op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                if self.needs(*a) {
                    accumulate(grads, *a, g.clone());
                }
                if self.needs(*b) {
                    accumulate(grads, *b, g.clone());
                }
            }
            Op::Sub(a, b) => {
                if self.needs(*a) {
                    accumulate(grads, *a, g.clone());
                }
                if self.needs(*b) {
                    accumulate(grads, *b, g.map(|x| -x));
                }
            }
            Op::Mul(a, b) => {
                if self.needs(*a) {
                    accumulate(grads, *a, g.zip_map(val(*b), |g, y| g * y)?);
                }
                if self.needs(*b) {
                    accumulate(grads, *b, g.zip_map(val(*a), |g, x| g * x)?);
                }
            }
            Op::Reshape(a) => {
                accumulate(grads, *a, g.clone().reshape(val(*a).shape())?);
            }
            Op::Scale(a, c) => {
                let c = *c;
                accumulate(grads, *a, g.map(|x| x * c));
            }
            Op::Square(a) => {
                let two = R::of(2.0);
                accumulate(grads, *a, g.zip_map(val(*a), |g, x| two * g * x)?);
            }
            Op::Relu(a) => {
                accumulate(
                    grads,
                    *a,
                    g.zip_map(val(*a), |g, x| if x > R::zero() { g } else { R::zero() })?,
                );
            }
            Op::Silu(a) => {
                accumulate(
                    grads,
                    *a,
                    g.zip_map(val(*a), |g, x| {
                        let s = sigmoid(x);
                        g * s * (R::one() + x * (R::one() - s))
                    })?,
                );
            }
            Op::Sigmoid(a) => {
                accumulate(
                    grads,
                    *a,
                    g.zip_map(&node.value, |g, s| g * s * (R::one() - s))?,
                );
            }
            Op::BiasAdd(x, b) => {
                if self.needs(*x) {
                    accumulate(grads, *x, g.clone());
                }
                if self.needs(*b) {
                    let xs = g.shape();
                    let c = xs[1];
                    let inner: usize = xs[2..].iter().product();
                    let mut gb = Tensor::zeros(&[c]);
                    for (i, &e) in g.data().iter().enumerate() {
                        gb.data_mut()[(i / inner) % c] += e;
                    }
                    accumulate(grads, *b, gb);
                }
            }
            Op::ChannelAdd(x, v) => {
                if self.needs(*x) {
                    accumulate(grads, *x, g.clone());
                }
                if self.needs(*v) {
                    let s = g.shape();
                    let hw = s[2] * s[3];
                    let mut gv = Tensor::zeros(&[s[0], s[1]]);
                    for (slot, chunk) in gv.data_mut().iter_mut().zip(g.data().chunks_exact(hw)) {
                        *slot = chunk.iter().copied().sum();
                    }
                    accumulate(grads, *v, gv);
                }
            }
            Op::Linear(x, w) => {
                let (xv, wv) = (val(*x), val(*w));
                let (n, k, m) = (xv.shape()[0], xv.shape()[1], wv.shape()[0]);
                if self.needs(*x) {
                    // gx[n,k] = g[n,m] w[m,k]
                    let mut gx = Tensor::zeros(xv.shape());
                    R::gemm(n, m, k, R::one(), g.data(), (m as isize, 1), wv.data(), (k as isize, 1), R::zero(), gx.data_mut(), (k as isize, 1));
                    accumulate(grads, *x, gx);
                }
                if self.needs(*w) {
                    // gw[m,k] = g^T[m,n] x[n,k]
                    let mut gw = Tensor::zeros(wv.shape());
                    R::gemm(m, n, k, R::one(), g.data(), (1, m as isize), xv.data(), (k as isize, 1), R::zero(), gw.data_mut(), (k as isize, 1));
                    accumulate(grads, *w, gw);
                }
            }
            Op::Conv2d { x, w, stride, pad } => {
                let (gx, gw) = conv2d_backward(val(*x), val(*w), g, *stride, *pad, self.needs(*x), self.needs(*w))?;
                if let Some(gx) = gx {
                    accumulate(grads, *x, gx);
                }
                if let Some(gw) = gw {
                    accumulate(grads, *w, gw);
                }
            }
            Op::CdcKernel { w, theta } => {
                accumulate(grads, *w, cdc_kernel_backward(g, *theta));
            }
            Op::MaxPool2 { x, argmax } => {
                accumulate(grads, *x, spatial::max_pool2_backward(val(*x).shape(), argmax, g));
            }
            Op::AvgPool2(x) => {
                accumulate(grads, *x, spatial::avg_pool2_backward(val(*x).shape(), g));
            }
            Op::UpsampleNearest2(x) => {
                accumulate(grads, *x, spatial::upsample_nearest2_backward(val(*x).shape(), g));
            }
            Op::ResizeBilinear(x) => {
                accumulate(grads, *x, spatial::resize_bilinear_backward(val(*x).shape(), g));
            }
            Op::ConcatChannels(a, b) => {
                let (sa, sb) = (val(*a).shape(), val(*b).shape());
                let (n, ca, cb, hw) = (sa[0], sa[1], sb[1], sa[2] * sa[3]);
                let mut ga = Vec::with_capacity(n * ca * hw);
                let mut gb = Vec::with_capacity(n * cb * hw);
                for chunk in g.data().chunks_exact((ca + cb) * hw) {
                    ga.extend_from_slice(&chunk[..ca * hw]);
                    gb.extend_from_slice(&chunk[ca * hw..]);
                }
                if self.needs(*a) {
                    accumulate(grads, *a, Tensor::new(sa, ga)?);
                }
                if self.needs(*b) {
                    accumulate(grads, *b, Tensor::new(sb, gb)?);
                }
            }
            Op::Mean(x) => {
                let xs = val(*x);
                let scale = g.item() / R::of(xs.numel() as f64);
                accumulate(grads, *x, Tensor::full(xs.shape(), scale));
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn gradient_accumulates_over_reuse() {
        // loss = mean(a * a) with a used twice => d/da = 2a / n
        let mut g = Graph::<f64>::new();
        let a = g.param(Tensor::new(&[2], vec![1.5, -3.0]).unwrap());
        let sq = g.mul(a, a).unwrap();
        let loss = g.mean(sq);
        let grads = g.backward(loss).unwrap();
        assert_eq!(grads.get(a).unwrap().data(), &[1.5, -3.0]);
    }

    #[test]
    fn constants_receive_no_gradient() {
        let mut g = Graph::<f64>::new();
        let c = g.input(Tensor::full(&[3], 2.0));
        let p = g.param(Tensor::full(&[3], 1.0));
        let y = g.mul(c, p).unwrap();
        let loss = g.mean(y);
        let grads = g.backward(loss).unwrap();
        assert!(grads.get(c).is_none());
        assert!(grads.get(p).is_some());
    }

    #[test]
    fn backward_requires_scalar() {
        let mut g = Graph::<f64>::new();
        let p = g.param(Tensor::full(&[3], 1.0));
        assert!(g.backward(p).is_err());
    }

    #[test]
    fn detach_blocks_gradient() {
        let mut g = Graph::<f64>::new();
        let p = g.param(Tensor::full(&[2], 3.0));
        let d = g.detach(p);
        let y = g.mul(p, d).unwrap();
        let loss = g.mean(y);
        let grads = g.backward(loss).unwrap();
        // only the non-detached factor contributes: d/dp = d / n
        assert_eq!(grads.get(p).unwrap().data(), &[1.5, 1.5]);
    }
}
