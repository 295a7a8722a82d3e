use super::{Real, Tensor};
use crate::error::{invalid, Result};

/// Adam hyperparameters.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdamConfig {
    pub learning_rate: f64,
    pub weight_decay: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            learning_rate: 1e-4,
            weight_decay: 5e-5,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
        }
    }
}

/// Per-tensor Adam moments.
///
/// Weight decay is coupled: it is added to the gradient (`g + wd * p`)
/// before the moment updates.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamState<R> {
    pub step_count: u64,
    pub first_moment: Tensor<R>,
    pub second_moment: Tensor<R>,
    pub config: AdamConfig,
}

impl<R: Real> AdamState<R> {
    pub fn new(shape: &[usize], config: AdamConfig) -> Self {
        Self {
            step_count: 0,
            first_moment: Tensor::zeros(shape),
            second_moment: Tensor::zeros(shape),
            config,
        }
    }

    /// In-place update of `params`.
    pub fn step(&mut self, params: &mut Tensor<R>, grads: &Tensor<R>) -> Result<()> {
        params.expect_same_shape(grads)?;
        if self.first_moment.shape() != params.shape() {
            return Err(invalid!(
                "optimizer state tracks {:?}, parameters are {:?}",
                self.first_moment.shape(),
                params.shape()
            ));
        }
        self.step_count += 1;
        let c = self.config;
        let t = self.step_count as i32;
        let (b1, b2) = (R::of(c.beta1), R::of(c.beta2));
        let (one, wd, eps) = (R::one(), R::of(c.weight_decay), R::of(c.epsilon));
        let bc1 = R::of(1.0 - c.beta1.powi(t));
        let bc2 = R::of(1.0 - c.beta2.powi(t));
        let lr = R::of(c.learning_rate);
        let m = self.first_moment.data_mut();
        let v = self.second_moment.data_mut();
        for (i, (p, &g)) in params.data_mut().iter_mut().zip(grads.data()).enumerate() {
            let g = g + wd * *p;
            m[i] = b1 * m[i] + (one - b1) * g;
            v[i] = b2 * v[i] + (one - b2) * g * g;
            let m_hat = m[i] / bc1;
            let v_hat = v[i] / bc2;
            *p -= lr * m_hat / (v_hat.sqrt() + eps);
        }
        Ok(())
    }
}

/// Functional Adam update: returns the new parameters and state.
pub fn adam_step<R: Real>(params: &Tensor<R>, grads: &Tensor<R>, state: &AdamState<R>) -> Result<(Tensor<R>, AdamState<R>)> {
    let mut p = params.clone();
    let mut s = state.clone();
    s.step(&mut p, grads)?;
    Ok((p, s))
}
