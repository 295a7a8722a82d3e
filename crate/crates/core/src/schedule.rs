//! Diffusion process constants and the closed-form forward perturbation.

use std::io::{Read, Write};

use crate::error::{invalid, Result};
use crate::numerics::serial::{read_f64, read_u32};
use crate::numerics::{Real, Tensor};

pub const DEFAULT_STEPS: usize = 1000;
pub const DEFAULT_BETA_START: f64 = 1e-4;
pub const DEFAULT_BETA_END: f64 = 0.02;

/// Linear-beta noise schedule over `steps` discrete timesteps.
///
/// Timestep `t` ranges over `0..=steps`; `t = 0` is clean data with
/// `alpha_bar(0) = 1`, and `t >= 1` indexes the stored per-step arrays.
#[derive(Debug, Clone, PartialEq)]
pub struct NoiseSchedule {
    steps: usize,
    beta_start: f64,
    beta_end: f64,
    betas: Vec<f64>,
    alphas: Vec<f64>,
    alpha_bars: Vec<f64>,
}

/// A validated timestep in `0..=T`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct TimeStep(pub(crate) usize);

impl TimeStep {
    pub fn new(t: usize, schedule: &NoiseSchedule) -> Result<Self> {
        if t > schedule.steps {
            return Err(invalid!("timestep {t} exceeds T = {}", schedule.steps));
        }
        Ok(Self(t))
    }

    pub fn get(self) -> usize {
        self.0
    }
}

pub fn build_linear_schedule(steps: usize, beta_start: f64, beta_end: f64) -> Result<NoiseSchedule> {
    if steps == 0 {
        return Err(invalid!("schedule needs at least one step"));
    }
    if !(beta_start > 0.0 && beta_start <= beta_end && beta_end < 1.0) {
        return Err(invalid!(
            "need 0 < beta_start <= beta_end < 1, got {beta_start}..{beta_end}"
        ));
    }
    let betas: Vec<f64> = (0..steps)
        .map(|i| {
            if steps == 1 {
                beta_start
            } else {
                beta_start + (beta_end - beta_start) * i as f64 / (steps - 1) as f64
            }
        })
        .collect();
    let alphas: Vec<f64> = betas.iter().map(|b| 1.0 - b).collect();
    let alpha_bars = alphas
        .iter()
        .scan(1.0, |acc, a| {
            *acc *= a;
            Some(*acc)
        })
        .collect();
    Ok(NoiseSchedule {
        steps,
        beta_start,
        beta_end,
        betas,
        alphas,
        alpha_bars,
    })
}

impl Default for NoiseSchedule {
    fn default() -> Self {
        build_linear_schedule(DEFAULT_STEPS, DEFAULT_BETA_START, DEFAULT_BETA_END)
            .expect("default schedule parameters are valid")
    }
}

impl NoiseSchedule {
    /// Number of diffusion steps `T`.
    pub fn steps(&self) -> usize {
        self.steps
    }

    pub fn beta_start(&self) -> f64 {
        self.beta_start
    }

    pub fn beta_end(&self) -> f64 {
        self.beta_end
    }

    pub fn betas(&self) -> &[f64] {
        &self.betas
    }

    pub fn alphas(&self) -> &[f64] {
        &self.alphas
    }

    pub fn alpha_bars(&self) -> &[f64] {
        &self.alpha_bars
    }

    /// Cumulative signal fraction at timestep `t`; exactly 1 at `t = 0`.
    pub fn alpha_bar(&self, t: usize) -> f64 {
        assert!(t <= self.steps, "timestep {t} exceeds T = {}", self.steps);
        if t == 0 {
            1.0
        } else {
            self.alpha_bars[t - 1]
        }
    }

    /// Maps normalized time `u` in `[0, 1]` to the discrete index `round(u * T)`.
    pub fn index_of(&self, u: f64) -> Result<usize> {
        if !(0.0..=1.0).contains(&u) {
            return Err(invalid!("normalized time {u} outside [0, 1]"));
        }
        Ok((u * self.steps as f64).round() as usize)
    }

    pub fn write_params<W: Write>(&self, w: &mut W) -> Result<()> {
        w.write_all(&(self.steps as u32).to_le_bytes())?;
        w.write_all(&self.beta_start.to_le_bytes())?;
        w.write_all(&self.beta_end.to_le_bytes())?;
        Ok(())
    }

    pub fn read_params<Rd: Read>(r: &mut Rd) -> Result<Self> {
        let steps = read_u32(r)? as usize;
        let beta_start = read_f64(r)?;
        let beta_end = read_f64(r)?;
        build_linear_schedule(steps, beta_start, beta_end)
    }
}

/// `sqrt(alpha_bar_t) * x0 + sqrt(1 - alpha_bar_t) * eps`.
pub fn perturb<R: Real>(x0: &Tensor<R>, t: TimeStep, eps: &Tensor<R>, schedule: &NoiseSchedule) -> Result<Tensor<R>> {
    if t.get() == 0 {
        return Err(invalid!("perturbation is undefined at t = 0"));
    }
    if t.get() > schedule.steps() {
        return Err(invalid!("timestep {} exceeds T = {}", t.get(), schedule.steps()));
    }
    let ab = schedule.alpha_bar(t.get());
    let (a, b) = (R::of(ab.sqrt()), R::of((1.0 - ab).sqrt()));
    x0.zip_map(eps, |x, e| a * x + b * e)
}
