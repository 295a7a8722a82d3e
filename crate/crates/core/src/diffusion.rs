//! DDPM training objective, the deterministic DDIM map between noise levels,
//! and the two-model bridge that turns a suspect image into its
//! genuine-domain reconstruction plus a residual noise pattern.

use rand::Rng;

use crate::denoiser::{DenoiserParams, DomainTag, EpsModel};
use crate::error::{invalid, Result};
use crate::numerics::{AdamConfig, AdamState, Graph, Real, Tensor, Var};
use crate::rng::{normal_tensor, stream};
use crate::schedule::{perturb, NoiseSchedule, TimeStep};

/// Default number of DDIM steps for each leg of the bridge.
pub const DEFAULT_ODE_STEPS: usize = 50;

/// Deterministic encoding of an image at normalized time `u = 1`.
#[derive(Debug, Clone, PartialEq)]
pub struct LatentCode<R> {
    pub tensor: Tensor<R>,
}

/// Elementwise absolute residual between an image and its genuine-domain
/// reconstruction, kept image-shaped.
#[derive(Debug, Clone, PartialEq)]
pub struct NoisePattern<R> {
    map: Tensor<R>,
}

impl<R: Real> NoisePattern<R> {
    pub fn new(map: Tensor<R>) -> Result<Self> {
        if map.data().iter().any(|v| v.is_nan() || *v < R::zero()) {
            return Err(invalid!("noise pattern must be finite and nonnegative"));
        }
        Ok(Self { map })
    }

    /// `|x_s - x_g|` elementwise.
    pub fn between(x_s: &Tensor<R>, x_g: &Tensor<R>) -> Result<Self> {
        Self::new(x_s.zip_map(x_g, |a, b| (a - b).abs())?)
    }

    pub fn map(&self) -> &Tensor<R> {
        &self.map
    }

    pub fn into_map(self) -> Tensor<R> {
        self.map
    }

    /// Scalar energy: mean absolute residual.
    pub fn energy(&self) -> f64 {
        self.map.mean().as_f64()
    }
}

/// Timesteps and noise drawn for one loss evaluation.
pub struct DdpmDraw<R> {
    pub t: Vec<usize>,
    pub eps: Tensor<R>,
    pub x_t: Tensor<R>,
}

/// Draws `t ~ U{1..T}` and standard-normal noise per image from `seed`,
/// then perturbs each image accordingly.
pub fn ddpm_draw<R: Real>(images: &[Tensor<R>], schedule: &NoiseSchedule, seed: u64) -> Result<DdpmDraw<R>> {
    let Some(first) = images.first() else {
        return Err(invalid!("ddpm_loss needs a nonempty batch"));
    };
    if first.rank() != 3 {
        return Err(invalid!("expected [C,H,W] images, got {:?}", first.shape()));
    }
    let mut rng = stream(seed, "ddpm_loss", 0);
    let mut t = Vec::with_capacity(images.len());
    let mut eps = Vec::with_capacity(images.len());
    let mut x_t = Vec::with_capacity(images.len());
    for x0 in images {
        let ti = rng.random_range(1..=schedule.steps());
        let e = normal_tensor::<R>(&mut rng, first.shape());
        x_t.push(perturb(x0, TimeStep(ti), &e, schedule)?);
        t.push(ti);
        eps.push(e);
    }
    Ok(DdpmDraw {
        t,
        eps: Tensor::stack(&eps)?,
        x_t: Tensor::stack(&x_t)?,
    })
}

/// Mean squared error between predicted and true noise over a batch of
/// `[C,H,W]` images.
pub fn ddpm_loss<R: Real, M: EpsModel<R> + ?Sized>(
    model: &M,
    images: &[Tensor<R>],
    schedule: &NoiseSchedule,
    seed: u64,
) -> Result<f64> {
    let draw = ddpm_draw(images, schedule, seed)?;
    let pred = model.predict_batch(&draw.x_t, &draw.t)?;
    mse(&pred, &draw.eps)
}

/// Differentiable form of [`ddpm_loss`]: `predict` builds the noise
/// prediction for the drawn `x_t` on `g`.
pub fn ddpm_loss_graph<R: Real>(
    g: &mut Graph<R>,
    images: &[Tensor<R>],
    schedule: &NoiseSchedule,
    seed: u64,
    predict: impl FnOnce(&mut Graph<R>, Var, &[usize]) -> Result<Var>,
) -> Result<Var> {
    let draw = ddpm_draw(images, schedule, seed)?;
    let x = g.input(draw.x_t);
    let eps = g.input(draw.eps);
    let pred = predict(g, x, &draw.t)?;
    let diff = g.sub(pred, eps)?;
    let sq = g.square(diff);
    Ok(g.mean(sq))
}

/// Discrete times visited when integrating from `u0` to `u1` in `steps` steps.
///
/// Steps are clamped to the number of distinct timesteps in the interval.
pub fn ode_times(schedule: &NoiseSchedule, u0: f64, u1: f64, steps: usize) -> Result<Vec<usize>> {
    if steps == 0 {
        return Err(invalid!("ode_map needs at least one step"));
    }
    let (t0, t1) = (schedule.index_of(u0)?, schedule.index_of(u1)?);
    if t0 == t1 {
        return Err(invalid!("ode_map endpoints u0 = {u0} and u1 = {u1} coincide"));
    }
    let span = t0.abs_diff(t1);
    let steps = if steps > span {
        log::warn!("clamping {steps} ODE steps to the {span} available timesteps");
        span
    } else {
        steps
    };
    let (a, b) = (t0 as f64, t1 as f64);
    Ok((0..=steps)
        .map(|i| (a + (b - a) * i as f64 / steps as f64).round() as usize)
        .collect())
}

/// Deterministic DDIM integration of a batch `[B,C,H,W]` from `u0` to `u1`.
pub fn ode_map_batch<R: Real, M: EpsModel<R> + ?Sized>(
    x: &Tensor<R>,
    model: &M,
    schedule: &NoiseSchedule,
    u0: f64,
    u1: f64,
    steps: usize,
) -> Result<Tensor<R>> {
    if x.rank() != 4 {
        return Err(invalid!("expected a [B,C,H,W] batch, got {:?}", x.shape()));
    }
    let times = ode_times(schedule, u0, u1, steps)?;
    let n = x.shape()[0];
    let mut x = x.clone();
    for pair in times.windows(2) {
        let (t, t_next) = (pair[0], pair[1]);
        let eps = model.predict_batch(&x, &vec![t; n])?;
        let ab = schedule.alpha_bar(t);
        let ab_next = schedule.alpha_bar(t_next);
        let (inv_sa, s1a) = (1.0 / ab.sqrt(), (1.0 - ab).sqrt());
        let (sa_next, s1a_next) = (ab_next.sqrt(), (1.0 - ab_next).sqrt());
        x = x.zip_map(&eps, |xv, e| {
            let (xv, e) = (xv.as_f64(), e.as_f64());
            let x0 = (xv - s1a * e) * inv_sa;
            R::of(sa_next * x0 + s1a_next * e)
        })?;
    }
    Ok(x)
}

/// Single-image form of [`ode_map_batch`] for `x: [C,H,W]`.
pub fn ode_map<R: Real, M: EpsModel<R> + ?Sized>(
    x: &Tensor<R>,
    model: &M,
    schedule: &NoiseSchedule,
    u0: f64,
    u1: f64,
    steps: usize,
) -> Result<Tensor<R>> {
    if x.rank() != 3 {
        return Err(invalid!("expected [C,H,W], got {:?}", x.shape()));
    }
    ode_map_batch(&x.clone().unsqueeze0(), model, schedule, u0, u1, steps)?.index0(0)
}

/// Encodes images to their latent under `model` (`u: 0 -> 1`).
pub fn encode<R: Real>(x: &Tensor<R>, model: &DenoiserParams<R>, schedule: &NoiseSchedule, steps: usize) -> Result<LatentCode<R>> {
    Ok(LatentCode {
        tensor: ode_map_batch(x, model, schedule, 0.0, 1.0, steps)?,
    })
}

fn check_roles<R>(spoof: &DenoiserParams<R>, genuine: &DenoiserParams<R>) -> Result<()> {
    if spoof.domain_tag != DomainTag::SpoofUnion {
        return Err(invalid!(
            "source model must be tagged spoof_union, got {}",
            spoof.domain_tag.as_str()
        ));
    }
    if genuine.domain_tag != DomainTag::GenuineOnly {
        return Err(invalid!(
            "target model must be tagged genuine_only, got {}",
            genuine.domain_tag.as_str()
        ));
    }
    Ok(())
}

/// Bridges a batch `[B,C,H,W]` through the latent of the spoof-domain model
/// and back down the genuine-domain model. Returns the clamped
/// reconstructions and per-sample noise patterns.
pub fn despoof_batch<R: Real>(
    x_s: &Tensor<R>,
    spoof: &DenoiserParams<R>,
    genuine: &DenoiserParams<R>,
    schedule: &NoiseSchedule,
    steps: usize,
) -> Result<(Tensor<R>, Vec<NoisePattern<R>>)> {
    check_roles(spoof, genuine)?;
    bridge(x_s, spoof, genuine, schedule, steps)
}

fn bridge<R: Real, M: EpsModel<R> + ?Sized>(
    x_s: &Tensor<R>,
    source: &M,
    target: &M,
    schedule: &NoiseSchedule,
    steps: usize,
) -> Result<(Tensor<R>, Vec<NoisePattern<R>>)> {
    let latent = ode_map_batch(x_s, source, schedule, 0.0, 1.0, steps)?;
    let (lo, hi) = (-R::one(), R::one());
    let x_g = ode_map_batch(&latent, target, schedule, 1.0, 0.0, steps)?.map(|v| v.max(lo).min(hi));
    let noise = (0..x_s.shape()[0])
        .map(|i| NoisePattern::between(&x_s.index0(i)?, &x_g.index0(i)?))
        .collect::<Result<_>>()?;
    Ok((x_g, noise))
}

/// Single-image de-spoofing of `x_s: [C,H,W]`.
pub fn despoof<R: Real>(
    x_s: &Tensor<R>,
    spoof: &DenoiserParams<R>,
    genuine: &DenoiserParams<R>,
    schedule: &NoiseSchedule,
    steps: usize,
) -> Result<(Tensor<R>, NoisePattern<R>)> {
    if x_s.rank() != 3 {
        return Err(invalid!("expected [C,H,W], got {:?}", x_s.shape()));
    }
    let (x_g, mut noise) = despoof_batch(&x_s.clone().unsqueeze0(), spoof, genuine, schedule, steps)?;
    Ok((x_g.index0(0)?, noise.remove(0)))
}

/// Same-model bridge: encode and decode with one network. Used to measure
/// reconstruction fidelity and as the degenerate bridge.
pub fn round_trip<R: Real, M: EpsModel<R> + ?Sized>(
    x: &Tensor<R>,
    model: &M,
    schedule: &NoiseSchedule,
    steps: usize,
) -> Result<Tensor<R>> {
    let latent = ode_map_batch(x, model, schedule, 0.0, 1.0, steps)?;
    ode_map_batch(&latent, model, schedule, 1.0, 0.0, steps)
}

/// Per-pixel mean squared error between two equally shaped tensors.
pub fn mse<R: Real>(a: &Tensor<R>, b: &Tensor<R>) -> Result<f64> {
    a.expect_same_shape(b)?;
    let s: f64 = a
        .data()
        .iter()
        .zip(b.data())
        .map(|(x, y)| {
            let d = x.as_f64() - y.as_f64();
            d * d
        })
        .sum();
    Ok(s / a.numel() as f64)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DiffusionTrainConfig {
    pub max_steps: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub weight_decay: f64,
    /// Round-trip check interval in optimizer steps; 0 disables early stopping.
    pub eval_every: usize,
    /// Stop once the held-out round-trip MSE falls below this.
    pub target_round_trip_mse: f64,
    pub ode_steps: usize,
    /// Decay of the weight moving average returned as the trained model;
    /// 0 returns the raw optimizer weights.
    pub ema_decay: f64,
    pub seed: u64,
}

impl Default for DiffusionTrainConfig {
    fn default() -> Self {
        Self {
            max_steps: 1500,
            batch_size: 16,
            learning_rate: 1e-3,
            weight_decay: 0.0,
            eval_every: 250,
            target_round_trip_mse: 0.004,
            ode_steps: DEFAULT_ODE_STEPS,
            ema_decay: 0.999,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TrainRecord {
    pub step: usize,
    pub loss: f64,
    pub round_trip_mse: Option<f64>,
}

/// Trains `params` on `data: [N,C,H,W]` with Adam, checking round-trip MSE on
/// `holdout` every `eval_every` steps and stopping early once it reaches the
/// target. `on_record` sees every logged step.
pub fn train_diffusion(
    params: &DenoiserParams<f32>,
    data: &Tensor<f32>,
    holdout: Option<&Tensor<f32>>,
    schedule: &NoiseSchedule,
    cfg: &DiffusionTrainConfig,
    mut on_record: impl FnMut(&TrainRecord),
) -> Result<(DenoiserParams<f32>, Vec<TrainRecord>)> {
    if data.rank() != 4 || data.shape()[0] == 0 {
        return Err(invalid!("training data must be a nonempty [N,C,H,W] batch"));
    }
    if cfg.batch_size == 0 {
        return Err(invalid!("batch size must be positive"));
    }
    let adam = AdamConfig {
        learning_rate: cfg.learning_rate,
        weight_decay: cfg.weight_decay,
        ..AdamConfig::default()
    };
    let mut params = params.clone();
    if !(0.0..1.0).contains(&cfg.ema_decay) {
        return Err(invalid!("ema decay must lie in [0, 1), got {}", cfg.ema_decay));
    }
    let mut states: Vec<AdamState<f32>> = params.layers.iter().map(|(_, t)| AdamState::new(t.shape(), adam)).collect();
    let mut ema = params.clone();
    let mut log = Vec::new();
    let n = data.shape()[0];
    for step in 1..=cfg.max_steps {
        let mut rng = stream(cfg.seed, "diffusion.batch", step as u64);
        let items = (0..cfg.batch_size)
            .map(|_| data.index0(rng.random_range(0..n)))
            .collect::<Result<Vec<_>>>()?;
        let mut g = Graph::new();
        let vars = params.bind(&mut g, true);
        let loss_seed = rng.random::<u64>();
        let loss = ddpm_loss_graph(&mut g, &items, schedule, loss_seed, |g, x, t| params.forward(g, &vars, x, t))?;
        let loss_value = g.value(loss).item().as_f64();
        if !loss_value.is_finite() {
            return Err(crate::Error::Numeric(format!("diffusion loss diverged at step {step}")));
        }
        let mut grads = g.backward(loss)?;
        for ((p, v), st) in params.layers.tensors_mut().zip(&vars).zip(&mut states) {
            let gr = grads.take(*v).unwrap_or_else(|| Tensor::zeros(p.shape()));
            st.step(p, &gr)?;
        }
        // Warm-up keeps the average from clinging to the initialization.
        let decay = cfg.ema_decay.min((1 + step) as f64 / (10 + step) as f64) as f32;
        for (e, p) in ema.layers.tensors_mut().zip(params.layers.iter().map(|(_, t)| t)) {
            for (a, b) in e.data_mut().iter_mut().zip(p.data()) {
                *a = decay * *a + (1.0 - decay) * b;
            }
        }
        let mut record = TrainRecord {
            step,
            loss: loss_value,
            round_trip_mse: None,
        };
        let check = cfg.eval_every > 0 && (step % cfg.eval_every == 0 || step == cfg.max_steps);
        let mut done = false;
        if let (true, Some(h)) = (check, holdout) {
            let rt = mse(&round_trip(h, &ema, schedule, cfg.ode_steps)?, h)?;
            record.round_trip_mse = Some(rt);
            done = rt < cfg.target_round_trip_mse;
        }
        on_record(&record);
        log.push(record);
        if done {
            break;
        }
    }
    Ok((ema, log))
}
