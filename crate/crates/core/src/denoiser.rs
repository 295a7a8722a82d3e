//! Noise-prediction UNet `eps_theta(x_t, t)`.
//!
//! Encoder/decoder with one residual block per level, average-pool
//! downsampling, nearest-neighbour upsampling and channel-concatenated skip
//! connections. A sinusoidal time embedding passes through a shared SiLU
//! projection, and each residual block adds its own learned per-channel
//! projection of it after the first convolution.

use std::io::{Read, Write};
use std::path::Path;

use rand::Rng;

use crate::checkpoint::{self, read_header, read_u8, write_header, NamedTensors};
use crate::error::{invalid, Error, Result};
use crate::numerics::serial::{read_u32, read_u64};
use crate::numerics::{Graph, Real, Tensor, Var};
use crate::rng;
use crate::schedule::{NoiseSchedule, TimeStep};

pub const DENOISER_MAGIC: &[u8; 4] = b"DSPD";

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct DenoiserConfig {
    pub image_size: usize,
    pub channels: usize,
    pub base_width: usize,
    pub depth_levels: usize,
    pub time_embed_dim: usize,
    pub seed: u64,
}

impl Default for DenoiserConfig {
    fn default() -> Self {
        Self {
            image_size: 32,
            channels: 3,
            base_width: 32,
            depth_levels: 2,
            time_embed_dim: 64,
            seed: 0,
        }
    }
}

impl DenoiserConfig {
    pub fn validate(&self) -> Result<()> {
        if self.image_size == 0
            || self.channels == 0
            || self.base_width == 0
            || self.depth_levels == 0
            || self.time_embed_dim == 0
        {
            return Err(invalid!("denoiser dimensions must be positive: {self:?}"));
        }
        if !self.time_embed_dim.is_multiple_of(2) {
            return Err(invalid!("time embedding dimension must be even"));
        }
        if self.depth_levels >= usize::BITS as usize || !self.image_size.is_multiple_of(1 << self.depth_levels) {
            return Err(invalid!(
                "image size {} not divisible by 2^{}",
                self.image_size,
                self.depth_levels
            ));
        }
        Ok(())
    }

    /// Channel width of encoder level `level`.
    pub fn width(&self, level: usize) -> usize {
        if level == 0 {
            self.base_width
        } else {
            2 * self.base_width
        }
    }
}

/// Which data a denoiser was trained on.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum DomainTag {
    /// Spoof and genuine images together.
    SpoofUnion,
    /// Genuine images only.
    GenuineOnly,
}

impl DomainTag {
    pub fn as_str(self) -> &'static str {
        match self {
            DomainTag::SpoofUnion => "spoof_union",
            DomainTag::GenuineOnly => "genuine_only",
        }
    }

    fn code(self) -> u8 {
        match self {
            DomainTag::SpoofUnion => 0,
            DomainTag::GenuineOnly => 1,
        }
    }

    fn from_code(code: u8) -> Result<Self> {
        match code {
            0 => Ok(DomainTag::SpoofUnion),
            1 => Ok(DomainTag::GenuineOnly),
            other => Err(Error::Format(format!("unknown domain tag {other}"))),
        }
    }
}

impl std::str::FromStr for DomainTag {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "spoof_union" => Ok(DomainTag::SpoofUnion),
            "genuine_only" => Ok(DomainTag::GenuineOnly),
            other => Err(invalid!("unknown domain tag {other:?}")),
        }
    }
}

/// Anything that predicts the noise in a batch `[N,C,H,W]` of noised images
/// given one timestep per sample.
pub trait EpsModel<R: Real> {
    fn predict_batch(&self, x_t: &Tensor<R>, t: &[usize]) -> Result<Tensor<R>>;
}

#[derive(Debug, Clone, PartialEq)]
pub struct DenoiserParams<R> {
    pub config: DenoiserConfig,
    pub domain_tag: DomainTag,
    pub layers: NamedTensors<R>,
}

struct LayerSpec {
    name: String,
    shape: Vec<usize>,
    fan_in: usize,
}

fn conv_spec(out: &mut Vec<LayerSpec>, name: &str, c_in: usize, c_out: usize, k: usize) {
    out.push(LayerSpec {
        name: format!("{name}.w"),
        shape: vec![c_out, c_in, k, k],
        fan_in: c_in * k * k,
    });
    out.push(LayerSpec {
        name: format!("{name}.b"),
        shape: vec![c_out],
        fan_in: 0,
    });
}

fn linear_spec(out: &mut Vec<LayerSpec>, name: &str, d_in: usize, d_out: usize) {
    out.push(LayerSpec {
        name: format!("{name}.w"),
        shape: vec![d_out, d_in],
        fan_in: d_in,
    });
    out.push(LayerSpec {
        name: format!("{name}.b"),
        shape: vec![d_out],
        fan_in: 0,
    });
}

fn res_spec(out: &mut Vec<LayerSpec>, name: &str, c_in: usize, c_out: usize, t_dim: usize) {
    conv_spec(out, &format!("{name}.conv1"), c_in, c_out, 3);
    linear_spec(out, &format!("{name}.temb"), t_dim, c_out);
    conv_spec(out, &format!("{name}.conv2"), c_out, c_out, 3);
    if c_in != c_out {
        conv_spec(out, &format!("{name}.skip"), c_in, c_out, 1);
    }
}

fn layer_specs(c: &DenoiserConfig) -> Vec<LayerSpec> {
    let mut specs = Vec::new();
    let d = c.time_embed_dim;
    linear_spec(&mut specs, "time", d, d);
    conv_spec(&mut specs, "in", c.channels, c.base_width, 3);
    let mut prev = c.base_width;
    for level in 0..c.depth_levels {
        res_spec(&mut specs, &format!("down{level}"), prev, c.width(level), d);
        prev = c.width(level);
    }
    res_spec(&mut specs, "mid", prev, prev, d);
    for level in (0..c.depth_levels).rev() {
        res_spec(&mut specs, &format!("up{level}"), prev + c.width(level), c.width(level), d);
        prev = c.width(level);
    }
    conv_spec(&mut specs, "out", c.base_width, c.channels, 3);
    specs
}

/// Sinusoidal embedding `(sin(t / 10000^(2i/dim)), cos(t / 10000^(2i/dim)))` pairs.
pub fn time_embedding<R: Real>(t: TimeStep, dim: usize) -> Result<Tensor<R>> {
    let values = embedding_values(t.get(), dim)?;
    Tensor::new(&[dim], values.into_iter().map(R::of).collect())
}

fn embedding_values(t: usize, dim: usize) -> Result<Vec<f64>> {
    if dim == 0 || !dim.is_multiple_of(2) {
        return Err(invalid!("time embedding dimension must be even and positive, got {dim}"));
    }
    let mut out = Vec::with_capacity(dim);
    for i in 0..dim / 2 {
        let freq = 10000f64.powf(2.0 * i as f64 / dim as f64);
        let arg = t as f64 / freq;
        out.push(arg.sin());
        out.push(arg.cos());
    }
    Ok(out)
}

/// Deterministic fan-in-scaled uniform initialization; biases start at zero.
pub fn init_denoiser<R: Real>(config: DenoiserConfig, domain_tag: DomainTag) -> Result<DenoiserParams<R>> {
    config.validate()?;
    let mut rng = rng::stream(config.seed, "denoiser.init", 0);
    let mut layers = NamedTensors::new();
    for spec in layer_specs(&config) {
        let t = if spec.fan_in == 0 {
            Tensor::zeros(&spec.shape)
        } else {
            let bound = 1.0 / (spec.fan_in as f64).sqrt();
            Tensor::from_fn(&spec.shape, |_| R::of(rng.random_range(-bound..bound)))
        };
        layers.push(spec.name, t);
    }
    Ok(DenoiserParams {
        config,
        domain_tag,
        layers,
    })
}

struct Bound<'a, R> {
    layers: &'a NamedTensors<R>,
    vars: &'a [Var],
}

impl<R: Real> Bound<'_, R> {
    fn var(&self, name: &str) -> Result<Var> {
        self.layers
            .position(name)
            .map(|i| self.vars[i])
            .ok_or_else(|| Error::Format(format!("missing layer {name}")))
    }

    fn has(&self, name: &str) -> bool {
        self.layers.position(name).is_some()
    }

    fn conv(&self, g: &mut Graph<R>, x: Var, name: &str, pad: usize) -> Result<Var> {
        let y = g.conv2d(x, self.var(&format!("{name}.w"))?, 1, pad)?;
        g.bias_add(y, self.var(&format!("{name}.b"))?)
    }

    fn linear(&self, g: &mut Graph<R>, x: Var, name: &str) -> Result<Var> {
        let y = g.linear(x, self.var(&format!("{name}.w"))?)?;
        g.bias_add(y, self.var(&format!("{name}.b"))?)
    }

    fn res_block(&self, g: &mut Graph<R>, x: Var, temb: Var, name: &str) -> Result<Var> {
        let a = g.silu(x);
        let a = self.conv(g, a, &format!("{name}.conv1"), 1)?;
        let proj = self.linear(g, temb, &format!("{name}.temb"))?;
        let a = g.channel_add(a, proj)?;
        let a = g.silu(a);
        let a = self.conv(g, a, &format!("{name}.conv2"), 1)?;
        let skip_name = format!("{name}.skip");
        let skip = if self.has(&format!("{skip_name}.w")) {
            self.conv(g, x, &skip_name, 0)?
        } else {
            x
        };
        g.add(skip, a)
    }
}

impl<R: Real> DenoiserParams<R> {
    pub fn parameter_count(&self) -> usize {
        self.layers.parameter_count()
    }

    /// Registers every layer on `g`, as differentiable leaves when `trainable`.
    pub fn bind(&self, g: &mut Graph<R>, trainable: bool) -> Vec<Var> {
        self.layers
            .iter()
            .map(|(_, t)| if trainable { g.param(t.clone()) } else { g.input(t.clone()) })
            .collect()
    }

    fn check_input(&self, shape: &[usize], batch: usize) -> Result<()> {
        let c = &self.config;
        if shape.len() != 4 || shape[1] != c.channels || shape[2] != c.image_size || shape[3] != c.image_size {
            return Err(invalid!(
                "denoiser expects [N,{},{},{}], got {shape:?}",
                c.channels,
                c.image_size,
                c.image_size
            ));
        }
        if shape[0] != batch {
            return Err(invalid!("{} timesteps for a batch of {}", batch, shape[0]));
        }
        Ok(())
    }

    /// Noise prediction for `x: [N,C,H,W]` with per-sample timesteps `t`.
    pub fn forward(&self, g: &mut Graph<R>, vars: &[Var], x: Var, t: &[usize]) -> Result<Var> {
        self.forward_with(g, vars, x, t, true)
    }

    fn forward_with(&self, g: &mut Graph<R>, vars: &[Var], x: Var, t: &[usize], use_skips: bool) -> Result<Var> {
        self.check_input(g.shape(x), t.len())?;
        let c = self.config;
        let p = Bound {
            layers: &self.layers,
            vars,
        };
        let d = c.time_embed_dim;
        let mut emb = Vec::with_capacity(t.len() * d);
        for &ti in t {
            emb.extend(embedding_values(ti, d)?.into_iter().map(R::of));
        }
        let emb = g.input(Tensor::new(&[t.len(), d], emb)?);
        let temb = p.linear(g, emb, "time")?;
        let temb = g.silu(temb);

        let mut h = p.conv(g, x, "in", 1)?;
        let mut skips = Vec::with_capacity(c.depth_levels);
        for level in 0..c.depth_levels {
            h = p.res_block(g, h, temb, &format!("down{level}"))?;
            skips.push(h);
            h = g.avg_pool2(h)?;
        }
        h = p.res_block(g, h, temb, "mid")?;
        for level in (0..c.depth_levels).rev() {
            h = g.upsample_nearest2(h)?;
            let skip = if use_skips {
                skips[level]
            } else {
                g.input(Tensor::zeros(g.shape(skips[level])))
            };
            h = g.concat_channels(h, skip)?;
            h = p.res_block(g, h, temb, &format!("up{level}"))?;
        }
        let h = g.silu(h);
        p.conv(g, h, "out", 1)
    }

    fn predict_with(&self, x_t: &Tensor<R>, t: &[usize], use_skips: bool) -> Result<Tensor<R>> {
        let mut g = Graph::new();
        let vars = self.bind(&mut g, false);
        let x = g.input(x_t.clone());
        let y = self.forward_with(&mut g, &vars, x, t, use_skips)?;
        Ok(g.value(y).clone())
    }

    /// `eps_theta(x_t, t)` for a single `[C,H,W]` image.
    pub fn predict_eps(&self, x_t: &Tensor<R>, t: TimeStep) -> Result<Tensor<R>> {
        if x_t.rank() != 3 {
            return Err(invalid!("expected [C,H,W], got {:?}", x_t.shape()));
        }
        self.predict_with(&x_t.clone().unsqueeze0(), &[t.get()], true)?.index0(0)
    }

    pub fn cast<S: Real>(&self) -> DenoiserParams<S> {
        DenoiserParams {
            config: self.config,
            domain_tag: self.domain_tag,
            layers: self.layers.cast(),
        }
    }

    pub fn write_checkpoint<W: Write>(&self, w: &mut W, schedule: &NoiseSchedule) -> Result<()> {
        write_header(w, DENOISER_MAGIC)?;
        let c = &self.config;
        for v in [c.image_size, c.channels, c.base_width, c.depth_levels, c.time_embed_dim] {
            w.write_all(&(v as u32).to_le_bytes())?;
        }
        w.write_all(&c.seed.to_le_bytes())?;
        schedule.write_params(w)?;
        w.write_all(&[self.domain_tag.code()])?;
        self.layers.write(w)
    }

    pub fn read_checkpoint<Rd: Read>(r: &mut Rd) -> Result<(Self, NoiseSchedule)> {
        read_header(r, DENOISER_MAGIC)?;
        let mut dims = [0usize; 5];
        for d in dims.iter_mut() {
            *d = read_u32(r)? as usize;
        }
        let config = DenoiserConfig {
            image_size: dims[0],
            channels: dims[1],
            base_width: dims[2],
            depth_levels: dims[3],
            time_embed_dim: dims[4],
            seed: read_u64(r)?,
        };
        config.validate().map_err(|e| Error::Format(e.to_string()))?;
        let schedule = NoiseSchedule::read_params(r)?;
        let domain_tag = DomainTag::from_code(read_u8(r)?)?;
        let layers = NamedTensors::read(r)?;
        let specs = layer_specs(&config);
        if specs.len() != layers.len()
            || specs
                .iter()
                .zip(layers.iter())
                .any(|(s, (n, t))| s.name != n || s.shape != t.shape())
        {
            return Err(Error::Format("checkpoint layers do not match its config".into()));
        }
        Ok((
            Self {
                config,
                domain_tag,
                layers,
            },
            schedule,
        ))
    }

    pub fn save(&self, path: &Path, schedule: &NoiseSchedule) -> Result<()> {
        checkpoint::save_with(path, |w| self.write_checkpoint(w, schedule))
    }

    pub fn load(path: &Path) -> Result<(Self, NoiseSchedule)> {
        checkpoint::load_with(path, |r| Self::read_checkpoint(r))
    }
}

impl<R: Real> EpsModel<R> for DenoiserParams<R> {
    fn predict_batch(&self, x_t: &Tensor<R>, t: &[usize]) -> Result<Tensor<R>> {
        self.predict_with(x_t, t, true)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::{finite_diff_grad, max_relative_error};
    use crate::rng::{normal_tensor, stream};

    fn tiny() -> DenoiserConfig {
        DenoiserConfig {
            image_size: 8,
            channels: 3,
            base_width: 4,
            depth_levels: 2,
            time_embed_dim: 8,
            seed: 3,
        }
    }

    #[test]
    fn embedding_at_zero_alternates() {
        let e: Tensor<f64> = time_embedding(TimeStep(0), 8).unwrap();
        assert_eq!(e.data(), &[0.0, 1.0, 0.0, 1.0, 0.0, 1.0, 0.0, 1.0]);
    }

    #[test]
    fn embedding_matches_formula_and_is_bounded() {
        let e: Tensor<f64> = time_embedding(TimeStep(7), 4).unwrap();
        let want = [7f64.sin(), 7f64.cos(), (7.0 / 100.0f64).sin(), (7.0 / 100.0f64).cos()];
        for (a, b) in e.data().iter().zip(want) {
            assert!((a - b).abs() < 1e-15);
        }
        let big: Tensor<f64> = time_embedding(TimeStep(999), 64).unwrap();
        assert!(big.data().iter().all(|v| (-1.0..=1.0).contains(v)));
        assert!(time_embedding::<f64>(TimeStep(1), 5).is_err());
    }

    /// Parameter count written out layer by layer for a `(c, w, L=2, D)` net.
    fn hand_count(c: usize, w: usize, d: usize) -> usize {
        let conv = |i: usize, o: usize, k: usize| o * i * k * k + o;
        let lin = |i: usize, o: usize| o * i + o;
        let res = |i: usize, o: usize| conv(i, o, 3) + lin(d, o) + conv(o, o, 3) + if i != o { conv(i, o, 1) } else { 0 };
        lin(d, d)
            + conv(c, w, 3)
            + res(w, w)          // down0
            + res(w, 2 * w)      // down1
            + res(2 * w, 2 * w)  // mid
            + res(4 * w, 2 * w)  // up1: upsampled 2w + skip 2w
            + res(3 * w, w)      // up0: upsampled 2w + skip w
            + conv(w, c, 3)
    }

    #[test]
    fn parameter_count_matches_hand_count() {
        let p: DenoiserParams<f32> = init_denoiser(DenoiserConfig::default(), DomainTag::GenuineOnly).unwrap();
        assert_eq!(p.parameter_count(), hand_count(3, 32, 64));
        assert_eq!(hand_count(3, 32, 64), 331_459);
    }

    #[test]
    fn init_is_seeded() {
        let a: DenoiserParams<f32> = init_denoiser(tiny(), DomainTag::SpoofUnion).unwrap();
        let b: DenoiserParams<f32> = init_denoiser(tiny(), DomainTag::SpoofUnion).unwrap();
        assert_eq!(a, b);
        let c: DenoiserParams<f32> = init_denoiser(DenoiserConfig { seed: 4, ..tiny() }, DomainTag::SpoofUnion).unwrap();
        assert_ne!(a.layers, c.layers);
    }

    #[test]
    fn invalid_configs_are_rejected() {
        for bad in [
            DenoiserConfig { image_size: 10, ..tiny() },
            DenoiserConfig { base_width: 0, ..tiny() },
            DenoiserConfig { time_embed_dim: 7, ..tiny() },
        ] {
            assert!(init_denoiser::<f32>(bad, DomainTag::SpoofUnion).is_err());
        }
    }

    #[test]
    fn prediction_preserves_shape_and_is_deterministic() {
        let p: DenoiserParams<f32> = init_denoiser(DenoiserConfig::default(), DomainTag::SpoofUnion).unwrap();
        let x = normal_tensor::<f32>(&mut stream(1, "x", 0), &[3, 32, 32]);
        let t = TimeStep(500);
        let a = p.predict_eps(&x, t).unwrap();
        let b = p.predict_eps(&x, t).unwrap();
        assert_eq!(a.shape(), &[3, 32, 32]);
        assert!(a.data().iter().zip(b.data()).all(|(u, v)| u.to_bits() == v.to_bits()));
        assert!(a.mean().abs() < 0.1, "init mean {}", a.mean());
        assert!(p.predict_eps(&Tensor::zeros(&[3, 16, 16]), t).is_err());
    }

    #[test]
    fn skip_connections_are_live() {
        let p: DenoiserParams<f64> = init_denoiser(tiny(), DomainTag::SpoofUnion).unwrap();
        let x = normal_tensor::<f64>(&mut stream(2, "x", 0), &[1, 3, 8, 8]);
        let with = p.predict_with(&x, &[10], true).unwrap();
        let without = p.predict_with(&x, &[10], false).unwrap();
        let diff = with.zip_map(&without, |a, b| (a - b).abs()).unwrap().max_abs();
        assert!(diff > 1e-6);
    }

    #[test]
    fn parameter_gradients_match_finite_differences() {
        let p: DenoiserParams<f64> = init_denoiser(tiny(), DomainTag::SpoofUnion).unwrap();
        let x = normal_tensor::<f64>(&mut stream(3, "x", 0), &[1, 3, 8, 8]);
        let ts = [123usize];
        let loss_of = |params: &DenoiserParams<f64>| -> (f64, Vec<Tensor<f64>>) {
            let mut g = Graph::new();
            let vars = params.bind(&mut g, true);
            let xv = g.input(x.clone());
            let y = params.forward(&mut g, &vars, xv, &ts).unwrap();
            let sq = g.square(y);
            let l = g.mean(sq);
            let grads = g.backward(l).unwrap();
            let gs = params
                .layers
                .iter()
                .enumerate()
                .map(|(i, (_, t))| grads.get_or_zeros(vars[i], t.shape()))
                .collect();
            (g.value(l).item(), gs)
        };
        let (_, analytic) = loss_of(&p);
        // sample layers from the whole network
        for name in ["time.w", "in.w", "down1.temb.w", "down1.skip.w", "mid.conv2.w", "up0.conv1.b", "out.w"] {
            let idx = p.layers.position(name).unwrap();
            let base = p.layers.at(idx).clone();
            let k = base.numel().min(6);
            let sub = Tensor::new(&[k], base.data()[..k].to_vec()).unwrap();
            let numeric = finite_diff_grad(
                |probe| {
                    let mut q = p.clone();
                    let t = q.layers.tensors_mut().nth(idx).unwrap();
                    t.data_mut()[..k].copy_from_slice(probe.data());
                    Ok(loss_of(&q).0)
                },
                &sub,
                1e-6,
            )
            .unwrap();
            let got = Tensor::new(&[k], analytic[idx].data()[..k].to_vec()).unwrap();
            let err = max_relative_error(&got, &numeric, 1e-7);
            assert!(err < 1e-3, "{name}: relative error {err}");
        }
    }

    #[test]
    fn checkpoint_round_trip_is_bitwise() {
        let p: DenoiserParams<f32> = init_denoiser(tiny(), DomainTag::GenuineOnly).unwrap();
        let s = NoiseSchedule::default();
        let mut buf = Vec::new();
        p.write_checkpoint(&mut buf, &s).unwrap();
        assert_eq!(&buf[..4], b"DSPD");
        let (q, s2) = DenoiserParams::<f32>::read_checkpoint(&mut buf.as_slice()).unwrap();
        assert_eq!(q, p);
        assert_eq!(s2, s);
        let mut again = Vec::new();
        q.write_checkpoint(&mut again, &s2).unwrap();
        assert_eq!(buf, again);
    }
}
