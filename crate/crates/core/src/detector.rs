//! Depth-supervised presentation-attack detector.
//!
//! Each stream runs two central-difference blocks (CDC conv, ReLU, 2x2 max
//! pool). Two-stream models concatenate the block-2 features and pass them
//! through a shared third block and a 3x3 head; the head output is resized to
//! the 32x32 depth resolution and squashed by a sigmoid. Every stream also
//! carries a 1x1 auxiliary depth head on its detached block-2 features; the
//! auxiliary scores are what score fusion averages.

use std::fmt;
use std::io::{Read, Write};
use std::path::Path;
use std::str::FromStr;

use rand::seq::index::sample;
use rand::Rng;

use crate::checkpoint::{self, read_header, read_u8, write_header, NamedTensors};
use crate::corpus::{Label, DEPTH_SIZE};
use crate::error::{invalid, Error, Result};
use crate::numerics::serial::{read_f64, read_u32, read_u64};
use crate::numerics::spatial::{sample_plane, Tap};
use crate::numerics::{AdamConfig, AdamState, Graph, Real, Tensor, Var};
use crate::rng::stream;

pub const DETECTOR_MAGIC: &[u8; 4] = b"DSPC";

/// Central crop of `fraction` of each side, resized back to the input size
/// by bilinear interpolation.
pub fn center_crop<R: Real>(image: &Tensor<R>, fraction: f64) -> Result<Tensor<R>> {
    if !(fraction > 0.0 && fraction <= 1.0) {
        return Err(invalid!("crop fraction {fraction} outside (0, 1]"));
    }
    let [c, h, w] = *image.shape() else {
        return Err(invalid!("expected [C,H,W], got {:?}", image.shape()));
    };
    let tap = |i: usize, len: usize| Tap::at((1.0 - fraction) * len as f64 / 2.0 + (i as f64 + 0.5) * fraction - 0.5, len);
    let ys: Vec<Tap> = (0..h).map(|i| tap(i, h)).collect();
    let xs: Vec<Tap> = (0..w).map(|j| tap(j, w)).collect();
    Ok(Tensor::from_fn(&[c, h, w], |k| {
        let (p, i, j) = (k / (h * w), (k / w) % h, k % w);
        sample_plane(&image.data()[p * h * w..(p + 1) * h * w], w, ys[i], xs[j])
    }))
}

/// A predicted or labelled depth map `[1,32,32]` with values in `[0,1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct DepthMap<R> {
    map: Tensor<R>,
}

impl<R: Real> DepthMap<R> {
    /// Validates the shape and clamps values into `[0,1]`.
    pub fn new(map: Tensor<R>) -> Result<Self> {
        if map.shape() != [1, DEPTH_SIZE, DEPTH_SIZE] {
            return Err(invalid!("depth maps are [1,{DEPTH_SIZE},{DEPTH_SIZE}], got {:?}", map.shape()));
        }
        Ok(Self {
            map: map.map(|v| v.max(R::zero()).min(R::one())),
        })
    }

    pub fn map(&self) -> &Tensor<R> {
        &self.map
    }
}

/// Liveness score: the mean predicted depth.
pub fn score<R: Real>(depth: &DepthMap<R>) -> f64 {
    depth.map.data().iter().map(|v| v.as_f64()).sum::<f64>() / depth.map.numel() as f64
}

pub fn fuse_scores(s1: f64, s2: f64) -> Result<f64> {
    for s in [s1, s2] {
        if !(0.0..=1.0).contains(&s) {
            return Err(invalid!("score {s} outside [0, 1]"));
        }
    }
    Ok((s1 + s2) / 2.0)
}

/// Eight 3x3 kernels, each +1 at the centre and -1 at one neighbour.
fn contrast_kernels<R: Real>() -> Tensor<R> {
    let mut k = Tensor::zeros(&[8, 1, 3, 3]);
    let neighbours = [0, 1, 2, 3, 5, 6, 7, 8];
    for (i, &n) in neighbours.iter().enumerate() {
        k.data_mut()[i * 9 + 4] = R::one();
        k.data_mut()[i * 9 + n] = -R::one();
    }
    k
}

/// Mean squared error between two equally shaped maps.
pub fn mse_loss_graph<R: Real>(g: &mut Graph<R>, pred: Var, label: Var) -> Result<Var> {
    let d = g.sub(pred, label)?;
    let sq = g.square(d);
    Ok(g.mean(sq))
}

/// Contrastive depth loss on `[N,1,H,W]` maps: the sum over the eight
/// contrast kernels of the mean squared difference of the valid responses.
pub fn cdl_loss_graph<R: Real>(g: &mut Graph<R>, pred: Var, label: Var) -> Result<Var> {
    let d = g.sub(pred, label)?;
    let k = g.input(contrast_kernels());
    // the response to a difference equals the difference of responses
    let r = g.conv2d(d, k, 1, 0)?;
    let sq = g.square(r);
    let m = g.mean(sq);
    Ok(g.scale(m, R::of(8.0)))
}

/// Depth-supervision objective: MSE plus contrastive depth loss.
pub fn overall_loss_graph<R: Real>(g: &mut Graph<R>, pred: Var, label: Var) -> Result<Var> {
    let a = mse_loss_graph(g, pred, label)?;
    let b = cdl_loss_graph(g, pred, label)?;
    g.add(a, b)
}

fn eval_loss<R: Real>(
    pred: &DepthMap<R>,
    label: &DepthMap<R>,
    f: fn(&mut Graph<R>, Var, Var) -> Result<Var>,
) -> Result<f64> {
    let mut g = Graph::new();
    let p = g.input(pred.map.clone().unsqueeze0());
    let l = g.input(label.map.clone().unsqueeze0());
    let loss = f(&mut g, p, l)?;
    Ok(g.value(loss).item().as_f64())
}

pub fn mse_loss<R: Real>(pred: &DepthMap<R>, label: &DepthMap<R>) -> Result<f64> {
    eval_loss(pred, label, mse_loss_graph)
}

pub fn cdl_loss<R: Real>(pred: &DepthMap<R>, label: &DepthMap<R>) -> Result<f64> {
    eval_loss(pred, label, cdl_loss_graph)
}

/// Which images feed the detector streams.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum InputMode {
    /// Cropped RGB only.
    Rgb,
    /// Noise pattern only.
    Noise,
    /// Cropped RGB plus the full RGB image.
    RgbRgb,
    /// Cropped RGB plus the noise pattern.
    RgbNoise,
}

/// The image fed to one stream.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum StreamInput {
    CroppedRgb,
    FullRgb,
    Noise,
}

impl InputMode {
    pub const ALL: [InputMode; 4] = [InputMode::Rgb, InputMode::Noise, InputMode::RgbRgb, InputMode::RgbNoise];

    pub fn as_str(self) -> &'static str {
        match self {
            InputMode::Rgb => "rgb",
            InputMode::Noise => "noise",
            InputMode::RgbRgb => "rgb_rgb",
            InputMode::RgbNoise => "rgb_noise",
        }
    }

    fn code(self) -> u8 {
        match self {
            InputMode::Rgb => 0,
            InputMode::Noise => 1,
            InputMode::RgbRgb => 2,
            InputMode::RgbNoise => 3,
        }
    }

    fn from_code(c: u8) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|m| m.code() == c)
            .ok_or_else(|| Error::Format(format!("unknown detector input code {c}")))
    }

    /// Inputs of the RGB stream and the second stream.
    fn streams(self) -> (Option<StreamInput>, Option<StreamInput>) {
        match self {
            InputMode::Rgb => (Some(StreamInput::CroppedRgb), None),
            InputMode::Noise => (None, Some(StreamInput::Noise)),
            InputMode::RgbRgb => (Some(StreamInput::CroppedRgb), Some(StreamInput::FullRgb)),
            InputMode::RgbNoise => (Some(StreamInput::CroppedRgb), Some(StreamInput::Noise)),
        }
    }

    pub fn needs_noise(self) -> bool {
        matches!(self, InputMode::Noise | InputMode::RgbNoise)
    }

    pub fn stream_count(self) -> usize {
        let (a, b) = self.streams();
        a.is_some() as usize + b.is_some() as usize
    }
}

impl fmt::Display for InputMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for InputMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|m| m.as_str() == s)
            .ok_or_else(|| invalid!("unknown detector inputs '{s}' (rgb, noise, rgb_rgb, rgb_noise)"))
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DetectorConfig {
    pub inputs: InputMode,
    /// Output channels of blocks 1, 2 and 3.
    pub widths: [usize; 3],
    pub cdc_theta: f64,
    pub crop_fraction: f64,
    /// Multiplier applied to noise patterns before the first layer.
    pub noise_gain: f64,
    pub image_size: usize,
    pub seed: u64,
}

impl Default for DetectorConfig {
    fn default() -> Self {
        Self {
            inputs: InputMode::RgbNoise,
            widths: [32, 64, 64],
            cdc_theta: 0.7,
            crop_fraction: 0.8,
            noise_gain: 10.0,
            image_size: 32,
            seed: 0,
        }
    }
}

impl DetectorConfig {
    pub fn validate(&self) -> Result<()> {
        if self.widths.contains(&0) {
            return Err(invalid!("detector widths must be positive"));
        }
        if !(0.0..=1.0).contains(&self.cdc_theta) {
            return Err(invalid!("cdc theta {} outside [0, 1]", self.cdc_theta));
        }
        if !(self.crop_fraction > 0.0 && self.crop_fraction <= 1.0) {
            return Err(invalid!("crop fraction {} outside (0, 1]", self.crop_fraction));
        }
        if !(self.noise_gain.is_finite() && self.noise_gain > 0.0) {
            return Err(invalid!("noise gain must be positive"));
        }
        if self.image_size < 8 || !self.image_size.is_multiple_of(8) {
            return Err(invalid!("detector image size must be a positive multiple of 8, got {}", self.image_size));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct DetectorParams<R> {
    pub config: DetectorConfig,
    pub rgb_branch: NamedTensors<R>,
    /// Second stream; fed the full RGB image in `rgb_rgb` mode.
    pub noise_branch: NamedTensors<R>,
    pub fused_head: NamedTensors<R>,
}

type Spec = (&'static str, Vec<usize>, usize);

fn branch_specs(c: &DetectorConfig) -> Vec<Spec> {
    let [w0, w1, _] = c.widths;
    vec![
        ("block1.w", vec![w0, 3, 3, 3], 27),
        ("block1.b", vec![w0], 27),
        ("block2.w", vec![w1, w0, 3, 3], w0 * 9),
        ("block2.b", vec![w1], w0 * 9),
        ("aux.w", vec![1, w1, 1, 1], w1),
        ("aux.b", vec![1], w1),
    ]
}

fn fused_specs(c: &DetectorConfig) -> Vec<Spec> {
    let [_, w1, w2] = c.widths;
    let c_in = w1 * c.inputs.stream_count();
    vec![
        ("block3.w", vec![w2, c_in, 3, 3], c_in * 9),
        ("block3.b", vec![w2], c_in * 9),
        ("head.w", vec![1, w2, 3, 3], w2 * 9),
        ("head.b", vec![1], w2 * 9),
    ]
}

fn init_layers<R: Real>(specs: &[Spec], seed: u64, component: &str) -> NamedTensors<R> {
    let mut rng = stream(seed, component, 0);
    let mut out = NamedTensors::new();
    for (name, shape, fan_in) in specs {
        let t = if name.ends_with(".b") {
            Tensor::zeros(shape)
        } else {
            // He-uniform for ReLU networks
            let bound = (6.0 / *fan_in as f64).sqrt();
            Tensor::from_fn(shape, |_| R::of(rng.random_range(-bound..bound)))
        };
        out.push(*name, t);
    }
    out
}

fn check_layers<R: Real>(layers: &NamedTensors<R>, specs: &[Spec]) -> Result<()> {
    if layers.len() != specs.len()
        || specs
            .iter()
            .zip(layers.iter())
            .any(|((n, s, _), (ln, t))| *n != ln || s.as_slice() != t.shape())
    {
        return Err(Error::Format("detector layers do not match its config".into()));
    }
    Ok(())
}

pub fn init_detector<R: Real>(config: DetectorConfig) -> Result<DetectorParams<R>> {
    config.validate()?;
    let (a, b) = config.inputs.streams();
    let empty = NamedTensors::new;
    Ok(DetectorParams {
        config,
        rgb_branch: a.map_or_else(empty, |_| init_layers(&branch_specs(&config), config.seed, "detector.rgb")),
        noise_branch: b.map_or_else(empty, |_| init_layers(&branch_specs(&config), config.seed, "detector.noise")),
        fused_head: init_layers(&fused_specs(&config), config.seed, "detector.fused"),
    })
}

/// Graph handles for one bound parameter collection.
struct Bound<'a, R> {
    layers: &'a NamedTensors<R>,
    vars: Vec<Var>,
}

impl<R: Real> Bound<'_, R> {
    fn var(&self, name: &str) -> Var {
        self.vars[self.layers.position(name).expect("layer exists by construction")]
    }

    fn cdc_block(&self, g: &mut Graph<R>, x: Var, block: &str, theta: R) -> Result<Var> {
        let h = g.cdc2d(x, self.var(&format!("{block}.w")), theta, 1, 1)?;
        let h = g.bias_add(h, self.var(&format!("{block}.b")))?;
        let h = g.relu(h);
        g.max_pool2(h)
    }
}

/// Graph variables of every parameter, in collection order.
pub struct DetectorVars {
    rgb: Vec<Var>,
    noise: Vec<Var>,
    fused: Vec<Var>,
}

impl DetectorVars {
    pub fn iter(&self) -> impl Iterator<Item = &Var> {
        self.rgb.iter().chain(&self.noise).chain(&self.fused)
    }
}

/// Graph nodes produced by one forward pass.
pub struct DetectorOutput {
    /// Fused depth prediction `[N,1,32,32]`.
    pub depth: Var,
    /// Auxiliary per-stream depth predictions, RGB stream first.
    pub aux: Vec<Var>,
}

/// Predictions of one forward pass, per sample.
#[derive(Debug, Clone, PartialEq)]
pub struct DetectorPrediction<R> {
    pub depth: Vec<DepthMap<R>>,
    pub aux_scores: Vec<Vec<f64>>,
}

impl<R: Real> DetectorPrediction<R> {
    pub fn scores(&self) -> Vec<f64> {
        self.depth.iter().map(score).collect()
    }

    /// Mean of the two auxiliary stream scores; single-stream models fall back
    /// to their main score.
    pub fn fused_scores(&self) -> Result<Vec<f64>> {
        self.aux_scores
            .iter()
            .zip(self.scores())
            .map(|(aux, main)| match aux.as_slice() {
                [a, b] => fuse_scores(*a, *b),
                _ => Ok(main),
            })
            .collect()
    }
}

fn depth_head<R: Real>(g: &mut Graph<R>, x: Var) -> Result<Var> {
    let up = g.resize_bilinear(x, DEPTH_SIZE, DEPTH_SIZE)?;
    Ok(g.sigmoid(up))
}

impl<R: Real> DetectorParams<R> {
    pub fn parameter_count(&self) -> usize {
        self.rgb_branch.parameter_count() + self.noise_branch.parameter_count() + self.fused_head.parameter_count()
    }

    pub fn bind(&self, g: &mut Graph<R>, trainable: bool) -> DetectorVars {
        let mut bind = |layers: &NamedTensors<R>| -> Vec<Var> {
            layers
                .iter()
                .map(|(_, t)| if trainable { g.param(t.clone()) } else { g.input(t.clone()) })
                .collect()
        };
        DetectorVars {
            rgb: bind(&self.rgb_branch),
            noise: bind(&self.noise_branch),
            fused: bind(&self.fused_head),
        }
    }

    fn stream_image(&self, input: StreamInput, rgb: &Tensor<R>, noise: Option<&Tensor<R>>) -> Result<Tensor<R>> {
        let n = rgb.shape()[0];
        match input {
            StreamInput::FullRgb => Ok(rgb.clone()),
            StreamInput::CroppedRgb => {
                let crops = (0..n)
                    .map(|i| center_crop(&rgb.index0(i)?, self.config.crop_fraction))
                    .collect::<Result<Vec<_>>>()?;
                Tensor::stack(&crops)
            }
            StreamInput::Noise => {
                let noise = noise.ok_or_else(|| invalid!("detector inputs {} need noise patterns", self.config.inputs))?;
                noise.expect_same_shape(rgb)?;
                let gain = R::of(self.config.noise_gain);
                Ok(noise.map(|v| v * gain))
            }
        }
    }

    fn check_batch(&self, rgb: &Tensor<R>) -> Result<()> {
        let s = self.config.image_size;
        if rgb.rank() != 4 || rgb.shape()[1..] != [3, s, s] {
            return Err(invalid!("detector expects [N,3,{s},{s}] inputs, got {:?}", rgb.shape()));
        }
        Ok(())
    }

    /// Builds the forward pass for a batch. `noise` is required exactly when
    /// the input mode uses noise patterns.
    pub fn forward(&self, g: &mut Graph<R>, vars: &DetectorVars, rgb: &Tensor<R>, noise: Option<&Tensor<R>>) -> Result<DetectorOutput> {
        self.forward_with(g, vars, rgb, noise, false)
    }

    pub(crate) fn forward_with(
        &self,
        g: &mut Graph<R>,
        vars: &DetectorVars,
        rgb: &Tensor<R>,
        noise: Option<&Tensor<R>>,
        zero_second_stream: bool,
    ) -> Result<DetectorOutput> {
        self.check_batch(rgb)?;
        let theta = R::of(self.config.cdc_theta);
        let (first, second) = self.config.inputs.streams();
        let mut features = Vec::new();
        let mut aux = Vec::new();
        for (input, layers, vs, is_second) in [
            (first, &self.rgb_branch, &vars.rgb, false),
            (second, &self.noise_branch, &vars.noise, true),
        ] {
            let Some(input) = input else { continue };
            let p = Bound {
                layers,
                vars: vs.clone(),
            };
            let x = g.input(self.stream_image(input, rgb, noise)?);
            let h = p.cdc_block(g, x, "block1", theta)?;
            let mut h = p.cdc_block(g, h, "block2", theta)?;
            if is_second && zero_second_stream {
                h = g.input(Tensor::zeros(g.shape(h)));
            }
            let detached = g.detach(h);
            let a = g.conv2d(detached, p.var("aux.w"), 1, 0)?;
            let a = g.bias_add(a, p.var("aux.b"))?;
            aux.push(depth_head(g, a)?);
            features.push(h);
        }
        let fused = match features[..] {
            [a, b] => g.concat_channels(a, b)?,
            [a] => a,
            _ => unreachable!("every input mode has one or two streams"),
        };
        let p = Bound {
            layers: &self.fused_head,
            vars: vars.fused.clone(),
        };
        let h = p.cdc_block(g, fused, "block3", theta)?;
        let h = g.conv2d(h, p.var("head.w"), 1, 1)?;
        let h = g.bias_add(h, p.var("head.b"))?;
        Ok(DetectorOutput {
            depth: depth_head(g, h)?,
            aux,
        })
    }

    fn predict_with(&self, rgb: &Tensor<R>, noise: Option<&Tensor<R>>, zero_second_stream: bool) -> Result<DetectorPrediction<R>> {
        let mut g = Graph::new();
        let vars = self.bind(&mut g, false);
        let out = self.forward_with(&mut g, &vars, rgb, noise, zero_second_stream)?;
        let n = rgb.shape()[0];
        let depth = (0..n)
            .map(|i| DepthMap::new(g.value(out.depth).index0(i)?))
            .collect::<Result<Vec<_>>>()?;
        let mut aux_scores = vec![Vec::new(); n];
        for a in &out.aux {
            for (i, slot) in aux_scores.iter_mut().enumerate() {
                slot.push(score(&DepthMap::new(g.value(*a).index0(i)?)?));
            }
        }
        Ok(DetectorPrediction { depth, aux_scores })
    }

    /// Depth maps and auxiliary scores for a batch `[N,3,H,W]`.
    pub fn predict(&self, rgb: &Tensor<R>, noise: Option<&Tensor<R>>) -> Result<DetectorPrediction<R>> {
        self.predict_with(rgb, noise, false)
    }

    pub fn cast<S: Real>(&self) -> DetectorParams<S> {
        DetectorParams {
            config: self.config,
            rgb_branch: self.rgb_branch.cast(),
            noise_branch: self.noise_branch.cast(),
            fused_head: self.fused_head.cast(),
        }
    }

    pub fn write_checkpoint<W: Write>(&self, w: &mut W) -> Result<()> {
        write_header(w, DETECTOR_MAGIC)?;
        let c = &self.config;
        w.write_all(&[c.inputs.code()])?;
        for v in c.widths {
            w.write_all(&(v as u32).to_le_bytes())?;
        }
        for v in [c.cdc_theta, c.crop_fraction, c.noise_gain] {
            w.write_all(&v.to_le_bytes())?;
        }
        w.write_all(&(c.image_size as u32).to_le_bytes())?;
        w.write_all(&c.seed.to_le_bytes())?;
        self.rgb_branch.write(w)?;
        self.noise_branch.write(w)?;
        self.fused_head.write(w)
    }

    pub fn read_checkpoint<Rd: Read>(r: &mut Rd) -> Result<Self> {
        read_header(r, DETECTOR_MAGIC)?;
        let inputs = InputMode::from_code(read_u8(r)?)?;
        let mut widths = [0usize; 3];
        for v in widths.iter_mut() {
            *v = read_u32(r)? as usize;
        }
        let config = DetectorConfig {
            inputs,
            widths,
            cdc_theta: read_f64(r)?,
            crop_fraction: read_f64(r)?,
            noise_gain: read_f64(r)?,
            image_size: read_u32(r)? as usize,
            seed: read_u64(r)?,
        };
        config.validate().map_err(|e| Error::Format(e.to_string()))?;
        let params = Self {
            config,
            rgb_branch: NamedTensors::read(r)?,
            noise_branch: NamedTensors::read(r)?,
            fused_head: NamedTensors::read(r)?,
        };
        let (a, b) = inputs.streams();
        let branch = branch_specs(&config);
        check_layers(&params.rgb_branch, if a.is_some() { &branch } else { &[] })?;
        check_layers(&params.noise_branch, if b.is_some() { &branch } else { &[] })?;
        check_layers(&params.fused_head, &fused_specs(&config))?;
        Ok(params)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        checkpoint::save_with(path, |w| self.write_checkpoint(w))
    }

    pub fn load(path: &Path) -> Result<Self> {
        checkpoint::load_with(path, |r| Self::read_checkpoint(r))
    }
}

/// Single-sample two-stream forward pass on an RGB image and its noise pattern.
pub fn forward_two_stream<R: Real>(
    params: &DetectorParams<R>,
    rgb: &Tensor<R>,
    noise: &crate::diffusion::NoisePattern<R>,
) -> Result<DepthMap<R>> {
    if rgb.rank() != 3 {
        return Err(invalid!("expected [3,H,W], got {:?}", rgb.shape()));
    }
    let batch = rgb.clone().unsqueeze0();
    let noise = noise.map().clone().unsqueeze0();
    let mut p = params.predict(&batch, Some(&noise))?;
    Ok(p.depth.remove(0))
}

/// One labelled training or evaluation example.
#[derive(Debug, Clone, PartialEq)]
pub struct DetectorExample {
    pub rgb: Tensor<f32>,
    pub noise: Option<Tensor<f32>>,
    pub depth: Tensor<f32>,
    pub label: Label,
}

fn check_example(e: &DetectorExample, needs_noise: bool) -> Result<()> {
    if e.depth.shape() != [1, DEPTH_SIZE, DEPTH_SIZE] {
        return Err(invalid!("depth labels are [1,{DEPTH_SIZE},{DEPTH_SIZE}], got {:?}", e.depth.shape()));
    }
    let zero = e.depth.data().iter().all(|v| *v == 0.0);
    match e.label {
        Label::Spoof if !zero => return Err(invalid!("spoof examples must carry all-zero depth")),
        Label::Genuine if zero => return Err(invalid!("genuine examples must carry a nonzero depth")),
        _ => {}
    }
    if needs_noise && e.noise.is_none() {
        return Err(invalid!("example lacks the noise pattern its detector needs"));
    }
    Ok(())
}

struct Batch {
    rgb: Tensor<f32>,
    noise: Option<Tensor<f32>>,
    depth: Tensor<f32>,
}

fn collate(examples: &[&DetectorExample], needs_noise: bool) -> Result<Batch> {
    let rgb = Tensor::stack(&examples.iter().map(|e| e.rgb.clone()).collect::<Vec<_>>())?;
    let depth = Tensor::stack(&examples.iter().map(|e| e.depth.clone()).collect::<Vec<_>>())?;
    let noise = if needs_noise {
        let maps = examples
            .iter()
            .map(|e| e.noise.clone().ok_or_else(|| invalid!("missing noise pattern")))
            .collect::<Result<Vec<_>>>()?;
        Some(Tensor::stack(&maps)?)
    } else {
        None
    };
    Ok(Batch { rgb, noise, depth })
}

/// Mean depth-supervision loss of the fused head over `examples`.
pub fn evaluate_loss(params: &DetectorParams<f32>, examples: &[DetectorExample], batch_size: usize) -> Result<f64> {
    if examples.is_empty() {
        return Err(invalid!("cannot evaluate on an empty set"));
    }
    let needs_noise = params.config.inputs.needs_noise();
    let mut total = 0.0;
    for chunk in examples.chunks(batch_size.max(1)) {
        let refs: Vec<&DetectorExample> = chunk.iter().collect();
        let b = collate(&refs, needs_noise)?;
        let mut g = Graph::new();
        let vars = params.bind(&mut g, false);
        let out = params.forward(&mut g, &vars, &b.rgb, b.noise.as_ref())?;
        let label = g.input(b.depth);
        let loss = overall_loss_graph(&mut g, out.depth, label)?;
        total += g.value(loss).item().as_f64() * chunk.len() as f64;
    }
    Ok(total / examples.len() as f64)
}

/// Liveness scores for `examples`, optionally fusing the per-stream scores.
pub fn score_examples(params: &DetectorParams<f32>, examples: &[DetectorExample], fuse: bool, batch_size: usize) -> Result<Vec<f64>> {
    let needs_noise = params.config.inputs.needs_noise();
    let mut out = Vec::with_capacity(examples.len());
    for chunk in examples.chunks(batch_size.max(1)) {
        let refs: Vec<&DetectorExample> = chunk.iter().collect();
        let b = collate(&refs, needs_noise)?;
        let p = params.predict(&b.rgb, b.noise.as_ref())?;
        out.extend(if fuse { p.fused_scores()? } else { p.scores() });
    }
    Ok(out)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DetectorTrainConfig {
    pub max_steps: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub weight_decay: f64,
    /// Learning rate is multiplied by `decay_factor` every `decay_every` steps.
    pub decay_every: usize,
    pub decay_factor: f64,
    /// Development-loss interval for best-model selection; 0 keeps the final model.
    pub eval_every: usize,
    pub seed: u64,
}

impl Default for DetectorTrainConfig {
    fn default() -> Self {
        Self {
            max_steps: 1000,
            batch_size: 64,
            learning_rate: 1e-4,
            weight_decay: 5e-5,
            decay_every: 500,
            decay_factor: 0.1,
            eval_every: 50,
            seed: 0,
        }
    }
}

impl DetectorTrainConfig {
    pub fn learning_rate_at(&self, step: usize) -> f64 {
        let decays = (step - 1).checked_div(self.decay_every).unwrap_or(0);
        self.learning_rate * self.decay_factor.powi(decays as i32)
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DetectorRecord {
    pub step: usize,
    pub learning_rate: f64,
    pub loss: f64,
    pub dev_loss: Option<f64>,
}

/// Adam training on the fused-head objective plus the auxiliary heads'
/// objectives. Returns the parameters with the lowest development loss
/// seen (or the final ones when `dev` is empty or evaluation is off).
pub fn train_detector(
    params: &DetectorParams<f32>,
    train: &[DetectorExample],
    dev: &[DetectorExample],
    cfg: &DetectorTrainConfig,
    mut on_record: impl FnMut(&DetectorRecord),
) -> Result<(DetectorParams<f32>, Vec<DetectorRecord>)> {
    if train.is_empty() {
        return Err(invalid!("detector training needs a nonempty dataset"));
    }
    if cfg.batch_size == 0 {
        return Err(invalid!("batch size must be positive"));
    }
    let needs_noise = params.config.inputs.needs_noise();
    for e in train.iter().chain(dev) {
        check_example(e, needs_noise)?;
    }
    let adam = AdamConfig {
        learning_rate: cfg.learning_rate,
        weight_decay: cfg.weight_decay,
        ..AdamConfig::default()
    };
    let mut params = params.clone();
    let shapes: Vec<Vec<usize>> = [&params.rgb_branch, &params.noise_branch, &params.fused_head]
        .iter()
        .flat_map(|l| l.iter().map(|(_, t)| t.shape().to_vec()).collect::<Vec<_>>())
        .collect();
    let mut states: Vec<AdamState<f32>> = shapes.iter().map(|s| AdamState::new(s, adam)).collect();
    let mut best: Option<(f64, DetectorParams<f32>)> = None;
    let mut log = Vec::new();
    for step in 1..=cfg.max_steps {
        let lr = cfg.learning_rate_at(step);
        let mut rng = stream(cfg.seed, "detector.batch", step as u64);
        let picks = sample(&mut rng, train.len(), cfg.batch_size.min(train.len()));
        let refs: Vec<&DetectorExample> = picks.iter().map(|i| &train[i]).collect();
        let b = collate(&refs, needs_noise)?;
        let mut g = Graph::new();
        let vars = params.bind(&mut g, true);
        let out = params.forward(&mut g, &vars, &b.rgb, b.noise.as_ref())?;
        let label = g.input(b.depth);
        let main = overall_loss_graph(&mut g, out.depth, label)?;
        let loss_value = g.value(main).item().as_f64();
        if !loss_value.is_finite() {
            return Err(Error::Numeric(format!("detector loss diverged at step {step}")));
        }
        let mut total = main;
        for a in &out.aux {
            let l = overall_loss_graph(&mut g, *a, label)?;
            total = g.add(total, l)?;
        }
        let mut grads = g.backward(total)?;
        let tensors = params
            .rgb_branch
            .tensors_mut()
            .chain(params.noise_branch.tensors_mut())
            .chain(params.fused_head.tensors_mut());
        for ((p, v), st) in tensors.zip(vars.iter()).zip(&mut states) {
            st.config.learning_rate = lr;
            let gr = grads.take(*v).unwrap_or_else(|| Tensor::zeros(p.shape()));
            st.step(p, &gr)?;
        }
        let mut record = DetectorRecord {
            step,
            learning_rate: lr,
            loss: loss_value,
            dev_loss: None,
        };
        if !dev.is_empty() && cfg.eval_every > 0 && (step % cfg.eval_every == 0 || step == cfg.max_steps) {
            let d = evaluate_loss(&params, dev, cfg.batch_size)?;
            record.dev_loss = Some(d);
            if best.as_ref().is_none_or(|(b, _)| d < *b) {
                best = Some((d, params.clone()));
            }
        }
        on_record(&record);
        log.push(record);
    }
    Ok((best.map_or(params, |(_, p)| p), log))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::{finite_diff_grad, max_relative_error};
    use crate::rng::normal_tensor;

    fn tiny(inputs: InputMode, seed: u64) -> DetectorConfig {
        DetectorConfig {
            inputs,
            widths: [3, 4, 4],
            image_size: 8,
            seed,
            ..DetectorConfig::default()
        }
    }

    fn rand_tensor(shape: &[usize], seed: u64) -> Tensor<f64> {
        normal_tensor(&mut stream(seed, "test.detector", 0), shape)
    }

    fn depth(t: Tensor<f64>) -> DepthMap<f64> {
        DepthMap::new(t).unwrap()
    }

    #[test]
    fn crop_identity_and_constant() {
        let img = rand_tensor(&[3, 6, 6], 1);
        assert_eq!(center_crop(&img, 1.0).unwrap(), img);
        let c = Tensor::full(&[3, 5, 5], 0.3);
        assert!(center_crop(&c, 0.37).unwrap().data().iter().all(|v: &f64| (v - 0.3).abs() < 1e-15));
        assert!(center_crop(&img, 0.0).is_err());
        assert!(center_crop(&img, 1.5).is_err());
    }

    #[test]
    fn crop_of_ramp_matches_hand_interpolation() {
        // value = column index; half crop samples columns 0.75, 1.25, 1.75, 2.25
        let ramp = Tensor::from_fn(&[1, 4, 4], |k| (k % 4) as f64);
        let out = center_crop(&ramp, 0.5).unwrap();
        for row in out.data().chunks(4) {
            assert_eq!(row, &[0.75, 1.25, 1.75, 2.25]);
        }
    }

    #[test]
    fn mse_matches_naive_loop_and_analytic_offset() {
        let a = rand_tensor(&[1, 32, 32], 2).map(|v| 1.0 / (1.0 + (-v).exp()));
        let b = rand_tensor(&[1, 32, 32], 3).map(|v| 1.0 / (1.0 + (-v).exp()));
        let mut naive = 0.0;
        for i in 0..1024 {
            naive += (a.data()[i] - b.data()[i]).powi(2);
        }
        naive /= 1024.0;
        let got = mse_loss(&depth(a.clone()), &depth(b)).unwrap();
        assert!((got - naive).abs() < 1e-12);
        let lab = Tensor::full(&[1, 32, 32], 0.4);
        let off = Tensor::full(&[1, 32, 32], 0.5);
        assert!((mse_loss(&depth(off), &depth(lab.clone())).unwrap() - 0.01).abs() < 1e-12);
        assert_eq!(mse_loss(&depth(lab.clone()), &depth(lab)).unwrap(), 0.0);
    }

    #[test]
    fn cdl_hand_evaluated_three_by_three() {
        // d = pred - label on a 3x3 patch; the single valid response of kernel i
        // is d_centre - d_i, so the loss is the sum of those squares.
        let pred = [0.9, 0.1, 0.4, 0.3, 0.8, 0.2, 0.5, 0.6, 0.7];
        let label = [0.2, 0.2, 0.2, 0.1, 0.5, 0.0, 0.3, 0.3, 0.6];
        // d = [0.7, -0.1, 0.2, 0.2, 0.3, 0.2, 0.2, 0.3, 0.1]; centre 0.3
        // squares of 0.3 - d_i: 0.16, 0.16, 0.01, 0.01, 0.01, 0.01, 0, 0.04
        let expected = 0.4;
        let mut g = Graph::<f64>::new();
        let p = g.input(Tensor::new(&[1, 1, 3, 3], pred.to_vec()).unwrap());
        let l = g.input(Tensor::new(&[1, 1, 3, 3], label.to_vec()).unwrap());
        let loss = cdl_loss_graph(&mut g, p, l).unwrap();
        assert!((g.value(loss).item() - expected).abs() < 1e-12);
    }

    #[test]
    fn cdl_vanishes_for_constant_offsets() {
        let l = rand_tensor(&[1, 32, 32], 4).map(|v| 0.5 + 0.1 * v.tanh());
        assert_eq!(cdl_loss(&depth(l.clone()), &depth(l.clone())).unwrap(), 0.0);
        let shifted = l.map(|v| v + 0.2);
        assert!(cdl_loss(&depth(shifted), &depth(l)).unwrap() < 1e-12);
    }

    #[test]
    fn score_and_fusion() {
        assert_eq!(score(&depth(Tensor::zeros(&[1, 32, 32]))), 0.0);
        assert_eq!(score(&depth(Tensor::full(&[1, 32, 32], 1.0))), 1.0);
        let r = rand_tensor(&[1, 32, 32], 5).map(|v| 1.0 / (1.0 + (-v).exp()));
        let mean = r.data().iter().sum::<f64>() / 1024.0;
        assert!((score(&depth(r)) - mean).abs() < 1e-12);
        assert_eq!(fuse_scores(0.0, 0.0).unwrap(), 0.0);
        assert_eq!(fuse_scores(0.3, 0.3).unwrap(), 0.3);
        assert!((fuse_scores(0.2, 0.6).unwrap() - 0.4).abs() < 1e-15);
        assert!(fuse_scores(-0.1, 0.5).is_err());
        assert!(fuse_scores(0.5, 1.1).is_err());
    }

    #[test]
    fn forward_shapes_ranges_and_determinism() {
        for mode in InputMode::ALL {
            let p = init_detector::<f64>(tiny(mode, 1)).unwrap();
            let rgb = rand_tensor(&[2, 3, 8, 8], 6).map(f64::tanh);
            let noise = rand_tensor(&[2, 3, 8, 8], 7).map(f64::abs);
            let noise = mode.needs_noise().then_some(&noise);
            let a = p.predict(&rgb, noise).unwrap();
            assert_eq!(a.depth.len(), 2);
            assert_eq!(a.aux_scores[0].len(), mode.stream_count());
            for d in &a.depth {
                assert_eq!(d.map().shape(), &[1, 32, 32]);
                assert!(d.map().data().iter().all(|v| (0.0..=1.0).contains(v)));
            }
            assert_eq!(a, p.predict(&rgb, noise).unwrap());
        }
        let p = init_detector::<f64>(tiny(InputMode::RgbNoise, 1)).unwrap();
        assert!(p.predict(&rand_tensor(&[1, 3, 8, 8], 1), None).is_err());
        assert!(p.predict(&rand_tensor(&[1, 3, 6, 6], 1), None).is_err());
    }

    #[test]
    fn both_streams_influence_the_output() {
        let p = init_detector::<f64>(tiny(InputMode::RgbNoise, 2)).unwrap();
        let rgb = rand_tensor(&[1, 3, 8, 8], 8).map(f64::tanh);
        let noise = rand_tensor(&[1, 3, 8, 8], 9).map(f64::abs);
        let full = p.predict(&rgb, Some(&noise)).unwrap();
        let ablated = p.predict_with(&rgb, Some(&noise), true).unwrap();
        assert_ne!(full.depth, ablated.depth);
        let other_noise = noise.map(|v| v * 0.5);
        assert_ne!(full.depth, p.predict(&rgb, Some(&other_noise)).unwrap().depth);
    }

    #[test]
    fn two_stream_single_sample_entry_point() {
        let p = init_detector::<f64>(tiny(InputMode::RgbNoise, 3)).unwrap();
        let rgb = rand_tensor(&[3, 8, 8], 10).map(f64::tanh);
        let noise = crate::diffusion::NoisePattern::new(rand_tensor(&[3, 8, 8], 11).map(f64::abs)).unwrap();
        let d = forward_two_stream(&p, &rgb, &noise).unwrap();
        let batch = p.predict(&rgb.clone().unsqueeze0(), Some(&noise.map().clone().unsqueeze0())).unwrap();
        assert_eq!(d, batch.depth[0]);
    }

    #[test]
    fn overall_loss_gradients_match_finite_differences() {
        let cfg = tiny(InputMode::RgbNoise, 4);
        let p = init_detector::<f64>(cfg).unwrap();
        let rgb = rand_tensor(&[2, 3, 8, 8], 12).map(f64::tanh);
        let noise = rand_tensor(&[2, 3, 8, 8], 13).map(|v| 0.05 * v.abs());
        let label = Tensor::stack(&[
            Tensor::from_fn(&[1, 32, 32], |k| ((k % 32) as f64 / 31.0) * 0.8),
            Tensor::zeros(&[1, 32, 32]),
        ])
        .unwrap();
        let loss_at = |params: &DetectorParams<f64>| -> Result<(f64, Graph<f64>, DetectorVars, Var)> {
            let mut g = Graph::new();
            let vars = params.bind(&mut g, true);
            let out = params.forward(&mut g, &vars, &rgb, Some(&noise))?;
            let l = g.input(label.clone());
            let loss = overall_loss_graph(&mut g, out.depth, l)?;
            Ok((g.value(loss).item(), g, vars, loss))
        };
        let (_, g, vars, loss) = loss_at(&p).unwrap();
        let grads = g.backward(loss).unwrap();
        let all: Vec<Var> = vars.iter().copied().collect();
        let names: Vec<(usize, String)> = [&p.rgb_branch, &p.noise_branch, &p.fused_head]
            .iter()
            .enumerate()
            .flat_map(|(c, l)| l.iter().map(move |(n, _)| (c, n.to_string())).collect::<Vec<_>>())
            .collect();
        for (idx, (collection, name)) in names.iter().enumerate() {
            if name.starts_with("aux") {
                continue; // auxiliary heads do not feed the fused loss
            }
            let layers = |q: &DetectorParams<f64>| match collection {
                0 => q.rgb_branch.get(name).unwrap().clone(),
                1 => q.noise_branch.get(name).unwrap().clone(),
                _ => q.fused_head.get(name).unwrap().clone(),
            };
            let base = layers(&p);
            let k = base.numel().min(5);
            let analytic = Tensor::new(&[k], grads.get_or_zeros(all[idx], base.shape()).data()[..k].to_vec()).unwrap();
            let sub = Tensor::new(&[k], base.data()[..k].to_vec()).unwrap();
            let numeric = finite_diff_grad(
                |v| {
                    let mut q = p.clone();
                    let target = match collection {
                        0 => q.rgb_branch.tensors_mut().nth(p.rgb_branch.position(name).unwrap()),
                        1 => q.noise_branch.tensors_mut().nth(p.noise_branch.position(name).unwrap()),
                        _ => q.fused_head.tensors_mut().nth(p.fused_head.position(name).unwrap()),
                    }
                    .unwrap();
                    target.data_mut()[..k].copy_from_slice(v.data());
                    Ok(loss_at(&q)?.0)
                },
                &sub,
                1e-6,
            )
            .unwrap();
            let err = max_relative_error(&analytic, &numeric, 1e-6);
            assert!(err < 1e-3, "{name}: relative error {err}");
        }
    }

    fn toy_examples(n: usize, size: usize, with_noise: bool) -> Vec<DetectorExample> {
        (0..n)
            .map(|i| {
                let genuine = i % 2 == 0;
                let level = if genuine { 0.5 } else { -0.5 };
                let rgb = Tensor::from_fn(&[3, size, size], |k| level + 0.05 * ((k * 7 + i) % 5) as f32);
                let depth = if genuine {
                    Tensor::from_fn(&[1, 32, 32], |k| {
                        let (y, x) = ((k / 32) as f32 - 15.5, (k % 32) as f32 - 15.5);
                        (-(x * x + y * y) / 288.0).exp()
                    })
                } else {
                    Tensor::zeros(&[1, 32, 32])
                };
                DetectorExample {
                    rgb,
                    noise: with_noise.then(|| Tensor::full(&[3, size, size], if genuine { 0.01 } else { 0.05 })),
                    depth,
                    label: if genuine { Label::Genuine } else { Label::Spoof },
                }
            })
            .collect()
    }

    #[test]
    fn training_descends_and_is_seeded() {
        let cfg = tiny(InputMode::RgbNoise, 5);
        let init = init_detector::<f32>(cfg).unwrap();
        let data = toy_examples(8, 8, true);
        let tc = DetectorTrainConfig {
            max_steps: 30,
            batch_size: 4,
            learning_rate: 1e-2,
            eval_every: 10,
            ..DetectorTrainConfig::default()
        };
        let before = evaluate_loss(&init, &data, 8).unwrap();
        let (a, log) = train_detector(&init, &data, &data, &tc, |_| {}).unwrap();
        assert!(evaluate_loss(&a, &data, 8).unwrap() < before);
        assert_eq!(log.len(), 30);
        let (b, _) = train_detector(&init, &data, &data, &tc, |_| {}).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn eight_sample_overfit() {
        let cfg = DetectorConfig {
            inputs: InputMode::Rgb,
            image_size: 32,
            widths: [8, 16, 16],
            ..DetectorConfig::default()
        };
        let init = init_detector::<f32>(cfg).unwrap();
        let data = toy_examples(8, 32, false);
        let tc = DetectorTrainConfig {
            max_steps: 300,
            batch_size: 8,
            learning_rate: 3e-3,
            eval_every: 0,
            ..DetectorTrainConfig::default()
        };
        let (trained, _) = train_detector(&init, &data, &[], &tc, |_| {}).unwrap();
        let loss = evaluate_loss(&trained, &data, 8).unwrap();
        assert!(loss < 0.01, "overfit loss {loss}");
    }

    #[test]
    fn training_rejects_bad_labels_and_empty_data() {
        let init = init_detector::<f32>(tiny(InputMode::Rgb, 6)).unwrap();
        let tc = DetectorTrainConfig::default();
        assert!(train_detector(&init, &[], &[], &tc, |_| {}).is_err());
        let mut bad = toy_examples(2, 8, false);
        bad[1].depth = bad[0].depth.clone();
        assert!(train_detector(&init, &bad, &[], &tc, |_| {}).is_err());
        let init = init_detector::<f32>(tiny(InputMode::Noise, 6)).unwrap();
        assert!(train_detector(&init, &toy_examples(2, 8, false), &[], &tc, |_| {}).is_err());
    }

    #[test]
    fn learning_rate_steps_down() {
        let tc = DetectorTrainConfig::default();
        assert_eq!(tc.learning_rate_at(1), 1e-4);
        assert_eq!(tc.learning_rate_at(500), 1e-4);
        assert!((tc.learning_rate_at(501) - 1e-5).abs() < 1e-18);
    }

    #[test]
    fn checkpoint_round_trip_is_bitwise() {
        for mode in InputMode::ALL {
            let p = init_detector::<f32>(tiny(mode, 7)).unwrap();
            let mut buf = Vec::new();
            p.write_checkpoint(&mut buf).unwrap();
            let q = DetectorParams::<f32>::read_checkpoint(&mut buf.as_slice()).unwrap();
            assert_eq!(p, q);
            let mut again = Vec::new();
            q.write_checkpoint(&mut again).unwrap();
            assert_eq!(buf, again);
        }
        let mut buf = Vec::new();
        init_detector::<f32>(tiny(InputMode::Rgb, 7)).unwrap().write_checkpoint(&mut buf).unwrap();
        buf[0] = b'X';
        assert!(DetectorParams::<f32>::read_checkpoint(&mut buf.as_slice()).is_err());
    }

    #[test]
    fn init_is_seeded() {
        let a = init_detector::<f32>(tiny(InputMode::RgbRgb, 1)).unwrap();
        assert_eq!(a, init_detector::<f32>(tiny(InputMode::RgbRgb, 1)).unwrap());
        assert_ne!(a, init_detector::<f32>(tiny(InputMode::RgbRgb, 2)).unwrap());
        assert!(init_detector::<f32>(DetectorConfig { crop_fraction: 0.0, ..tiny(InputMode::Rgb, 1) }).is_err());
    }
}
