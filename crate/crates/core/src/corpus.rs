//! Procedural face-like corpus with parametric presentation-attack
//! degradations, pseudo-depth labels, manifests and protocol splits.
//!
//! Images are `[3,H,W]` in `[-1,1]`. Every sample is a pure function of its
//! own seed, which is itself derived from the corpus root seed, the domain
//! and the sample index, so any record can be regenerated on its own.

use std::fmt;
use std::io::{BufRead, Write};
use std::path::Path;
use std::str::FromStr;

use rand::{Rng, RngCore};
use rand_chacha::ChaCha8Rng;

use crate::error::{invalid, Error, Result};
use crate::numerics::Tensor;
use crate::rng::{component_hash, stream};

/// Depth labels are always this many pixels on a side.
pub const DEPTH_SIZE: usize = 32;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Label {
    Genuine,
    Spoof,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum AttackType {
    None,
    PrintBlur,
    ReplayMoire,
    ColorCast,
    GlareBand,
    MediumBorder,
}

impl AttackType {
    pub const ATTACKS: [AttackType; 5] = [
        AttackType::PrintBlur,
        AttackType::ReplayMoire,
        AttackType::ColorCast,
        AttackType::GlareBand,
        AttackType::MediumBorder,
    ];
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Split {
    Train,
    Dev,
    Test,
}

/// The two synthetic capture domains.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Domain {
    A,
    B,
}

macro_rules! text_enum {
    ($ty:ident { $($variant:ident => $text:literal),+ $(,)? }) => {
        impl $ty {
            pub fn as_str(self) -> &'static str {
                match self {
                    $($ty::$variant => $text),+
                }
            }
        }

        impl fmt::Display for $ty {
            fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
                f.write_str(self.as_str())
            }
        }

        impl FromStr for $ty {
            type Err = Error;

            fn from_str(s: &str) -> Result<Self> {
                match s {
                    $($text => Ok($ty::$variant),)+
                    other => Err(invalid!("unknown {} '{other}'", stringify!($ty))),
                }
            }
        }
    };
}

text_enum!(Label { Genuine => "genuine", Spoof => "spoof" });
text_enum!(AttackType {
    None => "none",
    PrintBlur => "print_blur",
    ReplayMoire => "replay_moire",
    ColorCast => "color_cast",
    GlareBand => "glare_band",
    MediumBorder => "medium_border",
});
text_enum!(Split { Train => "train", Dev => "dev", Test => "test" });
text_enum!(Domain { A => "A", B => "B" });

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SampleRecord {
    pub id: String,
    pub image_path: String,
    pub label: Label,
    pub attack_type: AttackType,
    pub split: Split,
    pub seed: u64,
}

impl SampleRecord {
    /// Domain encoded in the id prefix (`A-...` / `B-...`).
    pub fn domain(&self) -> Result<Domain> {
        self.id
            .split('-')
            .next()
            .ok_or_else(|| invalid!("record id '{}' has no domain prefix", self.id))?
            .parse()
    }

    fn validate(&self) -> Result<()> {
        if (self.label == Label::Genuine) != (self.attack_type == AttackType::None) {
            return Err(invalid!(
                "record {}: label {} inconsistent with attack {}",
                self.id,
                self.label,
                self.attack_type
            ));
        }
        if self.id.is_empty() || self.id.contains(['\t', '\n']) || self.image_path.contains(['\t', '\n']) {
            return Err(invalid!("record fields must be nonempty and tab-free"));
        }
        Ok(())
    }
}

/// One generated sample: image, depth label and its manifest record.
#[derive(Debug, Clone, PartialEq)]
pub struct Sample {
    pub image: Tensor<f32>,
    pub depth: Tensor<f32>,
    pub record: SampleRecord,
}

/// Appearance and attack parameters that distinguish a capture domain.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DomainStyle {
    /// Red/blue gain pair emulating colour temperature.
    pub warmth: (f64, f64),
    /// Spatial frequency range (cycles per image) of the background texture.
    pub texture_freq: (f64, f64),
    pub texture_amp: f64,
    pub strength: (f64, f64),
}

impl Domain {
    pub fn style(self) -> DomainStyle {
        match self {
            Domain::A => DomainStyle {
                warmth: (1.06, 0.92),
                texture_freq: (1.0, 3.0),
                texture_amp: 0.08,
                strength: (0.25, 0.6),
            },
            Domain::B => DomainStyle {
                warmth: (0.94, 1.07),
                texture_freq: (4.0, 8.0),
                texture_amp: 0.06,
                strength: (0.45, 0.9),
            },
        }
    }
}

fn smoothstep(e0: f64, e1: f64, x: f64) -> f64 {
    let t = ((x - e0) / (e1 - e0)).clamp(0.0, 1.0);
    t * t * (3.0 - 2.0 * t)
}

/// Geometry of the synthetic head in normalized `[0,1]` image coordinates.
#[derive(Debug, Clone, Copy)]
struct Head {
    cx: f64,
    cy: f64,
    ax: f64,
    ay: f64,
}

impl Head {
    fn radius(&self, u: f64, v: f64) -> f64 {
        (((u - self.cx) / self.ax).powi(2) + ((v - self.cy) / self.ay).powi(2)).sqrt()
    }

    fn depth(&self, u: f64, v: f64) -> f64 {
        let r2 = self.radius(u, v).powi(2);
        (1.0 - r2).max(0.0).powf(0.75)
    }
}

fn draw_head(rng: &mut ChaCha8Rng) -> Head {
    Head {
        cx: 0.5 + rng.random_range(-0.05..0.05),
        cy: 0.5 + rng.random_range(-0.04..0.04),
        ax: rng.random_range(0.27..0.33),
        ay: rng.random_range(0.34..0.40),
    }
}

/// Renders one genuine face image and its pseudo-depth label from `seed`.
pub fn render_genuine(seed: u64, image_size: usize, domain: Domain) -> Result<(Tensor<f32>, Tensor<f32>)> {
    if image_size < 8 {
        return Err(invalid!("image size must be at least 8, got {image_size}"));
    }
    let style = domain.style();
    let mut rng = stream(seed, "corpus.face", 0);
    let head = draw_head(&mut rng);
    let r = rng.random_range(0.55..0.85);
    let g = r * rng.random_range(0.70..0.85);
    let b = g * rng.random_range(0.75..0.92);
    let skin = [r * style.warmth.0, g, b * style.warmth.1];
    let bg_level = rng.random_range(0.25..0.6);
    let bg = [
        bg_level * rng.random_range(0.85..1.15) * style.warmth.0,
        bg_level * rng.random_range(0.85..1.15),
        bg_level * rng.random_range(0.85..1.15) * style.warmth.1,
    ];
    let light = rng.random_range(0.0..std::f64::consts::TAU);
    let light_amt = rng.random_range(0.1..0.3);
    let (fx, fy) = (
        rng.random_range(style.texture_freq.0..style.texture_freq.1),
        rng.random_range(style.texture_freq.0..style.texture_freq.1),
    );
    let (px, py) = (rng.random_range(0.0..std::f64::consts::TAU), rng.random_range(0.0..std::f64::consts::TAU));
    let eye_dx = head.ax * rng.random_range(0.32..0.42);
    let eye_y = head.cy - head.ay * rng.random_range(0.15..0.25);
    let eye_r = head.ax * rng.random_range(0.10..0.15);
    let mouth_y = head.cy + head.ay * rng.random_range(0.40..0.50);
    let mouth_w = head.ax * rng.random_range(0.35..0.5);
    let mouth_h = head.ay * 0.06;

    let n = image_size;
    let mut img = vec![0f32; 3 * n * n];
    let tau = std::f64::consts::TAU;
    for i in 0..n {
        let v = (i as f64 + 0.5) / n as f64;
        for j in 0..n {
            let u = (j as f64 + 0.5) / n as f64;
            let tex = style.texture_amp * (tau * fx * u + px).sin() * (tau * fy * v + py).sin();
            let rad = head.radius(u, v);
            let inside = 1.0 - smoothstep(0.92, 1.0, rad);
            let shade = (0.55 + 0.45 * head.depth(u, v).sqrt())
                * (1.0 + light_amt * ((u - head.cx) * light.cos() + (v - head.cy) * light.sin()) / head.ax);
            let eye = [-1.0, 1.0]
                .iter()
                .map(|s| {
                    let d = ((u - head.cx - s * eye_dx).powi(2) + (v - eye_y).powi(2)).sqrt();
                    1.0 - smoothstep(eye_r * 0.6, eye_r, d)
                })
                .fold(0.0, f64::max);
            let mouth = (1.0 - smoothstep(mouth_w * 0.8, mouth_w, (u - head.cx).abs()))
                * (1.0 - smoothstep(mouth_h * 0.5, mouth_h, (v - mouth_y).abs()));
            for c in 0..3 {
                let mut face = skin[c] * shade;
                face = face * (1.0 - eye) + 0.08 * eye;
                let lip = [0.55, 0.18, 0.2][c] * shade;
                face = face * (1.0 - mouth) + lip * mouth;
                let back = bg[c] + tex;
                let val = back * (1.0 - inside) + face * inside;
                img[(c * n + i) * n + j] = (val.clamp(0.0, 1.0) * 2.0 - 1.0) as f32;
            }
        }
    }
    let depth = Tensor::from_fn(&[1, DEPTH_SIZE, DEPTH_SIZE], |k| {
        let (i, j) = (k / DEPTH_SIZE, k % DEPTH_SIZE);
        let (u, v) = ((j as f64 + 0.5) / DEPTH_SIZE as f64, (i as f64 + 0.5) / DEPTH_SIZE as f64);
        head.depth(u, v) as f32
    });
    Ok((Tensor::new(&[3, n, n], img)?, depth))
}

fn separable_blur(img: &Tensor<f64>, sigma: f64) -> Tensor<f64> {
    let radius = (3.0 * sigma).ceil().max(1.0) as isize;
    let taps: Vec<f64> = (-radius..=radius).map(|d| (-(d * d) as f64 / (2.0 * sigma * sigma)).exp()).collect();
    let norm: f64 = taps.iter().sum();
    let (c, h, w) = (img.shape()[0], img.shape()[1], img.shape()[2]);
    let pass = |src: &[f64], horizontal: bool| -> Vec<f64> {
        let mut out = vec![0.0; src.len()];
        for ch in 0..c {
            for i in 0..h {
                for j in 0..w {
                    let mut acc = 0.0;
                    for (k, tap) in taps.iter().enumerate() {
                        let d = k as isize - radius;
                        // clamp-to-edge
                        let (ii, jj) = if horizontal {
                            (i as isize, (j as isize + d).clamp(0, w as isize - 1))
                        } else {
                            ((i as isize + d).clamp(0, h as isize - 1), j as isize)
                        };
                        acc += tap * src[(ch * h + ii as usize) * w + jj as usize];
                    }
                    out[(ch * h + i) * w + j] = acc / norm;
                }
            }
        }
        out
    };
    let tmp = pass(img.data(), true);
    Tensor::new(img.shape(), pass(&tmp, false)).expect("shape preserved")
}

/// Applies a presentation-attack degradation of the given strength.
///
/// Every attack interpolates continuously from the identity at zero
/// strength. The output is clamped to `[-1,1]`.
pub fn apply_spoof(image: &Tensor<f32>, attack: AttackType, strength: f64, seed: u64) -> Result<Tensor<f32>> {
    if image.rank() != 3 || image.shape()[0] != 3 {
        return Err(invalid!("expected a [3,H,W] image, got {:?}", image.shape()));
    }
    if !(strength > 0.0 && strength <= 1.0) {
        return Err(invalid!("attack strength {strength} outside (0, 1]"));
    }
    let mut rng = stream(seed, "corpus.attack", 0);
    let x: Tensor<f64> = image.cast();
    let (h, w) = (x.shape()[1], x.shape()[2]);
    let s = strength;
    let tau = std::f64::consts::TAU;
    let coords = |k: usize| {
        let (i, j) = ((k / w) % h, k % w);
        ((j as f64 + 0.5) / w as f64, (i as f64 + 0.5) / h as f64, k / (h * w))
    };
    let out = match attack {
        AttackType::None => return Err(invalid!("attack type 'none' is not a spoof")),
        AttackType::ColorCast => {
            let gain: Vec<f64> = (0..3).map(|_| rng.random_range(-0.35..0.35)).collect();
            let offset: Vec<f64> = (0..3).map(|_| rng.random_range(-0.3..0.3)).collect();
            Tensor::from_fn(x.shape(), |k| {
                let c = coords(k).2;
                x.data()[k] * (1.0 + s * gain[c]) + s * offset[c]
            })
        }
        AttackType::ReplayMoire => {
            // two near-orthogonal high-frequency gratings in intensity space
            let f1 = rng.random_range(0.35..0.45) * w as f64;
            let f2 = rng.random_range(0.35..0.45) * h as f64;
            let a = rng.random_range(-0.3..0.3f64);
            let (p1, p2) = (rng.random_range(0.0..tau), rng.random_range(0.0..tau));
            Tensor::from_fn(x.shape(), |k| {
                let (u, v, _) = coords(k);
                let (ru, rv) = (u * a.cos() + v * a.sin(), v * a.cos() - u * a.sin());
                let pattern = 0.5 * ((tau * f1 * ru + p1).sin() + (tau * f2 * rv + p2).sin());
                let intensity = (x.data()[k] + 1.0) / 2.0;
                intensity * (1.0 + s * 0.2 * pattern) * 2.0 - 1.0
            })
        }
        AttackType::PrintBlur => {
            let sigma = rng.random_range(0.8..1.4);
            let near = separable_blur(&x, sigma);
            let far = separable_blur(&x, 2.5 * sigma);
            // blurred print with an unsharp-mask halo, blended in by strength
            let halo = 0.4;
            Tensor::from_fn(x.shape(), |k| {
                let printed = near.data()[k] + halo * (near.data()[k] - far.data()[k]);
                (1.0 - s) * x.data()[k] + s * printed
            })
        }
        AttackType::GlareBand => {
            let angle = rng.random_range(0.25..1.3f64) * if rng.random::<bool>() { 1.0 } else { -1.0 };
            let offset = rng.random_range(-0.25..0.25);
            let width = rng.random_range(0.08..0.16);
            let amp = rng.random_range(0.8..1.2);
            Tensor::from_fn(x.shape(), |k| {
                let (u, v, _) = coords(k);
                let d = (u - 0.5) * angle.cos() + (v - 0.5) * angle.sin() - offset;
                x.data()[k] + s * amp * (-(d / width).powi(2)).exp()
            })
        }
        AttackType::MediumBorder => {
            let frame = rng.random_range(0.06..0.12);
            let bezel: Vec<f64> = {
                let level = rng.random_range(-0.95..-0.6);
                (0..3).map(|_| level + rng.random_range(-0.05..0.05)).collect()
            };
            Tensor::from_fn(x.shape(), |k| {
                let (u, v, c) = coords(k);
                let edge = u.min(v).min(1.0 - u).min(1.0 - v);
                let mask = 1.0 - smoothstep(frame * 0.7, frame, edge);
                let xv = x.data()[k];
                xv + s * mask * (bezel[c] - xv)
            })
        }
    };
    Ok(out.map(|v| v.clamp(-1.0, 1.0)).cast())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct CorpusConfig {
    pub seed: u64,
    pub genuine_per_domain: usize,
    pub spoof_per_domain: usize,
    pub image_size: usize,
}

impl Default for CorpusConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            genuine_per_domain: 2000,
            spoof_per_domain: 2000,
            image_size: 32,
        }
    }
}

fn sample_seed(root: u64, domain: Domain, label: Label, index: usize) -> u64 {
    stream(root, &format!("corpus.{domain}.{label}"), index as u64).next_u64()
}

/// Parameters of a spoof sample, all derived from its seed.
fn spoof_plan(seed: u64, domain: Domain, index: usize) -> (AttackType, f64) {
    let (lo, hi) = domain.style().strength;
    let mut rng = stream(seed, "corpus.plan", 0);
    (AttackType::ATTACKS[index % 5], rng.random_range(lo..hi))
}

fn id_for(domain: Domain, label: Label, index: usize) -> String {
    let tag = match label {
        Label::Genuine => 'g',
        Label::Spoof => 's',
    };
    format!("{domain}-{tag}{index:05}")
}

/// `count` genuine samples of `domain`, deterministic per `(seed, index)`.
pub fn gen_genuine(seed: u64, count: usize, image_size: usize, domain: Domain) -> Result<Vec<Sample>> {
    if count == 0 {
        return Err(invalid!("count must be at least 1"));
    }
    (0..count)
        .map(|i| {
            let s = sample_seed(seed, domain, Label::Genuine, i);
            let (image, depth) = render_genuine(s, image_size, domain)?;
            let id = id_for(domain, Label::Genuine, i);
            Ok(Sample {
                image,
                depth,
                record: SampleRecord {
                    image_path: format!("images/{id}.png"),
                    id,
                    label: Label::Genuine,
                    attack_type: AttackType::None,
                    split: Split::Train,
                    seed: s,
                },
            })
        })
        .collect()
}

/// `count` spoof samples of `domain`: fresh faces with attacks cycled
/// through every type.
pub fn gen_spoof(seed: u64, count: usize, image_size: usize, domain: Domain) -> Result<Vec<Sample>> {
    if count == 0 {
        return Err(invalid!("count must be at least 1"));
    }
    (0..count)
        .map(|i| {
            let s = sample_seed(seed, domain, Label::Spoof, i);
            let (face, _) = render_genuine(s, image_size, domain)?;
            let (attack, strength) = spoof_plan(s, domain, i);
            let image = apply_spoof(&face, attack, strength, s)?;
            let id = id_for(domain, Label::Spoof, i);
            Ok(Sample {
                image,
                depth: Tensor::zeros(&[1, DEPTH_SIZE, DEPTH_SIZE]),
                record: SampleRecord {
                    image_path: format!("images/{id}.png"),
                    id,
                    label: Label::Spoof,
                    attack_type: attack,
                    split: Split::Train,
                    seed: s,
                },
            })
        })
        .collect()
}

/// Regenerates a sample from its record alone.
pub fn regenerate(record: &SampleRecord, image_size: usize) -> Result<Sample> {
    record.validate()?;
    let domain = record.domain()?;
    let (face, depth) = render_genuine(record.seed, image_size, domain)?;
    let (image, depth) = match record.label {
        Label::Genuine => (face, depth),
        Label::Spoof => {
            let index: usize = record.id[3..]
                .parse()
                .map_err(|_| invalid!("record id '{}' has no index", record.id))?;
            let (attack, strength) = spoof_plan(record.seed, domain, index);
            if attack != record.attack_type {
                return Err(invalid!("record {} does not match its generator", record.id));
            }
            (
                apply_spoof(&face, attack, strength, record.seed)?,
                Tensor::zeros(&[1, DEPTH_SIZE, DEPTH_SIZE]),
            )
        }
    };
    Ok(Sample {
        image,
        depth,
        record: record.clone(),
    })
}

/// Both labels of one domain, with records carrying the intra-domain split.
pub fn gen_domain(config: &CorpusConfig, domain: Domain) -> Result<Vec<Sample>> {
    let mut samples = gen_genuine(config.seed, config.genuine_per_domain, config.image_size, domain)?;
    samples.extend(gen_spoof(config.seed, config.spoof_per_domain, config.image_size, domain)?);
    let records: Vec<_> = samples.iter().map(|s| s.record.clone()).collect();
    let split = stratified_split(&records, &[0.7, 0.1, 0.2])?;
    for (s, sp) in samples.iter_mut().zip(split) {
        s.record.split = sp;
    }
    Ok(samples)
}

/// Both domains, A first.
pub fn gen_corpus(config: &CorpusConfig) -> Result<Vec<Sample>> {
    let mut all = gen_domain(config, Domain::A)?;
    all.extend(gen_domain(config, Domain::B)?);
    Ok(all)
}

/// Assigns each record to one of `fractions.len()` splits, stratified by
/// (label, attack). Within each stratum records are ordered by a hash of
/// their id, given keys `(i + 0.5) / n`, and all strata are merged by key so
/// every split receives a proportional share of every stratum.
fn stratified_split(records: &[SampleRecord], fractions: &[f64; 3]) -> Result<Vec<Split>> {
    let mut strata: std::collections::BTreeMap<(Label, AttackType), Vec<usize>> = Default::default();
    for (i, r) in records.iter().enumerate() {
        strata.entry((r.label, r.attack_type)).or_default().push(i);
    }
    let mut keyed: Vec<(f64, u64, usize)> = Vec::with_capacity(records.len());
    for members in strata.values_mut() {
        members.sort_by_key(|&i| (component_hash(&records[i].id), i));
        let n = members.len() as f64;
        for (rank, &i) in members.iter().enumerate() {
            keyed.push(((rank as f64 + 0.5) / n, component_hash(&records[i].id), i));
        }
    }
    keyed.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)).then(a.2.cmp(&b.2)));
    let total = records.len() as f64;
    let n_train = (fractions[0] * total).round() as usize;
    let n_dev = ((fractions[0] + fractions[1]) * total).round() as usize - n_train;
    let mut out = vec![Split::Test; records.len()];
    for (pos, &(_, _, i)) in keyed.iter().enumerate() {
        out[i] = if pos < n_train {
            Split::Train
        } else if pos < n_train + n_dev {
            Split::Dev
        } else {
            Split::Test
        };
    }
    Ok(out)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum ProtocolScheme {
    /// Train, dev and test all within one domain.
    Intra(Domain),
    /// Train and dev on domain A, test on domain B.
    CrossAB,
    CrossBA,
}

impl FromStr for ProtocolScheme {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "intra" | "intra_a" => Ok(Self::Intra(Domain::A)),
            "intra_b" => Ok(Self::Intra(Domain::B)),
            "cross_ab" => Ok(Self::CrossAB),
            "cross_ba" => Ok(Self::CrossBA),
            other => Err(invalid!("unknown protocol '{other}'")),
        }
    }
}

impl fmt::Display for ProtocolScheme {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::Intra(Domain::A) => "intra_a",
            Self::Intra(Domain::B) => "intra_b",
            Self::CrossAB => "cross_ab",
            Self::CrossBA => "cross_ba",
        })
    }
}

/// Records with protocol-specific splits.
#[derive(Debug, Clone, PartialEq)]
pub struct Protocol {
    pub scheme: ProtocolScheme,
    pub records: Vec<SampleRecord>,
}

impl Protocol {
    pub fn split(&self, split: Split) -> impl Iterator<Item = &SampleRecord> {
        self.records.iter().filter(move |r| r.split == split)
    }
}

pub fn build_protocols(records: &[SampleRecord], scheme: ProtocolScheme) -> Result<Protocol> {
    for r in records {
        r.validate()?;
    }
    let (source, target) = match scheme {
        ProtocolScheme::Intra(d) => (d, None),
        ProtocolScheme::CrossAB => (Domain::A, Some(Domain::B)),
        ProtocolScheme::CrossBA => (Domain::B, Some(Domain::A)),
    };
    let mut src = Vec::new();
    let mut tgt = Vec::new();
    for r in records {
        let d = r.domain()?;
        if d == source {
            src.push(r.clone());
        } else if Some(d) == target {
            tgt.push(r.clone());
        }
    }
    for (name, set) in [("source", &src), ("target", &tgt)] {
        if name == "target" && target.is_none() {
            continue;
        }
        let genuine = set.iter().any(|r| r.label == Label::Genuine);
        let spoof = set.iter().any(|r| r.label == Label::Spoof);
        if !(genuine && spoof) {
            return Err(invalid!("{name} domain of {scheme} needs both genuine and spoof records"));
        }
    }
    let fractions = if target.is_some() {
        [0.875, 0.125, 0.0]
    } else {
        [0.7, 0.1, 0.2]
    };
    let splits = stratified_split(&src, &fractions)?;
    for (r, sp) in src.iter_mut().zip(splits) {
        r.split = sp;
    }
    for r in &mut tgt {
        r.split = Split::Test;
    }
    src.extend(tgt);
    Ok(Protocol { scheme, records: src })
}

/// Writes records as tab-separated lines without a header.
pub fn write_manifest<W: Write>(w: &mut W, records: &[SampleRecord]) -> Result<()> {
    for r in records {
        r.validate()?;
        writeln!(
            w,
            "{}\t{}\t{}\t{}\t{}\t{}",
            r.id, r.image_path, r.label, r.attack_type, r.split, r.seed
        )?;
    }
    Ok(())
}

pub fn read_manifest<Rd: BufRead>(r: Rd) -> Result<Vec<SampleRecord>> {
    let mut out = Vec::new();
    let mut seen = std::collections::HashSet::new();
    for (n, line) in r.lines().enumerate() {
        let line = line?;
        if line.is_empty() {
            continue;
        }
        let f: Vec<&str> = line.split('\t').collect();
        if f.len() != 6 {
            return Err(Error::Format(format!("manifest line {}: expected 6 fields, got {}", n + 1, f.len())));
        }
        let rec = SampleRecord {
            id: f[0].to_string(),
            image_path: f[1].to_string(),
            label: f[2].parse()?,
            attack_type: f[3].parse()?,
            split: f[4].parse()?,
            seed: f[5]
                .parse()
                .map_err(|_| Error::Format(format!("manifest line {}: bad seed '{}'", n + 1, f[5])))?,
        };
        rec.validate()?;
        if !seen.insert(rec.id.clone()) {
            return Err(Error::Format(format!("duplicate id '{}' in manifest", rec.id)));
        }
        out.push(rec);
    }
    Ok(out)
}

/// Maps `[-1,1]` to 8-bit with round-half-away-from-zero.
pub fn quantize(v: f32) -> u8 {
    ((v.clamp(-1.0, 1.0) as f64 + 1.0) / 2.0 * 255.0).round() as u8
}

pub fn dequantize(q: u8) -> f32 {
    (q as f64 / 255.0 * 2.0 - 1.0) as f32
}

fn write_png_bytes(path: &Path, width: usize, height: usize, color: png::ColorType, bytes: &[u8]) -> Result<()> {
    let file = std::io::BufWriter::new(std::fs::File::create(path)?);
    let mut enc = png::Encoder::new(file, width as u32, height as u32);
    enc.set_color(color);
    enc.set_depth(png::BitDepth::Eight);
    let mut writer = enc.write_header().map_err(|e| Error::Format(e.to_string()))?;
    writer.write_image_data(bytes).map_err(|e| Error::Format(e.to_string()))?;
    writer.finish().map_err(|e| Error::Format(e.to_string()))?;
    Ok(())
}

fn read_png_bytes(path: &Path) -> Result<(usize, usize, png::ColorType, Vec<u8>)> {
    let decoder = png::Decoder::new(std::io::BufReader::new(std::fs::File::open(path)?));
    let mut reader = decoder.read_info().map_err(|e| Error::Format(format!("{}: {e}", path.display())))?;
    let mut buf = vec![0; reader.output_buffer_size().ok_or_else(|| Error::Format("png too large".into()))?];
    let info = reader.next_frame(&mut buf).map_err(|e| Error::Format(format!("{}: {e}", path.display())))?;
    if info.bit_depth != png::BitDepth::Eight {
        return Err(Error::Format(format!("{}: expected 8-bit png", path.display())));
    }
    buf.truncate(info.buffer_size());
    Ok((info.width as usize, info.height as usize, info.color_type, buf))
}

/// Writes a `[3,H,W]` image in `[-1,1]` as 8-bit RGB.
pub fn write_image_png(path: &Path, image: &Tensor<f32>) -> Result<()> {
    if image.rank() != 3 || image.shape()[0] != 3 {
        return Err(invalid!("expected a [3,H,W] image, got {:?}", image.shape()));
    }
    let (h, w) = (image.shape()[1], image.shape()[2]);
    let mut bytes = Vec::with_capacity(3 * h * w);
    for k in 0..h * w {
        for c in 0..3 {
            bytes.push(quantize(image.data()[c * h * w + k]));
        }
    }
    write_png_bytes(path, w, h, png::ColorType::Rgb, &bytes)
}

pub fn read_image_png(path: &Path) -> Result<Tensor<f32>> {
    let (w, h, color, bytes) = read_png_bytes(path)?;
    if color != png::ColorType::Rgb {
        return Err(Error::Format(format!("{}: expected an RGB png", path.display())));
    }
    Tensor::new(&[3, h, w], (0..3 * h * w).map(|k| {
        let (c, p) = (k / (h * w), k % (h * w));
        dequantize(bytes[p * 3 + c])
    }).collect())
}

/// Writes a `[1,H,W]` map in `[0,1]` as 8-bit grayscale.
pub fn write_depth_png(path: &Path, depth: &Tensor<f32>) -> Result<()> {
    if depth.rank() != 3 || depth.shape()[0] != 1 {
        return Err(invalid!("expected a [1,H,W] map, got {:?}", depth.shape()));
    }
    let bytes: Vec<u8> = depth.data().iter().map(|v| (v.clamp(0.0, 1.0) as f64 * 255.0).round() as u8).collect();
    write_png_bytes(path, depth.shape()[2], depth.shape()[1], png::ColorType::Grayscale, &bytes)
}

pub fn read_depth_png(path: &Path) -> Result<Tensor<f32>> {
    let (w, h, color, bytes) = read_png_bytes(path)?;
    if color != png::ColorType::Grayscale {
        return Err(Error::Format(format!("{}: expected a grayscale png", path.display())));
    }
    Tensor::new(&[1, h, w], bytes.iter().map(|&q| (q as f64 / 255.0) as f32).collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn small() -> CorpusConfig {
        CorpusConfig {
            seed: 3,
            genuine_per_domain: 30,
            spoof_per_domain: 30,
            image_size: 32,
        }
    }

    #[test]
    fn generation_is_deterministic() {
        let a = gen_domain(&small(), Domain::A).unwrap();
        let b = gen_domain(&small(), Domain::A).unwrap();
        assert_eq!(a, b);
        let c = gen_domain(&CorpusConfig { seed: 4, ..small() }, Domain::A).unwrap();
        assert_ne!(a[0].image, c[0].image);
    }

    #[test]
    fn records_regenerate_bitwise() {
        for s in gen_domain(&small(), Domain::B).unwrap().iter().step_by(7) {
            assert_eq!(regenerate(&s.record, 32).unwrap(), *s);
        }
    }

    #[test]
    fn depth_labels_peak_inside_and_vanish_at_corners() {
        for s in gen_genuine(5, 40, 32, Domain::A).unwrap() {
            let d = s.depth.data();
            let max = d.iter().cloned().fold(f32::MIN, f32::max);
            assert!(max > 0.5 && max <= 1.0, "max {max}");
            for k in [0, DEPTH_SIZE - 1, DEPTH_SIZE * (DEPTH_SIZE - 1), DEPTH_SIZE * DEPTH_SIZE - 1] {
                assert_eq!(d[k], 0.0);
            }
            assert!(d.iter().all(|v| (0.0..=1.0).contains(v)));
        }
        for s in gen_spoof(5, 10, 32, Domain::A).unwrap() {
            assert!(s.depth.data().iter().all(|v| *v == 0.0));
        }
    }

    #[test]
    fn population_mean_is_near_zero() {
        let samples = gen_genuine(11, 1000, 32, Domain::A).unwrap();
        let mean = samples.iter().map(|s| s.image.mean() as f64).sum::<f64>() / 1000.0;
        assert!(mean.abs() < 0.2, "mean {mean}");
        assert!(samples.iter().all(|s| s.image.data().iter().all(|v| v.abs() <= 1.0)));
    }

    #[test]
    fn attacks_vanish_at_zero_strength_and_show_at_half() {
        let face = gen_genuine(2, 1, 32, Domain::A).unwrap().remove(0).image;
        for attack in AttackType::ATTACKS {
            let weak = apply_spoof(&face, attack, 1e-6, 9).unwrap();
            let diff = weak.zip_map(&face, |a, b| (a - b).abs()).unwrap().max_abs();
            assert!(diff < 1e-3, "{attack} at tiny strength moved {diff}");
            let half = apply_spoof(&face, attack, 0.5, 9).unwrap();
            let mad = half.zip_map(&face, |a, b| (a - b).abs()).unwrap().mean();
            assert!(mad > 1e-3, "{attack} at 0.5 barely changed ({mad})");
        }
        assert!(apply_spoof(&face, AttackType::None, 0.5, 0).is_err());
        assert!(apply_spoof(&face, AttackType::GlareBand, 0.0, 0).is_err());
    }

    #[test]
    fn moire_barely_shifts_mean_luminance() {
        let faces = gen_genuine(8, 100, 32, Domain::A).unwrap();
        let mut worst = 0f64;
        for (i, f) in faces.iter().enumerate() {
            let out = apply_spoof(&f.image, AttackType::ReplayMoire, 1.0, i as u64).unwrap();
            worst = worst.max((out.mean() - f.image.mean()).abs() as f64);
        }
        // range of [-1,1] is 2
        assert!(worst < 0.02 * 2.0, "shift {worst}");
    }

    #[test]
    fn labels_match_attacks() {
        for s in gen_corpus(&small()).unwrap() {
            s.record.validate().unwrap();
        }
        let mut bad = gen_genuine(1, 1, 32, Domain::A).unwrap().remove(0).record;
        bad.attack_type = AttackType::ColorCast;
        assert!(bad.validate().is_err());
    }

    fn records() -> Vec<SampleRecord> {
        gen_corpus(&CorpusConfig {
            seed: 1,
            genuine_per_domain: 57,
            spoof_per_domain: 44,
            image_size: 8,
        })
        .unwrap()
        .into_iter()
        .map(|s| s.record)
        .collect()
    }

    #[test]
    fn intra_split_sizes_and_disjointness() {
        let recs = records();
        let p = build_protocols(&recs, ProtocolScheme::Intra(Domain::A)).unwrap();
        assert_eq!(p.records.len(), 101);
        let sizes: Vec<usize> = [Split::Train, Split::Dev, Split::Test].iter().map(|s| p.split(*s).count()).collect();
        for (got, frac) in sizes.iter().zip([0.7, 0.1, 0.2]) {
            assert!((*got as f64 - frac * 101.0).abs() <= 1.0, "{sizes:?}");
        }
        let ids: std::collections::HashSet<_> = p.records.iter().map(|r| &r.id).collect();
        assert_eq!(ids.len(), p.records.len());
        for split in [Split::Train, Split::Dev, Split::Test] {
            let labels: std::collections::HashSet<_> = p.split(split).map(|r| r.label).collect();
            assert_eq!(labels.len(), 2, "{split} misses a label");
        }
    }

    #[test]
    fn cross_protocols_separate_domains() {
        let recs = records();
        for (scheme, src) in [(ProtocolScheme::CrossAB, Domain::A), (ProtocolScheme::CrossBA, Domain::B)] {
            let p = build_protocols(&recs, scheme).unwrap();
            assert_eq!(p.records.len(), recs.len());
            for r in &p.records {
                let train_side = r.split != Split::Test;
                assert_eq!(train_side, r.domain().unwrap() == src);
            }
        }
    }

    #[test]
    fn single_label_input_is_rejected() {
        let recs: Vec<_> = records().into_iter().filter(|r| r.label == Label::Genuine).collect();
        assert!(build_protocols(&recs, ProtocolScheme::Intra(Domain::A)).is_err());
    }

    #[test]
    fn manifest_round_trip_is_byte_identical() {
        let recs = records();
        let mut first = Vec::new();
        write_manifest(&mut first, &recs).unwrap();
        let back = read_manifest(first.as_slice()).unwrap();
        assert_eq!(back, recs);
        let mut second = Vec::new();
        write_manifest(&mut second, &back).unwrap();
        assert_eq!(first, second);
        assert!(read_manifest("a\tb\tgenuine\n".as_bytes()).is_err());
        let dup = format!("{0}{0}", String::from_utf8(first[..first.iter().position(|&b| b == b'\n').unwrap() + 1].to_vec()).unwrap());
        assert!(read_manifest(dup.as_bytes()).is_err());
    }

    #[test]
    fn quantization_rounds_half_away_from_zero() {
        assert_eq!(quantize(-1.0), 0);
        assert_eq!(quantize(1.0), 255);
        // (v + 1) / 2 * 255 = 127.5 exactly at v = 0
        assert_eq!(quantize(0.0), 128);
        assert_eq!(quantize(5.0), 255);
    }

    #[test]
    fn png_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let s = gen_genuine(4, 1, 16, Domain::B).unwrap().remove(0);
        let (ip, dp) = (dir.path().join("i.png"), dir.path().join("d.png"));
        write_image_png(&ip, &s.image).unwrap();
        write_depth_png(&dp, &s.depth).unwrap();
        let img = read_image_png(&ip).unwrap();
        assert_eq!(img.shape(), &[3, 16, 16]);
        assert!(img.zip_map(&s.image, |a, b| (a - b).abs()).unwrap().max_abs() <= 1.0 / 255.0 + 1e-6);
        // a decoded image is already on the grid, so it re-encodes exactly
        write_image_png(&ip, &img).unwrap();
        assert_eq!(read_image_png(&ip).unwrap(), img);
        let depth = read_depth_png(&dp).unwrap();
        assert!(depth.zip_map(&s.depth, |a, b| (a - b).abs()).unwrap().max_abs() <= 0.5 / 255.0 + 1e-6);
        assert!(read_depth_png(&ip).is_err());
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(32))]
        #[test]
        fn quantize_inverts_dequantize(q in 0u8..=255) {
            prop_assert_eq!(quantize(dequantize(q)), q);
        }
    }
}
