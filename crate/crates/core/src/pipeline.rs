//! Experiment steps shared by the command line and the acceptance suite.
//! Everything works on in-memory samples so callers decide where data lives.

use crate::corpus::{Label, Protocol, Sample, Split};
use crate::denoiser::{init_denoiser, DenoiserConfig, DenoiserParams, DomainTag};
use crate::detector::{init_detector, score_examples, train_detector, DetectorConfig, DetectorExample, DetectorParams, DetectorRecord, DetectorTrainConfig, InputMode};
use crate::diffusion::{despoof_batch, mse, round_trip, train_diffusion, DiffusionTrainConfig, NoisePattern, TrainRecord};
use crate::error::{invalid, Result};
use crate::metrics::{roc, MetricsReport, RocPoint, ScoreSet};
use crate::numerics::Tensor;
use crate::rng::child_seed;
use crate::schedule::NoiseSchedule;

/// Samples whose records fall in `split` of `protocol`, in protocol order.
pub fn protocol_split<'a>(samples: &'a [Sample], protocol: &Protocol, split: Split) -> Result<Vec<&'a Sample>> {
    let index: std::collections::HashMap<&str, &Sample> = samples.iter().map(|s| (s.record.id.as_str(), s)).collect();
    protocol
        .split(split)
        .map(|r| {
            index
                .get(r.id.as_str())
                .copied()
                .ok_or_else(|| invalid!("protocol record {} has no sample", r.id))
        })
        .collect()
}

pub fn stack_images(samples: &[&Sample]) -> Result<Tensor<f32>> {
    if samples.is_empty() {
        return Err(invalid!("no samples to stack"));
    }
    Tensor::stack(&samples.iter().map(|s| s.image.clone()).collect::<Vec<_>>())
}

/// Samples a model with `tag` is trained on: everything for the spoof-union
/// model, genuine faces only for the genuine model.
pub fn training_pool<'a>(samples: &[&'a Sample], tag: DomainTag) -> Vec<&'a Sample> {
    samples
        .iter()
        .copied()
        .filter(|s| tag == DomainTag::SpoofUnion || s.record.label == Label::Genuine)
        .collect()
}

/// Seeds of the denoiser with `tag` under `root`.
pub fn denoiser_seeds(root: u64, tag: DomainTag) -> (u64, u64) {
    (
        child_seed(root, &format!("denoiser.init.{}", tag.as_str())),
        child_seed(root, &format!("diffusion.train.{}", tag.as_str())),
    )
}

/// Trains the denoiser for `tag` on the matching part of `train`, checking
/// round trips on at most `holdout_limit` genuine samples of `holdout`.
/// With `warm_start` the weights start from that model instead of a fresh
/// initialization.
#[allow(clippy::too_many_arguments)]
pub fn train_bridge_model(
    tag: DomainTag,
    warm_start: Option<&DenoiserParams<f32>>,
    train: &[&Sample],
    holdout: &[&Sample],
    holdout_limit: usize,
    schedule: &NoiseSchedule,
    model: DenoiserConfig,
    train_cfg: DiffusionTrainConfig,
    root_seed: u64,
    on_record: impl FnMut(&TrainRecord),
) -> Result<(DenoiserParams<f32>, Vec<TrainRecord>)> {
    let pool = training_pool(train, tag);
    if pool.is_empty() {
        return Err(invalid!("no training samples for the {} model", tag.as_str()));
    }
    let (init_seed, train_seed) = denoiser_seeds(root_seed, tag);
    let init = match warm_start {
        Some(w) => {
            if w.config.image_size != model.image_size || w.config.channels != model.channels {
                return Err(invalid!("warm-start model does not match the configured image shape"));
            }
            DenoiserParams {
                domain_tag: tag,
                ..w.clone()
            }
        }
        None => init_denoiser(DenoiserConfig { seed: init_seed, ..model }, tag)?,
    };
    let data = stack_images(&pool)?;
    let held: Vec<&Sample> = training_pool(holdout, DomainTag::GenuineOnly).into_iter().take(holdout_limit).collect();
    let held = if held.is_empty() { None } else { Some(stack_images(&held)?) };
    let cfg = DiffusionTrainConfig { seed: train_seed, ..train_cfg };
    train_diffusion(&init, &data, held.as_ref(), schedule, &cfg, on_record)
}

/// Round-trip reconstruction error of `model` on `images: [N,C,H,W]`.
pub fn round_trip_mse(model: &DenoiserParams<f32>, images: &Tensor<f32>, schedule: &NoiseSchedule, steps: usize) -> Result<f64> {
    mse(&round_trip(images, model, schedule, steps)?, images)
}

/// De-spoofs every sample in batches, returning reconstructions and noise
/// patterns in input order. `on_batch` receives the count done so far.
pub fn despoof_samples(
    samples: &[&Sample],
    spoof: &DenoiserParams<f32>,
    genuine: &DenoiserParams<f32>,
    schedule: &NoiseSchedule,
    steps: usize,
    batch_size: usize,
    mut on_batch: impl FnMut(usize),
) -> Result<Vec<(Tensor<f32>, NoisePattern<f32>)>> {
    let mut out = Vec::with_capacity(samples.len());
    for chunk in samples.chunks(batch_size.max(1)) {
        let (x_g, noise) = despoof_batch(&stack_images(chunk)?, spoof, genuine, schedule, steps)?;
        for (i, n) in noise.into_iter().enumerate() {
            out.push((x_g.index0(i)?, n));
        }
        on_batch(out.len());
    }
    Ok(out)
}

/// Mean noise energy of the genuine and spoof members of `samples`.
pub fn energy_by_label(samples: &[&Sample], noise: &[NoisePattern<f32>]) -> Result<(f64, f64)> {
    if samples.len() != noise.len() {
        return Err(invalid!("{} samples but {} noise patterns", samples.len(), noise.len()));
    }
    let mut sums = [(0.0, 0usize); 2];
    for (s, n) in samples.iter().zip(noise) {
        let slot = &mut sums[(s.record.label == Label::Spoof) as usize];
        slot.0 += n.energy();
        slot.1 += 1;
    }
    if sums.iter().any(|(_, c)| *c == 0) {
        return Err(invalid!("energy comparison needs both labels"));
    }
    Ok((sums[0].0 / sums[0].1 as f64, sums[1].0 / sums[1].1 as f64))
}

/// Pairs samples with their noise maps. `noise` must be aligned with `samples`
/// when given.
pub fn detector_examples(samples: &[&Sample], noise: Option<&[Tensor<f32>]>) -> Result<Vec<DetectorExample>> {
    if let Some(n) = noise {
        if n.len() != samples.len() {
            return Err(invalid!("{} samples but {} noise maps", samples.len(), n.len()));
        }
    }
    Ok(samples
        .iter()
        .enumerate()
        .map(|(i, s)| DetectorExample {
            rgb: s.image.clone(),
            noise: noise.map(|n| n[i].clone()),
            depth: s.depth.clone(),
            label: s.record.label,
        })
        .collect())
}

/// Seed of the detector for input mode `inputs` under `root`.
pub fn detector_seeds(root: u64, inputs: InputMode) -> (u64, u64) {
    (
        child_seed(root, &format!("detector.init.{inputs}")),
        child_seed(root, &format!("detector.train.{inputs}")),
    )
}

/// Trains a detector with input mode `config.inputs`, using `dev` for model
/// selection.
pub fn train_detector_run(
    config: DetectorConfig,
    train_cfg: DetectorTrainConfig,
    train: &[DetectorExample],
    dev: &[DetectorExample],
    root_seed: u64,
    on_record: impl FnMut(&DetectorRecord),
) -> Result<(DetectorParams<f32>, Vec<DetectorRecord>)> {
    let (init_seed, train_seed) = detector_seeds(root_seed, config.inputs);
    let init = init_detector(DetectorConfig { seed: init_seed, ..config })?;
    train_detector(&init, train, dev, &DetectorTrainConfig { seed: train_seed, ..train_cfg }, on_record)
}

pub fn score_set(params: &DetectorParams<f32>, examples: &[DetectorExample], fuse: bool) -> Result<ScoreSet> {
    let scores = score_examples(params, examples, fuse, 64)?;
    ScoreSet::new(scores, examples.iter().map(|e| e.label).collect())
}

/// Test-set report with the threshold fixed on `dev`, plus the test ROC sweep.
pub fn evaluate_detector(
    params: &DetectorParams<f32>,
    dev: &[DetectorExample],
    test: &[DetectorExample],
    fuse: bool,
) -> Result<(MetricsReport, Vec<RocPoint>)> {
    let dev_set = if dev.is_empty() { None } else { Some(score_set(params, dev, fuse)?) };
    let test_set = score_set(params, test, fuse)?;
    Ok((MetricsReport::evaluate(dev_set.as_ref(), &test_set)?, roc(&test_set)?))
}
