//! Command implementations behind the `despoof` binary. Each command reads
//! and writes artifacts under the output directory:
//!
//! ```text
//! corpus/manifest.tsv, corpus/images/<id>.png, corpus/depth/<id>.png
//! models/denoiser_<domain_tag>.dspd
//! despoof/steps<N>/{records.tsv, recon/<id>.png, noise/<id>.dspt}
//! detectors/detector_<tag>.dspc
//! logs/*.tsv
//! reports/<tag>_<protocol>.txt, reports/<tag>_<protocol>_roc.tsv
//! ```

use std::fs;
use std::io::{BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use clap::{Parser, Subcommand, ValueEnum};
use log::info;

use crate::config::RunConfig;
use crate::corpus::{
    build_protocols, gen_domain, read_depth_png, read_image_png, read_manifest, write_depth_png, write_image_png, write_manifest, Protocol,
    ProtocolScheme, Sample, SampleRecord, Split,
};
use crate::denoiser::{DenoiserParams, DomainTag};
use crate::detector::{DetectorParams, InputMode};
use crate::diffusion::NoisePattern;
use crate::error::{Error, Result};
use crate::metrics::roc_table;
use crate::numerics::{serial, Tensor};
use crate::pipeline;

#[derive(Debug, Parser)]
#[command(name = "despoof", version, about = "Diffusion de-spoofing and two-stream anti-spoofing detector")]
pub struct Cli {
    /// Run configuration file; every key is optional.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Root seed, overriding the configuration.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Output directory, overriding the configuration.
    #[arg(long, global = true)]
    pub out: Option<PathBuf>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum TrainDomain {
    /// Spoof and genuine faces (the source-side model).
    All,
    /// Genuine faces only (the target-side model).
    Genuine,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate the synthetic corpus: images, depth labels and manifest.
    Corpus,
    /// Train one of the two bridge denoisers on the protocol's train split.
    TrainDiffusion {
        #[arg(long, value_enum)]
        domain: TrainDomain,
    },
    /// De-spoof a protocol split (all splits by default).
    Despoof {
        #[arg(long)]
        split: Option<Split>,
        /// ODE steps, overriding `diffusion.ode_steps`.
        #[arg(long)]
        steps: Option<usize>,
    },
    /// Train a detector with the given input configuration.
    TrainDetector {
        #[arg(long)]
        inputs: Option<InputMode>,
        #[arg(long)]
        steps: Option<usize>,
    },
    /// Score the test split and write a metrics report.
    Eval {
        #[arg(long)]
        protocol: Option<ProtocolScheme>,
        #[arg(long)]
        inputs: Option<InputMode>,
        #[arg(long)]
        steps: Option<usize>,
    },
}

/// Loads the configuration and applies command-line overrides.
pub fn resolve_config(cli: &Cli) -> Result<RunConfig> {
    let mut cfg = match &cli.config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    if let Some(s) = cli.seed {
        cfg.seed = s;
    }
    if let Some(o) = &cli.out {
        cfg.out_dir = o.clone();
    }
    Ok(cfg)
}

pub fn run(cli: &Cli) -> Result<()> {
    let cfg = resolve_config(cli)?;
    let layout = Layout::new(&cfg.out_dir);
    match &cli.command {
        Command::Corpus => cmd_corpus(&cfg, &layout),
        Command::TrainDiffusion { domain } => cmd_train_diffusion(&cfg, &layout, *domain),
        Command::Despoof { split, steps } => cmd_despoof(&cfg, &layout, *split, steps.unwrap_or(cfg.diffusion.ode_steps)),
        Command::TrainDetector { inputs, steps } => {
            let inputs = inputs.map_or_else(|| cfg.input_mode(), Ok)?;
            cmd_train_detector(&cfg, &layout, inputs, steps.unwrap_or(cfg.diffusion.ode_steps))
        }
        Command::Eval { protocol, inputs, steps } => {
            let scheme = protocol.map_or_else(|| cfg.protocol(), Ok)?;
            let inputs = inputs.map_or_else(|| cfg.input_mode(), Ok)?;
            cmd_eval(&cfg, &layout, scheme, inputs, steps.unwrap_or(cfg.diffusion.ode_steps))
        }
    }
}

/// Paths of every artifact under one output directory.
#[derive(Debug, Clone)]
pub struct Layout {
    root: PathBuf,
}

impl Layout {
    pub fn new(root: &Path) -> Self {
        Self { root: root.to_path_buf() }
    }

    pub fn corpus_dir(&self) -> PathBuf {
        self.root.join("corpus")
    }

    pub fn manifest(&self) -> PathBuf {
        self.corpus_dir().join("manifest.tsv")
    }

    pub fn depth_path(&self, id: &str) -> PathBuf {
        self.corpus_dir().join("depth").join(format!("{id}.png"))
    }

    pub fn denoiser(&self, tag: DomainTag) -> PathBuf {
        self.root.join("models").join(format!("denoiser_{}.dspd", tag.as_str()))
    }

    pub fn despoof_dir(&self, steps: usize) -> PathBuf {
        self.root.join("despoof").join(format!("steps{steps}"))
    }

    pub fn noise_path(&self, steps: usize, id: &str) -> PathBuf {
        self.despoof_dir(steps).join("noise").join(format!("{id}.dspt"))
    }

    pub fn recon_path(&self, steps: usize, id: &str) -> PathBuf {
        self.despoof_dir(steps).join("recon").join(format!("{id}.png"))
    }

    pub fn detector(&self, tag: &str) -> PathBuf {
        self.root.join("detectors").join(format!("detector_{tag}.dspc"))
    }

    pub fn log(&self, name: &str) -> PathBuf {
        self.root.join("logs").join(format!("{name}.tsv"))
    }

    pub fn report(&self, tag: &str, scheme: ProtocolScheme) -> PathBuf {
        self.root.join("reports").join(format!("{tag}_{scheme}.txt"))
    }

    pub fn roc(&self, tag: &str, scheme: ProtocolScheme) -> PathBuf {
        self.root.join("reports").join(format!("{tag}_{scheme}_roc.tsv"))
    }
}

/// Artifact tag of a detector: noise-fed detectors depend on the ODE steps.
pub fn detector_tag(inputs: InputMode, steps: usize) -> String {
    if inputs.needs_noise() {
        format!("{inputs}_s{steps}")
    } else {
        inputs.to_string()
    }
}

fn create(path: &Path) -> Result<BufWriter<fs::File>> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir)?;
    }
    Ok(BufWriter::new(fs::File::create(path)?))
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    let mut w = create(path)?;
    w.write_all(text.as_bytes())?;
    w.flush()?;
    Ok(())
}

fn missing(what: &str, path: &Path, hint: &str) -> Error {
    Error::InvalidArgument(format!("{what} not found at {} ({hint})", path.display()))
}

pub fn cmd_corpus(cfg: &RunConfig, layout: &Layout) -> Result<()> {
    let corpus = cfg.corpus_config();
    let mut records = Vec::new();
    for domain in cfg.domains()? {
        info!("generating domain {domain}");
        for s in gen_domain(&corpus, domain)? {
            let image_path = layout.corpus_dir().join(&s.record.image_path);
            if let Some(dir) = image_path.parent() {
                fs::create_dir_all(dir)?;
            }
            write_image_png(&image_path, &s.image)?;
            let depth_path = layout.depth_path(&s.record.id);
            if let Some(dir) = depth_path.parent() {
                fs::create_dir_all(dir)?;
            }
            write_depth_png(&depth_path, &s.depth)?;
            records.push(s.record);
        }
    }
    let mut w = create(&layout.manifest())?;
    write_manifest(&mut w, &records)?;
    w.flush()?;
    info!("wrote {} records to {}", records.len(), layout.manifest().display());
    Ok(())
}

fn load_records(layout: &Layout) -> Result<Vec<SampleRecord>> {
    let path = layout.manifest();
    if !path.exists() {
        return Err(missing("corpus manifest", &path, "run `despoof corpus` first"));
    }
    read_manifest(BufReader::new(fs::File::open(path)?))
}

fn load_protocol(layout: &Layout, scheme: ProtocolScheme) -> Result<Protocol> {
    build_protocols(&load_records(layout)?, scheme)
}

fn load_sample(layout: &Layout, record: &SampleRecord) -> Result<Sample> {
    Ok(Sample {
        image: read_image_png(&layout.corpus_dir().join(&record.image_path))?,
        depth: read_depth_png(&layout.depth_path(&record.id))?,
        record: record.clone(),
    })
}

fn load_split(layout: &Layout, protocol: &Protocol, split: Split) -> Result<Vec<Sample>> {
    protocol.split(split).map(|r| load_sample(layout, r)).collect()
}

pub fn cmd_train_diffusion(cfg: &RunConfig, layout: &Layout, domain: TrainDomain) -> Result<()> {
    let tag = match domain {
        TrainDomain::All => DomainTag::SpoofUnion,
        TrainDomain::Genuine => DomainTag::GenuineOnly,
    };
    let schedule = cfg.schedule()?;
    let protocol = load_protocol(layout, cfg.protocol()?)?;
    let train = load_split(layout, &protocol, Split::Train)?;
    let dev = load_split(layout, &protocol, Split::Dev)?;
    let warm = if tag == DomainTag::GenuineOnly && cfg.diffusion.genuine_warm_start {
        let path = layout.denoiser(DomainTag::SpoofUnion);
        if !path.exists() {
            return Err(missing(
                "spoof-union denoiser",
                &path,
                "run `despoof train-diffusion --domain all` first or set diffusion.genuine_warm_start = false",
            ));
        }
        Some(DenoiserParams::<f32>::load(&path)?.0)
    } else {
        None
    };
    let mut train_cfg = cfg.diffusion_config();
    if warm.is_some() {
        train_cfg.learning_rate = cfg.diffusion.warm_start_learning_rate;
        train_cfg.max_steps = cfg.diffusion.warm_start_steps;
    }
    let log_path = layout.log(&format!("train_diffusion_{}", tag.as_str()));
    let mut log = create(&log_path)?;
    writeln!(log, "step\tloss\tround_trip_mse")?;
    let mut io_err = None;
    let train_refs: Vec<&Sample> = train.iter().collect();
    let dev_refs: Vec<&Sample> = dev.iter().collect();
    info!("training the {} denoiser on {} samples", tag.as_str(), pipeline::training_pool(&train_refs, tag).len());
    let (params, _) = pipeline::train_bridge_model(
        tag,
        warm.as_ref(),
        &train_refs,
        &dev_refs,
        cfg.diffusion.holdout,
        &schedule,
        cfg.denoiser_config(),
        train_cfg,
        cfg.seed,
        |r| {
            let rt = r.round_trip_mse.map_or(String::new(), |m| m.to_string());
            if let Err(e) = writeln!(log, "{}\t{}\t{rt}", r.step, r.loss) {
                io_err.get_or_insert(e);
            }
            if r.round_trip_mse.is_some() {
                info!("step {} loss {:.5} round-trip mse {rt}", r.step, r.loss);
            }
        },
    )?;
    if let Some(e) = io_err {
        return Err(e.into());
    }
    log.flush()?;
    let path = layout.denoiser(tag);
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir)?;
    }
    params.save(&path, &schedule)?;
    info!("wrote {}", path.display());
    Ok(())
}

fn load_bridge(layout: &Layout) -> Result<(DenoiserParams<f32>, DenoiserParams<f32>, crate::schedule::NoiseSchedule)> {
    let load = |tag: DomainTag, flag: &str| {
        let path = layout.denoiser(tag);
        if !path.exists() {
            return Err(missing("denoiser checkpoint", &path, &format!("run `despoof train-diffusion --domain {flag}`")));
        }
        DenoiserParams::<f32>::load(&path)
    };
    let (spoof, schedule) = load(DomainTag::SpoofUnion, "all")?;
    let (genuine, schedule_g) = load(DomainTag::GenuineOnly, "genuine")?;
    if schedule != schedule_g {
        return Err(Error::InvalidArgument("the two denoisers were trained with different schedules".into()));
    }
    Ok((spoof, genuine, schedule))
}

pub fn cmd_despoof(cfg: &RunConfig, layout: &Layout, split: Option<Split>, steps: usize) -> Result<()> {
    let (spoof, genuine, schedule) = load_bridge(layout)?;
    let protocol = load_protocol(layout, cfg.protocol()?)?;
    let records: Vec<&SampleRecord> = match split {
        Some(s) => protocol.split(s).collect(),
        None => [Split::Train, Split::Dev, Split::Test].iter().flat_map(|s| protocol.split(*s)).collect(),
    };
    let samples = records.iter().map(|r| load_sample(layout, r)).collect::<Result<Vec<_>>>()?;
    let refs: Vec<&Sample> = samples.iter().collect();
    info!("de-spoofing {} samples with {steps} ODE steps", refs.len());
    let total = refs.len();
    let out = pipeline::despoof_samples(&refs, &spoof, &genuine, &schedule, steps, cfg.diffusion.despoof_batch, |done| {
        info!("{done}/{total}");
    })?;
    fs::create_dir_all(layout.despoof_dir(steps).join("noise"))?;
    fs::create_dir_all(layout.despoof_dir(steps).join("recon"))?;
    let mut table = String::from("id\tlabel\tsplit\tenergy\n");
    for (s, (x_g, noise)) in refs.iter().zip(&out) {
        let id = &s.record.id;
        write_image_png(&layout.recon_path(steps, id), x_g)?;
        let mut w = create(&layout.noise_path(steps, id))?;
        serial::write_tensor(&mut w, noise.map())?;
        w.flush()?;
        table.push_str(&format!("{id}\t{}\t{}\t{}\n", s.record.label, s.record.split, noise.energy()));
    }
    write_text(&layout.despoof_dir(steps).join("records.tsv"), &table)?;
    if let Ok((g, sp)) = pipeline::energy_by_label(&refs, &out.iter().map(|(_, n)| n.clone()).collect::<Vec<_>>()) {
        info!("mean noise energy: genuine {g:.5}, spoof {sp:.5}");
    }
    Ok(())
}

fn load_noise(layout: &Layout, steps: usize, samples: &[Sample]) -> Result<Vec<Tensor<f32>>> {
    samples
        .iter()
        .map(|s| {
            let path = layout.noise_path(steps, &s.record.id);
            if !path.exists() {
                return Err(missing(
                    "noise map",
                    &path,
                    &format!("run `despoof despoof --steps {steps}` before using noise inputs"),
                ));
            }
            let map: Tensor<f32> = serial::read_tensor(&mut BufReader::new(fs::File::open(&path)?))?;
            Ok(NoisePattern::new(map)?.into_map())
        })
        .collect()
}

fn examples_for(
    layout: &Layout,
    protocol: &Protocol,
    split: Split,
    inputs: InputMode,
    steps: usize,
) -> Result<Vec<crate::detector::DetectorExample>> {
    let samples = load_split(layout, protocol, split)?;
    let noise = if inputs.needs_noise() { Some(load_noise(layout, steps, &samples)?) } else { None };
    pipeline::detector_examples(&samples.iter().collect::<Vec<_>>(), noise.as_deref())
}

pub fn cmd_train_detector(cfg: &RunConfig, layout: &Layout, inputs: InputMode, steps: usize) -> Result<()> {
    let protocol = load_protocol(layout, cfg.protocol()?)?;
    let train = examples_for(layout, &protocol, Split::Train, inputs, steps)?;
    let dev = examples_for(layout, &protocol, Split::Dev, inputs, steps)?;
    let tag = detector_tag(inputs, steps);
    let mut log = create(&layout.log(&format!("train_detector_{tag}")))?;
    writeln!(log, "step\tlearning_rate\tloss\tdev_loss")?;
    let mut io_err = None;
    info!("training detector {tag} on {} examples", train.len());
    let config = crate::detector::DetectorConfig {
        inputs,
        ..cfg.detector_config()?
    };
    let (params, _) = pipeline::train_detector_run(config, cfg.detector_train_config(), &train, &dev, cfg.seed, |r| {
        let dev = r.dev_loss.map_or(String::new(), |d| d.to_string());
        if let Err(e) = writeln!(log, "{}\t{}\t{}\t{dev}", r.step, r.learning_rate, r.loss) {
            io_err.get_or_insert(e);
        }
        if r.dev_loss.is_some() {
            info!("step {} loss {:.5} dev loss {dev}", r.step, r.loss);
        }
    })?;
    if let Some(e) = io_err {
        return Err(e.into());
    }
    log.flush()?;
    let path = layout.detector(&tag);
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir)?;
    }
    params.save(&path)?;
    info!("wrote {}", path.display());
    Ok(())
}

pub fn cmd_eval(cfg: &RunConfig, layout: &Layout, scheme: ProtocolScheme, inputs: InputMode, steps: usize) -> Result<()> {
    let tag = detector_tag(inputs, steps);
    let path = layout.detector(&tag);
    if !path.exists() {
        return Err(missing("detector checkpoint", &path, &format!("run `despoof train-detector --inputs {inputs}`")));
    }
    let params = DetectorParams::<f32>::load(&path)?;
    let protocol = load_protocol(layout, scheme)?;
    let dev = examples_for(layout, &protocol, Split::Dev, inputs, steps)?;
    let test = examples_for(layout, &protocol, Split::Test, inputs, steps)?;
    let (report, points) = pipeline::evaluate_detector(&params, &dev, &test, cfg.detector.score_fusion)?;
    write_text(&layout.report(&tag, scheme), &report.to_key_values())?;
    write_text(&layout.roc(&tag, scheme), &roc_table(&points))?;
    println!("{}", crate::metrics::MetricsReport::table_header(&["detector", "protocol"]).trim_end());
    println!("{}", report.table_row(&[&tag, &scheme.to_string()]).trim_end());
    Ok(())
}
