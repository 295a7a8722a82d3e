//! Run configuration: a sectioned `key = value` file (TOML syntax). Every
//! field has a default, so an empty file is a complete configuration.
//! Unknown sections or keys are rejected with the offending name.
//!
//! ```toml
//! seed = 0
//! out_dir = "runs"
//!
//! [corpus]
//! genuine_per_domain = 2000
//! spoof_per_domain = 2000
//! image_size = 32
//! domains = ["a", "b"]
//!
//! [schedule]
//! steps = 1000
//! beta_start = 1e-4
//! beta_end = 0.02
//!
//! [denoiser]
//! base_width = 32
//! depth_levels = 2
//! time_embed_dim = 64
//!
//! [diffusion]
//! max_steps = 1500
//! batch_size = 16
//! learning_rate = 1e-3
//! weight_decay = 0.0
//! ema_decay = 0.999
//! eval_every = 250
//! holdout = 16
//! target_round_trip_mse = 0.004
//! genuine_warm_start = true
//! warm_start_steps = 500
//! warm_start_learning_rate = 1e-4
//! ode_steps = 50
//! despoof_batch = 32
//!
//! [detector]
//! inputs = "rgb_noise"
//! widths = [32, 64, 64]
//! cdc_theta = 0.7
//! crop_fraction = 0.8
//! noise_gain = 10.0
//! score_fusion = false
//!
//! [detector_train]
//! max_steps = 1000
//! batch_size = 64
//! learning_rate = 1e-4
//! weight_decay = 5e-5
//! decay_every = 500
//! decay_factor = 0.1
//! eval_every = 50
//!
//! [protocol]
//! scheme = "intra_a"
//! ```

use std::path::{Path, PathBuf};

use serde::Deserialize;

use crate::corpus::{CorpusConfig, Domain, ProtocolScheme};
use crate::denoiser::DenoiserConfig;
use crate::detector::{DetectorConfig, DetectorTrainConfig, InputMode};
use crate::diffusion::DiffusionTrainConfig;
use crate::error::{Error, Result};
use crate::schedule::{build_linear_schedule, NoiseSchedule};

#[derive(Debug, Clone, PartialEq, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    /// Root seed; every component derives its own stream from it.
    pub seed: u64,
    pub out_dir: PathBuf,
    pub corpus: CorpusSection,
    pub schedule: ScheduleSection,
    pub denoiser: DenoiserSection,
    pub diffusion: DiffusionSection,
    pub detector: DetectorSection,
    pub detector_train: DetectorTrainSection,
    pub protocol: ProtocolSection,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            out_dir: PathBuf::from("runs"),
            corpus: CorpusSection::default(),
            schedule: ScheduleSection::default(),
            denoiser: DenoiserSection::default(),
            diffusion: DiffusionSection::default(),
            detector: DetectorSection::default(),
            detector_train: DetectorTrainSection::default(),
            protocol: ProtocolSection::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CorpusSection {
    pub genuine_per_domain: usize,
    pub spoof_per_domain: usize,
    pub image_size: usize,
    /// Domains to generate, by letter.
    pub domains: Vec<String>,
}

impl Default for CorpusSection {
    fn default() -> Self {
        let c = CorpusConfig::default();
        Self {
            genuine_per_domain: c.genuine_per_domain,
            spoof_per_domain: c.spoof_per_domain,
            image_size: c.image_size,
            domains: vec!["a".into(), "b".into()],
        }
    }
}

#[derive(Debug, Clone, PartialEq, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ScheduleSection {
    pub steps: usize,
    pub beta_start: f64,
    pub beta_end: f64,
}

impl Default for ScheduleSection {
    fn default() -> Self {
        Self {
            steps: 1000,
            beta_start: 1e-4,
            beta_end: 0.02,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DenoiserSection {
    pub base_width: usize,
    pub depth_levels: usize,
    pub time_embed_dim: usize,
}

impl Default for DenoiserSection {
    fn default() -> Self {
        let d = DenoiserConfig::default();
        Self {
            base_width: d.base_width,
            depth_levels: d.depth_levels,
            time_embed_dim: d.time_embed_dim,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DiffusionSection {
    pub max_steps: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub weight_decay: f64,
    pub ema_decay: f64,
    pub eval_every: usize,
    /// Genuine dev images used for the round-trip check.
    pub holdout: usize,
    pub target_round_trip_mse: f64,
    /// Start the genuine-only model from the spoof-union weights.
    pub genuine_warm_start: bool,
    /// Budget and learning rate of the warm-started genuine model.
    pub warm_start_steps: usize,
    pub warm_start_learning_rate: f64,
    /// ODE steps for de-spoofing (25, 50 and 100 are the sweep points).
    pub ode_steps: usize,
    pub despoof_batch: usize,
}

impl Default for DiffusionSection {
    fn default() -> Self {
        let d = DiffusionTrainConfig::default();
        Self {
            max_steps: d.max_steps,
            batch_size: d.batch_size,
            learning_rate: d.learning_rate,
            weight_decay: d.weight_decay,
            ema_decay: d.ema_decay,
            eval_every: d.eval_every,
            holdout: 16,
            target_round_trip_mse: d.target_round_trip_mse,
            genuine_warm_start: true,
            warm_start_steps: 500,
            warm_start_learning_rate: 1e-4,
            ode_steps: d.ode_steps,
            despoof_batch: 32,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DetectorSection {
    pub inputs: String,
    pub widths: [usize; 3],
    pub cdc_theta: f64,
    pub crop_fraction: f64,
    pub noise_gain: f64,
    /// Score with the mean of the two per-stream heads instead of the fused map.
    pub score_fusion: bool,
}

impl Default for DetectorSection {
    fn default() -> Self {
        let d = DetectorConfig::default();
        Self {
            inputs: d.inputs.as_str().into(),
            widths: d.widths,
            cdc_theta: d.cdc_theta,
            crop_fraction: d.crop_fraction,
            noise_gain: d.noise_gain,
            score_fusion: false,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DetectorTrainSection {
    pub max_steps: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub weight_decay: f64,
    pub decay_every: usize,
    pub decay_factor: f64,
    pub eval_every: usize,
}

impl Default for DetectorTrainSection {
    fn default() -> Self {
        let d = DetectorTrainConfig::default();
        Self {
            max_steps: d.max_steps,
            batch_size: d.batch_size,
            learning_rate: d.learning_rate,
            weight_decay: d.weight_decay,
            decay_every: d.decay_every,
            decay_factor: d.decay_factor,
            eval_every: d.eval_every,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ProtocolSection {
    /// `intra_a`, `intra_b`, `cross_ab` or `cross_ba`.
    pub scheme: String,
}

impl Default for ProtocolSection {
    fn default() -> Self {
        Self {
            scheme: "intra_a".into(),
        }
    }
}

impl RunConfig {
    pub fn parse(text: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(text).map_err(|e| Error::Config(e.message().to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        Self::parse(&text).map_err(|e| match e {
            Error::Config(m) => Error::Config(format!("{}: {m}", path.display())),
            other => other,
        })
    }

    /// Checks every typed view so bad values fail at load time.
    pub fn validate(&self) -> Result<()> {
        self.domains()?;
        self.schedule()?;
        self.denoiser_config().validate()?;
        self.detector_config()?.validate()?;
        self.protocol()?;
        if self.diffusion.ode_steps == 0 || self.diffusion.despoof_batch == 0 {
            return Err(Error::Config("diffusion.ode_steps and diffusion.despoof_batch must be positive".into()));
        }
        if self.corpus.image_size != self.detector_config()?.image_size {
            return Err(Error::Config("detector and corpus image sizes differ".into()));
        }
        Ok(())
    }

    pub fn corpus_config(&self) -> CorpusConfig {
        CorpusConfig {
            seed: self.seed,
            genuine_per_domain: self.corpus.genuine_per_domain,
            spoof_per_domain: self.corpus.spoof_per_domain,
            image_size: self.corpus.image_size,
        }
    }

    pub fn domains(&self) -> Result<Vec<Domain>> {
        let mut out = Vec::new();
        for d in &self.corpus.domains {
            let dom: Domain = d
                .to_uppercase()
                .parse()
                .map_err(|_| Error::Config(format!("corpus.domains: unknown domain '{d}'")))?;
            if out.contains(&dom) {
                return Err(Error::Config(format!("corpus.domains: '{d}' listed twice")));
            }
            out.push(dom);
        }
        if out.is_empty() {
            return Err(Error::Config("corpus.domains must name at least one domain".into()));
        }
        Ok(out)
    }

    pub fn schedule(&self) -> Result<NoiseSchedule> {
        build_linear_schedule(self.schedule.steps, self.schedule.beta_start, self.schedule.beta_end)
            .map_err(|e| Error::Config(format!("schedule: {e}")))
    }

    pub fn denoiser_config(&self) -> DenoiserConfig {
        DenoiserConfig {
            image_size: self.corpus.image_size,
            channels: 3,
            base_width: self.denoiser.base_width,
            depth_levels: self.denoiser.depth_levels,
            time_embed_dim: self.denoiser.time_embed_dim,
            seed: self.seed,
        }
    }

    pub fn diffusion_config(&self) -> DiffusionTrainConfig {
        let d = &self.diffusion;
        DiffusionTrainConfig {
            max_steps: d.max_steps,
            batch_size: d.batch_size,
            learning_rate: d.learning_rate,
            weight_decay: d.weight_decay,
            eval_every: d.eval_every,
            target_round_trip_mse: d.target_round_trip_mse,
            ode_steps: d.ode_steps,
            ema_decay: d.ema_decay,
            seed: self.seed,
        }
    }

    pub fn input_mode(&self) -> Result<InputMode> {
        self.detector
            .inputs
            .parse()
            .map_err(|_| Error::Config(format!("detector.inputs: unknown mode '{}'", self.detector.inputs)))
    }

    pub fn detector_config(&self) -> Result<DetectorConfig> {
        Ok(DetectorConfig {
            inputs: self.input_mode()?,
            widths: self.detector.widths,
            cdc_theta: self.detector.cdc_theta,
            crop_fraction: self.detector.crop_fraction,
            noise_gain: self.detector.noise_gain,
            image_size: self.corpus.image_size,
            seed: self.seed,
        })
    }

    pub fn detector_train_config(&self) -> DetectorTrainConfig {
        let d = &self.detector_train;
        DetectorTrainConfig {
            max_steps: d.max_steps,
            batch_size: d.batch_size,
            learning_rate: d.learning_rate,
            weight_decay: d.weight_decay,
            decay_every: d.decay_every,
            decay_factor: d.decay_factor,
            eval_every: d.eval_every,
            seed: self.seed,
        }
    }

    pub fn protocol(&self) -> Result<ProtocolScheme> {
        self.protocol
            .scheme
            .parse()
            .map_err(|_| Error::Config(format!("protocol.scheme: unknown scheme '{}'", self.protocol.scheme)))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_file_is_the_default() {
        assert_eq!(RunConfig::parse("").unwrap(), RunConfig::default());
    }

    #[test]
    fn defaults_match_module_defaults() {
        let c = RunConfig::default();
        assert_eq!(c.corpus_config(), CorpusConfig::default());
        assert_eq!(c.detector_config().unwrap(), DetectorConfig::default());
        assert_eq!(c.detector_train_config(), DetectorTrainConfig::default());
        assert_eq!(c.diffusion_config(), DiffusionTrainConfig::default());
        assert_eq!(c.schedule().unwrap(), NoiseSchedule::default());
        assert_eq!(c.protocol().unwrap(), ProtocolScheme::Intra(Domain::A));
        assert_eq!(c.domains().unwrap(), vec![Domain::A, Domain::B]);
    }

    #[test]
    fn sections_override_fields() {
        let c = RunConfig::parse(
            "seed = 7\n[diffusion]\node_steps = 25\n[detector]\ninputs = \"rgb_rgb\"\n[protocol]\nscheme = \"cross_ba\"\n",
        )
        .unwrap();
        assert_eq!(c.seed, 7);
        assert_eq!(c.diffusion_config().ode_steps, 25);
        assert_eq!(c.input_mode().unwrap(), InputMode::RgbRgb);
        assert_eq!(c.protocol().unwrap(), ProtocolScheme::CrossBA);
        assert_eq!(c.corpus_config().seed, 7);
    }

    #[test]
    fn unknown_keys_are_named() {
        for (text, key) in [
            ("bogus = 1", "bogus"),
            ("[detector]\nwidth = [1, 2, 3]", "width"),
            ("[nonsense]\na = 1", "nonsense"),
        ] {
            let err = RunConfig::parse(text).unwrap_err().to_string();
            assert!(err.contains(key), "{err}");
        }
    }

    #[test]
    fn bad_values_are_rejected() {
        for text in [
            "[detector]\ninputs = \"depth\"",
            "[protocol]\nscheme = \"intra_c\"",
            "[corpus]\ndomains = [\"a\", \"a\"]",
            "[corpus]\ndomains = []",
            "[schedule]\nbeta_end = 2.0",
            "[detector]\ncrop_fraction = 0.0",
            "[diffusion]\node_steps = 0",
            "[corpus]\nimage_size = 20",
            "seed = \"x\"",
        ] {
            assert!(RunConfig::parse(text).is_err(), "{text}");
        }
    }
}
