// SPDX-License-Identifier: MIT OR Apache-2.0

//! TOML run configuration.
//!
//! Every section is optional. Command-line flags win over file values.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use latent_lens::probe::ProbeConfig;
use latent_lens::sae::{Activation, SaeConfig};
use latent_lens::synth::{PlantedAttribute, SynthSpec};
use serde::{Deserialize, Serialize};

use crate::CliError;

pub const DEFAULT_SEED: u64 = 42;

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub seed: Option<u64>,
    pub out: Option<PathBuf>,
    pub workers: Option<usize>,
    pub verbose: Option<bool>,
    #[serde(default)]
    pub data: DataSection,
    #[serde(default)]
    pub synth: SynthSection,
    #[serde(default)]
    pub sae: SaeSection,
    #[serde(default)]
    pub grid: GridSection,
    #[serde(default)]
    pub probe: ProbeSection,
    #[serde(default)]
    pub steer: SteerSection,
    #[serde(default)]
    pub split: SplitSection,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DataSection {
    /// EMBC corpus; defaults to `corpus.embc` in the output directory.
    pub corpus: Option<PathBuf>,
    /// Attribute name → label CSV. Unlisted attributes resolve to
    /// `labels_<attr>.csv` in the output directory.
    pub labels: BTreeMap<String, PathBuf>,
    pub test_fraction: f64,
}

impl Default for DataSection {
    fn default() -> Self {
        Self {
            corpus: None,
            labels: BTreeMap::new(),
            test_fraction: 0.2,
        }
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Preset {
    #[default]
    Standard,
    Splitting,
}

/// Overrides on top of a preset corpus.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SynthSection {
    pub preset: Preset,
    pub dim: Option<usize>,
    pub n_samples: Option<usize>,
    pub n_speakers: Option<usize>,
    pub noise_sigma: Option<f64>,
    pub attributes: Option<Vec<PlantedAttribute>>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ActivationKind {
    Topk,
    Relu,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SaeSection {
    pub latent_dim: usize,
    pub activation: ActivationKind,
    pub k: usize,
    pub l1_lambda: f64,
    pub learning_rate: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub center_inputs: bool,
}

impl Default for SaeSection {
    fn default() -> Self {
        Self {
            latent_dim: 128,
            activation: ActivationKind::Topk,
            k: 10,
            l1_lambda: 1e-3,
            learning_rate: 1e-3,
            batch_size: 64,
            epochs: 20,
            center_inputs: true,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GridSection {
    pub latent_dims: Vec<usize>,
    pub k_values: Vec<usize>,
}

impl Default for GridSection {
    fn default() -> Self {
        Self {
            latent_dims: vec![100, 200, 300, 400, 600, 800, 1200],
            k_values: vec![5, 10, 15, 20, 25, 30, 35],
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ProbeSection {
    /// Empty means every attribute with a label file.
    pub attributes: Vec<String>,
    pub l2_lambda: f64,
    pub max_iters: usize,
    pub tolerance: f64,
}

impl Default for ProbeSection {
    fn default() -> Self {
        let d = ProbeConfig::default();
        Self {
            attributes: Vec::new(),
            l2_lambda: d.l2_lambda,
            max_iters: d.max_iters,
            tolerance: d.tolerance,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SteerSection {
    pub attributes: Vec<String>,
    pub a_phi: f64,
    /// Attribute name → display name of its negative class.
    pub negative_class: BTreeMap<String, String>,
}

impl Default for SteerSection {
    fn default() -> Self {
        Self {
            attributes: Vec::new(),
            a_phi: 1.0,
            negative_class: BTreeMap::new(),
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SplitSection {
    /// Attribute with a stratum column; defaults to the only labeled one.
    pub attribute: Option<String>,
    /// Grid k to follow across L; defaults to the smallest k in the grid.
    pub k: Option<usize>,
}

/// Flag values that override the file.
#[derive(Debug, Clone, Default)]
pub struct Overrides {
    pub out: Option<PathBuf>,
    pub seed: Option<u64>,
    pub workers: Option<usize>,
    pub verbose: bool,
}

/// A config with every flag applied and every default filled in.
#[derive(Debug, Clone, Serialize)]
pub struct Effective {
    pub seed: u64,
    pub out: PathBuf,
    pub workers: usize,
    pub verbose: bool,
    pub config: RunConfig,
    /// Directory that relative paths in the file resolve against.
    #[serde(skip)]
    pub base_dir: PathBuf,
}

pub fn load(path: Option<&Path>) -> Result<(RunConfig, PathBuf), CliError> {
    let Some(path) = path else {
        return Ok((RunConfig::default(), PathBuf::from(".")));
    };
    let text = std::fs::read_to_string(path)
        .map_err(|e| CliError::Config(format!("cannot read config {}: {e}", path.display())))?;
    let config: RunConfig = toml::from_str(&text).map_err(|e| CliError::Config(format!("{}: {e}", path.display())))?;
    let base = path.parent().map(Path::to_path_buf).unwrap_or_default();
    Ok((config, base))
}

impl Effective {
    pub fn new(
        mut config: RunConfig,
        base_dir: PathBuf,
        flags: Overrides,
        env_out: Option<PathBuf>,
    ) -> Result<Self, CliError> {
        let seed = flags.seed.or(config.seed).unwrap_or(DEFAULT_SEED);
        let out = flags
            .out
            .or_else(|| config.out.as_ref().map(|p| base_dir.join(p)))
            .or(env_out)
            .unwrap_or_else(|| PathBuf::from("latent-lens-out"));
        let workers = flags
            .workers
            .or(config.workers)
            .unwrap_or_else(|| std::thread::available_parallelism().map_or(1, |n| n.get()));
        let verbose = flags.verbose || config.verbose.unwrap_or(false);
        config.seed = Some(seed);
        config.out = Some(out.clone());
        config.workers = Some(workers);
        config.verbose = Some(verbose);
        let eff = Self {
            seed,
            out,
            workers,
            verbose,
            config,
            base_dir,
        };
        eff.validate()?;
        Ok(eff)
    }

    fn validate(&self) -> Result<(), CliError> {
        let c = &self.config;
        let bad = |field: &str, msg: String| Err(CliError::Config(format!("{field}: {msg}")));
        if self.workers == 0 {
            return bad("workers", "must be at least 1".into());
        }
        if !(c.data.test_fraction > 0.0 && c.data.test_fraction < 1.0) {
            return bad(
                "data.test_fraction",
                format!("{} is not in (0, 1)", c.data.test_fraction),
            );
        }
        if let Some(p) = &c.data.corpus {
            let p = self.base_dir.join(p);
            if !p.is_file() {
                return bad("data.corpus", format!("{} does not exist", p.display()));
            }
        }
        for (attr, p) in &c.data.labels {
            let p = self.base_dir.join(p);
            if !p.is_file() {
                return bad(
                    &format!("data.labels.{attr}"),
                    format!("{} does not exist", p.display()),
                );
            }
        }
        let s = &c.sae;
        if s.activation == ActivationKind::Topk && (s.k == 0 || s.k > s.latent_dim) {
            return bad("sae.k", format!("{} is not in 1..=latent_dim ({})", s.k, s.latent_dim));
        }
        if s.latent_dim == 0 || s.batch_size == 0 || s.epochs == 0 {
            return bad("sae", "latent_dim, batch_size and epochs must be positive".into());
        }
        if !(s.learning_rate > 0.0 && s.learning_rate.is_finite()) {
            return bad("sae.learning_rate", format!("{} must be positive", s.learning_rate));
        }
        if !(s.l1_lambda >= 0.0 && s.l1_lambda.is_finite()) {
            return bad("sae.l1_lambda", format!("{} must be >= 0", s.l1_lambda));
        }
        if c.grid.latent_dims.iter().chain(&c.grid.k_values).any(|&v| v == 0) {
            return bad("grid", "latent_dims and k_values must be positive".into());
        }
        if !(c.steer.a_phi > 0.0 && c.steer.a_phi.is_finite()) {
            return bad("steer.a_phi", format!("{} must be positive", c.steer.a_phi));
        }
        self.probe_config()
            .validate()
            .map_err(|e| CliError::Config(format!("probe: {e}")))?;
        Ok(())
    }

    pub fn synth_spec(&self) -> SynthSpec {
        let s = &self.config.synth;
        let mut spec = match s.preset {
            Preset::Standard => SynthSpec::standard(),
            Preset::Splitting => SynthSpec::splitting(),
        };
        spec.dim = s.dim.unwrap_or(spec.dim);
        spec.n_samples = s.n_samples.unwrap_or(spec.n_samples);
        spec.n_speakers = s.n_speakers.unwrap_or(spec.n_speakers);
        spec.noise_sigma = s.noise_sigma.unwrap_or(spec.noise_sigma);
        if let Some(a) = &s.attributes {
            spec.attributes = a.clone();
        }
        spec.seed = self.seed;
        spec
    }

    pub fn sae_config(&self, input_dim: usize) -> SaeConfig {
        let s = &self.config.sae;
        let activation = match s.activation {
            ActivationKind::Topk => Activation::TopK { k: s.k },
            ActivationKind::Relu => Activation::Relu { l1_lambda: s.l1_lambda },
        };
        SaeConfig {
            input_dim,
            latent_dim: s.latent_dim,
            activation,
            learning_rate: s.learning_rate,
            batch_size: s.batch_size,
            epochs: s.epochs,
            seed: self.seed,
            center_inputs: s.center_inputs,
        }
    }

    pub fn probe_config(&self) -> ProbeConfig {
        let p = &self.config.probe;
        ProbeConfig {
            l2_lambda: p.l2_lambda,
            max_iters: p.max_iters,
            tolerance: p.tolerance,
            seed: self.seed,
            init_scale: 0.0,
        }
    }

    pub fn corpus_path(&self) -> (PathBuf, bool) {
        match &self.config.data.corpus {
            Some(p) => (self.base_dir.join(p), true),
            None => (self.out.join(crate::artifacts::CORPUS), false),
        }
    }

    pub fn labels_path(&self, attribute: &str) -> (PathBuf, bool) {
        match self.config.data.labels.get(attribute) {
            Some(p) => (self.base_dir.join(p), true),
            None => (self.out.join(crate::artifacts::labels(attribute)), false),
        }
    }
}
