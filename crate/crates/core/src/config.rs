//! Declarative experiment configuration: a flat, comment-friendly TOML
//! key-value format with typed validation and defaults. Unknown keys are
//! rejected so stale experiment files fail loudly.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::generator::GeneratorHyper;
use crate::pipeline::EnCAggParams;

/// Aggregation rule selector.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AggregatorKind {
    Mean,
    Krum,
    Median,
    TrimmedMean,
    Fltrust,
    Encagg,
}

impl AggregatorKind {
    pub fn name(&self) -> &'static str {
        match self {
            AggregatorKind::Mean => "mean",
            AggregatorKind::Krum => "krum",
            AggregatorKind::Median => "median",
            AggregatorKind::TrimmedMean => "trimmed_mean",
            AggregatorKind::Fltrust => "fltrust",
            AggregatorKind::Encagg => "encagg",
        }
    }
}

/// Poisoning strategy selector.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AttackKind {
    None,
    Gaussian,
    SignFlip,
    Scale,
    Lie,
    MinMax,
    Adaptive,
}

impl AttackKind {
    pub fn name(&self) -> &'static str {
        match self {
            AttackKind::None => "none",
            AttackKind::Gaussian => "gaussian",
            AttackKind::SignFlip => "sign_flip",
            AttackKind::Scale => "scale",
            AttackKind::Lie => "lie",
            AttackKind::MinMax => "min_max",
            AttackKind::Adaptive => "adaptive",
        }
    }
}

/// Synthetic training task selector.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TaskKind {
    Logistic,
    Linear,
}

impl TaskKind {
    pub fn name(&self) -> &'static str {
        match self {
            TaskKind::Logistic => "logistic",
            TaskKind::Linear => "linear",
        }
    }
}

/// One experiment, fully determined by this struct including the seed.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ExperimentConfig {
    pub seed: u64,
    pub rounds: usize,
    /// Total clients n.
    pub clients: usize,
    /// Known-benign clients k (2 <= k <= benign/2).
    pub known_benign: usize,
    pub malicious_ratio: f64,
    /// Global model learning rate.
    pub learning_rate: f64,
    pub batch_size: usize,
    pub aggregator: AggregatorKind,
    /// Trim fraction for the trimmed-mean aggregator.
    pub trim_fraction: f64,
    /// Assumed Byzantine count for Krum; defaults to the malicious count.
    pub krum_f: Option<usize>,

    pub task: TaskKind,
    /// Model dimension d.
    pub dim: usize,
    pub samples_per_client: usize,
    pub noise_std: f64,
    /// Per-client input-distribution shift magnitude (non-IID knob).
    pub heterogeneity: f64,

    pub min_samples: usize,
    pub r: f64,
    pub gamma: f64,
    pub n_gen: usize,
    pub generator_enabled: bool,
    pub gen_noise_dim: usize,
    pub gen_hidden_dim: usize,
    pub gen_w1: f64,
    pub gen_w0: f64,
    pub gen_tau_scale: f64,
    pub gen_rho: f64,
    pub gen_alpha: f64,
    pub gen_beta: f64,
    pub gen_lr: f64,

    pub attack: AttackKind,
    /// Sign-flip / scale attack factor.
    pub attack_scale: f64,
    /// Gaussian attack std inflation.
    pub attack_std_scale: f64,
    /// Little-is-enough z multiplier.
    pub attack_z: f64,
    pub minmax_iters: usize,
    pub adaptive_inplane_scale: f64,
    pub adaptive_ortho_scale: f64,
    pub adaptive_max_halvings: usize,
    /// Colluding attackers submit one shared crafted gradient plus tiny
    /// jitter.
    pub collusion: bool,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            seed: 42,
            rounds: 300,
            clients: 20,
            known_benign: 4,
            malicious_ratio: 0.0,
            learning_rate: 0.5,
            batch_size: 16,
            aggregator: AggregatorKind::Encagg,
            trim_fraction: 0.2,
            krum_f: None,
            task: TaskKind::Logistic,
            dim: 32,
            samples_per_client: 64,
            noise_std: 0.5,
            heterogeneity: 0.5,
            min_samples: 5,
            r: 0.2,
            gamma: 3.0,
            n_gen: 100,
            generator_enabled: true,
            gen_noise_dim: 16,
            gen_hidden_dim: 32,
            gen_w1: 2.0,
            gen_w0: 1.0,
            gen_tau_scale: 0.25,
            gen_rho: 0.5,
            gen_alpha: 1.0,
            gen_beta: 1.0,
            gen_lr: 1e-3,
            attack: AttackKind::None,
            attack_scale: 10.0,
            attack_std_scale: 10.0,
            attack_z: 1.5,
            minmax_iters: 30,
            adaptive_inplane_scale: 0.5,
            adaptive_ortho_scale: 10.0,
            adaptive_max_halvings: 20,
            collusion: true,
        }
    }
}

impl ExperimentConfig {
    /// Parse and validate a TOML config file.
    pub fn from_path(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("cannot read {}: {e}", path.display())))?;
        Self::from_toml(&text)
    }

    /// Parse and validate a TOML config string.
    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: ExperimentConfig =
            toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    /// Canonical serialized form; the run manifest hashes this.
    pub fn to_canonical_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    /// Number of malicious clients implied by the ratio.
    pub fn malicious_count(&self) -> usize {
        (self.malicious_ratio * self.clients as f64 + 1e-9).floor() as usize
    }

    /// Benign client count (everyone not malicious).
    pub fn benign_count(&self) -> usize {
        self.clients - self.malicious_count()
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.r > 0.0 && self.r < 1.0) {
            return Err(Error::Config("r must be in (0,1)".into()));
        }
        if self.gamma <= 0.0 {
            return Err(Error::Config("gamma must be positive".into()));
        }
        if !(0.0..=1.0).contains(&self.malicious_ratio) {
            return Err(Error::Config("malicious_ratio must be in [0,1]".into()));
        }
        if self.clients < 3 {
            return Err(Error::Config("clients must be >= 3".into()));
        }
        if self.dim < 2 {
            return Err(Error::Config("dim must be >= 2".into()));
        }
        if self.rounds == 0 {
            return Err(Error::Config("rounds must be >= 1".into()));
        }
        if self.learning_rate <= 0.0 {
            return Err(Error::Config("learning_rate must be positive".into()));
        }
        if self.batch_size == 0 || self.samples_per_client == 0 {
            return Err(Error::Config("batch_size and samples_per_client must be >= 1".into()));
        }
        if self.min_samples == 0 {
            return Err(Error::Config("min_samples must be >= 1".into()));
        }
        if self.noise_std < 0.0 || self.heterogeneity < 0.0 {
            return Err(Error::Config("noise_std and heterogeneity must be >= 0".into()));
        }
        if !(0.0..0.5).contains(&self.trim_fraction) {
            return Err(Error::Config("trim_fraction must be in [0, 0.5)".into()));
        }
        let benign = self.benign_count();
        if self.known_benign < 2 {
            return Err(Error::Config("known_benign must be >= 2".into()));
        }
        if 2 * self.known_benign > benign {
            return Err(Error::Config(format!(
                "known_benign must satisfy 2 <= k <= b/2 (k={}, benign={benign})",
                self.known_benign
            )));
        }
        if self.gen_w1 <= self.gen_w0 || self.gen_w0 <= 0.0 {
            return Err(Error::Config("generator weights need gen_w1 > gen_w0 > 0".into()));
        }
        if self.gen_lr <= 0.0 {
            return Err(Error::Config("gen_lr must be positive".into()));
        }
        if self.gen_hidden_dim < 2 || self.gen_noise_dim < 1 {
            return Err(Error::Config("generator needs gen_hidden_dim >= 2, gen_noise_dim >= 1".into()));
        }
        if self.n_gen < 2 {
            return Err(Error::Config("n_gen must be >= 2".into()));
        }
        if self.adaptive_inplane_scale > 1.0 || self.adaptive_inplane_scale < 0.0 {
            return Err(Error::Config("adaptive_inplane_scale must be in [0,1]".into()));
        }
        Ok(())
    }

    /// Aggregation-rule parameters derived from this config.
    pub fn encagg_params(&self) -> EnCAggParams {
        EnCAggParams {
            min_samples: self.min_samples,
            r: self.r,
            gamma: self.gamma,
            n_gen: self.n_gen,
            tau_scale: self.gen_tau_scale,
            generator: GeneratorHyper {
                alpha: self.gen_alpha,
                beta: self.gen_beta,
                w1: self.gen_w1,
                w0: self.gen_w0,
                tau: self.gen_tau_scale,
                rho: self.gen_rho,
                lr: self.gen_lr,
            },
        }
    }

    /// Override one named parameter from a string value (sweep support).
    pub fn set_param(&mut self, name: &str, value: &str) -> Result<()> {
        fn parse<T: std::str::FromStr>(name: &str, value: &str) -> Result<T> {
            value
                .parse::<T>()
                .map_err(|_| Error::Config(format!("cannot parse {value:?} for {name}")))
        }
        match name {
            "seed" => self.seed = parse(name, value)?,
            "rounds" => self.rounds = parse(name, value)?,
            "clients" => self.clients = parse(name, value)?,
            "known_benign" => self.known_benign = parse(name, value)?,
            "malicious_ratio" => self.malicious_ratio = parse(name, value)?,
            "learning_rate" => self.learning_rate = parse(name, value)?,
            "batch_size" => self.batch_size = parse(name, value)?,
            "trim_fraction" => self.trim_fraction = parse(name, value)?,
            "dim" => self.dim = parse(name, value)?,
            "samples_per_client" => self.samples_per_client = parse(name, value)?,
            "noise_std" => self.noise_std = parse(name, value)?,
            "heterogeneity" => self.heterogeneity = parse(name, value)?,
            "min_samples" => self.min_samples = parse(name, value)?,
            "r" => self.r = parse(name, value)?,
            "gamma" => self.gamma = parse(name, value)?,
            "n_gen" => self.n_gen = parse(name, value)?,
            "attack_scale" => self.attack_scale = parse(name, value)?,
            "attack_std_scale" => self.attack_std_scale = parse(name, value)?,
            "attack_z" => self.attack_z = parse(name, value)?,
            "gen_lr" => self.gen_lr = parse(name, value)?,
            other => {
                return Err(Error::Config(format!("unknown sweep parameter {other:?}")));
            }
        }
        self.validate()
    }
}
