use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::baselines::BaselineConfig;
use crate::compression::CompressorSpec;
use crate::error::{FedPopError, Result};
use crate::federation::{Aggregation, FedSoulConfig, Hyperprior, Mode, Projection, Schedules, StepSchedule};
use crate::sampler::{KernelKind, GAMMA_MAX};

pub const SCHEMA_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ModelKind {
    LinearGaussian,
    Softmax,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Algorithm {
    Fedsoul,
    Fedavg,
    Fedrep,
    LocalOnly,
    CentralizedSa,
}

impl Algorithm {
    pub fn name(&self) -> &'static str {
        match self {
            Algorithm::Fedsoul => "fedsoul",
            Algorithm::Fedavg => "fedavg",
            Algorithm::Fedrep => "fedrep",
            Algorithm::LocalOnly => "local_only",
            Algorithm::CentralizedSa => "centralized_sa",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Dims {
    /// Feature dimension.
    pub k: usize,
    /// Representation width (columns of φ).
    pub d: usize,
    /// Number of clients.
    pub b: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Partition {
    pub fraction_small: f64,
    pub n_small: usize,
    pub n_large: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DataConfig {
    pub noise_var: f64,
    /// Share of each client's points held out for accuracy metrics (classification only).
    pub test_fraction: f64,
    pub n_classes: usize,
    /// Distance of the class means from the origin.
    pub class_separation: f64,
    /// Offset of the out-of-distribution cloud along the client's decision boundary.
    pub ood_shift: f64,
    pub n_ood: usize,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self {
            noise_var: 0.1,
            test_fraction: 0.2,
            n_classes: 2,
            class_separation: 1.5,
            ood_shift: 6.0,
            n_ood: 20,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct KernelSection {
    pub kind: KernelKind,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct BaselineSection {
    pub local_lr: f64,
    pub local_epochs: usize,
    pub phi_steps: usize,
    pub z_steps: usize,
}

impl Default for BaselineSection {
    fn default() -> Self {
        Self {
            local_lr: 1e-2,
            local_epochs: 5,
            phi_steps: 5,
            z_steps: 20,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalSection {
    /// Metrics rows every this many rounds (the final round is always evaluated).
    pub every: usize,
    pub uq_samples: usize,
    pub uq_burn: usize,
    pub ece_bins: usize,
    pub entropy_bins: usize,
    /// Compute the gap to the centralized optimum (linear-Gaussian only).
    pub objective_gap: bool,
    /// Write a checkpoint every this many rounds; 0 disables.
    pub checkpoint_every: usize,
}

impl Default for EvalSection {
    fn default() -> Self {
        Self {
            every: 10,
            uq_samples: 200,
            uq_burn: 100,
            ece_bins: 10,
            entropy_bins: 10,
            objective_gap: true,
            checkpoint_every: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub schema_version: u32,
    pub model: ModelKind,
    pub algorithm: Algorithm,
    pub dims: Dims,
    pub partition: Partition,
    #[serde(default)]
    pub data: DataConfig,
    pub schedules: Schedules,
    pub kernel: KernelSection,
    #[serde(default)]
    pub compressor: CompressorSpec,
    /// Optional per-client compressors; empty or exactly `dims.b` entries.
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub client_compressors: Vec<CompressorSpec>,
    pub mode: Mode,
    #[serde(default)]
    pub aggregation: Aggregation,
    #[serde(default)]
    pub hyperprior: Hyperprior,
    #[serde(default)]
    pub freeze_sigma: Option<f64>,
    pub participation_prob: f64,
    pub master_seed: u64,
    pub output_dir: PathBuf,
    /// Load data from this file instead of generating it.
    #[serde(default)]
    pub dataset_file: Option<PathBuf>,
    #[serde(default)]
    pub baseline: BaselineSection,
    #[serde(default)]
    pub eval: EvalSection,
    #[serde(default = "default_parallel")]
    pub parallel: bool,
}

fn default_parallel() -> bool {
    true
}

impl ExperimentConfig {
    /// The synthetic regression setup: `(k, d, b) = (20, 2, 100)`, 90% of clients with
    /// 5 points and the rest with 10, τ² = 0.1.
    pub fn synthetic_default() -> Self {
        Self {
            schema_version: SCHEMA_VERSION,
            model: ModelKind::LinearGaussian,
            algorithm: Algorithm::Fedsoul,
            dims: Dims { k: 20, d: 2, b: 100 },
            partition: Partition {
                fraction_small: 0.9,
                n_small: 5,
                n_large: 10,
            },
            data: DataConfig::default(),
            schedules: Schedules {
                eta: StepSchedule::Polynomial {
                    initial: 3e-4,
                    exponent: 0.6,
                },
                gamma: StepSchedule::Constant { value: 1e-3 },
                rounds: 500,
                local_steps: 5,
                projection: Projection::default(),
            },
            kernel: KernelSection { kind: KernelKind::Ula },
            compressor: CompressorSpec::Identity,
            client_compressors: Vec::new(),
            mode: Mode::Stateful,
            aggregation: Aggregation::ActiveCount,
            hyperprior: Hyperprior::Flat,
            freeze_sigma: None,
            participation_prob: 1.0,
            master_seed: 0,
            output_dir: PathBuf::from("runs/synthetic"),
            dataset_file: None,
            baseline: BaselineSection::default(),
            eval: EvalSection::default(),
            parallel: true,
        }
    }

    /// The small softmax task used for calibration and out-of-distribution entropy.
    pub fn softmax_default() -> Self {
        let mut c = Self::synthetic_default();
        c.model = ModelKind::Softmax;
        c.dims = Dims { k: 3, d: 3, b: 20 };
        c.partition = Partition {
            fraction_small: 0.5,
            n_small: 20,
            n_large: 60,
        };
        c.schedules.eta = StepSchedule::Polynomial {
            initial: 5e-3,
            exponent: 0.6,
        };
        c.schedules.gamma = StepSchedule::Constant { value: 5e-3 };
        c.schedules.rounds = 200;
        c.eval.objective_gap = false;
        c.output_dir = PathBuf::from("runs/softmax");
        c
    }

    pub fn from_toml_str(text: &str) -> Result<Self> {
        let cfg: ExperimentConfig = toml::from_str(text).map_err(|e| {
            let field = e.span().map(|s| format!("bytes {}..{}", s.start, s.end)).unwrap_or_else(|| "<root>".into());
            FedPopError::config(field, e.message().to_string())
        })?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_toml_str(&std::fs::read_to_string(path)?)
    }

    pub fn to_toml_string(&self) -> Result<String> {
        toml::to_string_pretty(self).map_err(|e| FedPopError::Serde(e.to_string()))
    }

    pub fn latent_dim(&self) -> usize {
        match self.model {
            ModelKind::LinearGaussian => self.dims.d,
            ModelKind::Softmax => self.dims.d * self.data.n_classes,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.schema_version != SCHEMA_VERSION {
            return Err(FedPopError::config(
                "schema_version",
                format!("expected {SCHEMA_VERSION}, found {}", self.schema_version),
            ));
        }
        let Dims { k, d, b } = self.dims;
        if k == 0 {
            return Err(FedPopError::config("dims.k", "must be at least 1"));
        }
        if d == 0 || d > k {
            return Err(FedPopError::config("dims.d", format!("must lie in [1, k = {k}]")));
        }
        if b == 0 {
            return Err(FedPopError::config("dims.b", "must be at least 1"));
        }
        let p = self.partition;
        if !(0.0..=1.0).contains(&p.fraction_small) {
            return Err(FedPopError::config("partition.fraction_small", "must lie in [0, 1]"));
        }
        if p.n_small == 0 {
            return Err(FedPopError::config("partition.n_small", "must be at least 1"));
        }
        if p.n_small > p.n_large {
            return Err(FedPopError::config("partition.n_small", "must not exceed partition.n_large"));
        }
        if !(self.data.noise_var > 0.0) {
            return Err(FedPopError::config("data.noise_var", "must be positive"));
        }
        if self.model == ModelKind::Softmax {
            if self.data.n_classes < 2 {
                return Err(FedPopError::config("data.n_classes", "need at least two classes"));
            }
            if k < 3 {
                return Err(FedPopError::config("dims.k", "the softmax task needs two coordinates plus a bias"));
            }
            if self.data.n_ood == 0 {
                return Err(FedPopError::config("data.n_ood", "must be at least 1"));
            }
            if !(0.0..1.0).contains(&self.data.test_fraction) {
                return Err(FedPopError::config("data.test_fraction", "must lie in [0, 1)"));
            }
            if self.algorithm == Algorithm::CentralizedSa {
                return Err(FedPopError::config("algorithm", "centralized_sa needs the linear-Gaussian model"));
            }
            if self.kernel.kind == KernelKind::ExactGaussian {
                return Err(FedPopError::config("kernel.kind", "exact_gaussian needs the linear-Gaussian model"));
            }
        }
        self.schedules.validate()?;
        if let StepSchedule::Constant { value } = self.schedules.gamma {
            if value > GAMMA_MAX {
                return Err(FedPopError::config("schedules.gamma", format!("must not exceed {GAMMA_MAX}")));
            }
        }
        self.compressor.validate()?;
        for c in &self.client_compressors {
            c.validate()?;
        }
        if !self.client_compressors.is_empty() && self.client_compressors.len() != self.dims.b {
            return Err(FedPopError::config("client_compressors", format!("need 0 or {} entries", self.dims.b)));
        }
        if !(self.participation_prob > 0.0 && self.participation_prob <= 1.0) {
            return Err(FedPopError::config("participation_prob", "must lie in (0, 1]"));
        }
        if let Some(s) = self.freeze_sigma {
            if !(s > 0.0) {
                return Err(FedPopError::config("freeze_sigma", "must be positive"));
            }
        }
        if !(self.baseline.local_lr > 0.0) {
            return Err(FedPopError::config("baseline.local_lr", "must be positive"));
        }
        if self.eval.every == 0 {
            return Err(FedPopError::config("eval.every", "must be at least 1"));
        }
        if self.eval.uq_samples == 0 {
            return Err(FedPopError::config("eval.uq_samples", "must be at least 1"));
        }
        if self.eval.ece_bins == 0 || self.eval.entropy_bins == 0 {
            return Err(FedPopError::config("eval.ece_bins", "bin counts must be at least 1"));
        }
        Ok(())
    }

    pub fn fedsoul_config(&self) -> FedSoulConfig {
        FedSoulConfig {
            schedules: self.schedules.clone(),
            kernel: self.kernel.kind,
            compressor: self.compressor,
            client_compressors: self.client_compressors.clone(),
            mode: self.mode,
            aggregation: self.aggregation,
            hyperprior: self.hyperprior,
            freeze_sigma: self.freeze_sigma,
            master_seed: self.master_seed,
            parallel: self.parallel,
        }
    }

    pub fn baseline_config(&self) -> BaselineConfig {
        BaselineConfig {
            rounds: self.schedules.rounds,
            local_lr: self.baseline.local_lr,
            local_epochs: self.baseline.local_epochs,
            phi_steps: self.baseline.phi_steps,
            z_steps: self.baseline.z_steps,
            master_seed: self.master_seed,
            parallel: self.parallel,
        }
    }
}
