//! Run configuration, read from versioned JSON.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::acquisition::TrustRegionConfig;
use crate::backbone::{Activation, BackboneConfig};
use crate::benchmarks::Sense;
use crate::ensemble::EnsembleConfig;
use crate::error::{Error, Result};
use crate::head::TrainSchedule;
use crate::recursive::TriggerConfig;

pub const SCHEMA_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum ProblemConfig {
    AckleyCategorical {
        #[serde(default = "default_ackley_dims")]
        dims: usize,
        #[serde(default = "default_cardinality")]
        cardinality: usize,
    },
    AckleyContinuous {
        #[serde(default = "default_ackley_dims")]
        dims: usize,
        #[serde(default = "default_ackley_lower")]
        lower: f64,
        #[serde(default = "default_ackley_upper")]
        upper: f64,
    },
    AckleyMixed {
        #[serde(default = "default_mixed_cat")]
        n_cat: usize,
        #[serde(default = "default_cardinality")]
        cardinality: usize,
        #[serde(default = "default_mixed_cont")]
        n_cont: usize,
    },
    Branin32 {
        #[serde(default = "default_branin_dims")]
        dims: usize,
        #[serde(default = "default_cardinality")]
        cardinality: usize,
    },
    MaxsatFile {
        path: PathBuf,
    },
    MaxsatRandom {
        num_vars: usize,
        num_clauses: usize,
        instance_seed: u64,
    },
    Pool {
        path: PathBuf,
        #[serde(default)]
        features: Option<PathBuf>,
        #[serde(default = "default_pool_sense")]
        sense: Sense,
    },
}

impl ProblemConfig {
    pub fn resolve_paths(&mut self, base: &Path) {
        let fix = |p: &mut PathBuf| {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        };
        match self {
            ProblemConfig::MaxsatFile { path } => fix(path),
            ProblemConfig::Pool { path, features, .. } => {
                fix(path);
                if let Some(f) = features {
                    fix(f);
                }
            }
            _ => {}
        }
    }
}

fn default_ackley_dims() -> usize {
    20
}
fn default_cardinality() -> usize {
    11
}
fn default_ackley_lower() -> f64 {
    -32.768
}
fn default_ackley_upper() -> f64 {
    32.768
}
fn default_mixed_cat() -> usize {
    50
}
fn default_mixed_cont() -> usize {
    3
}
fn default_branin_dims() -> usize {
    32
}
fn default_pool_sense() -> Sense {
    Sense::Maximize
}

/// Backbone shape; the input width and ranks come from the problem and ensemble.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct BackboneSettings {
    pub hidden: Vec<usize>,
    pub output_dim: usize,
    pub lora_alpha: f64,
    pub activation: Activation,
    pub dropout: f64,
}

impl Default for BackboneSettings {
    fn default() -> Self {
        let d = BackboneConfig::default();
        Self {
            hidden: d.hidden,
            output_dim: d.output_dim,
            lora_alpha: d.lora_alpha,
            activation: d.activation,
            dropout: d.dropout,
        }
    }
}

impl BackboneSettings {
    pub fn with_input(&self, input_dim: usize) -> BackboneConfig {
        BackboneConfig {
            input_dim,
            hidden: self.hidden.clone(),
            output_dim: self.output_dim,
            rank: 1,
            lora_alpha: self.lora_alpha,
            activation: self.activation,
            dropout: self.dropout,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AcquisitionMode {
    /// Pool enumeration for pool problems, trust region otherwise.
    Auto,
    TrustRegion,
    /// Enumerate a scrambled Sobol candidate set of `pool_size` points.
    SobolPool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AcquisitionConfig {
    pub mode: AcquisitionMode,
    pub hill_climb_budget: usize,
    pub pool_size: usize,
    /// Proposals per iteration.
    pub q: usize,
}

impl Default for AcquisitionConfig {
    fn default() -> Self {
        Self {
            mode: AcquisitionMode::Auto,
            hill_climb_budget: 200,
            pool_size: 1024,
            q: 1,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub schema_version: u32,
    pub problem: ProblemConfig,
    #[serde(default = "default_n0")]
    pub n0: usize,
    pub budget: usize,
    #[serde(default)]
    pub seed: u64,
    #[serde(default)]
    pub backbone: BackboneSettings,
    #[serde(default)]
    pub ensemble: EnsembleConfig,
    #[serde(default)]
    pub trigger: TriggerConfig,
    #[serde(default)]
    pub trust_region: TrustRegionConfig,
    #[serde(default)]
    pub training: TrainSchedule,
    #[serde(default)]
    pub acquisition: AcquisitionConfig,
    #[serde(default = "default_true")]
    pub cache: bool,
    /// Wall-clock timings in the trace; off keeps traces reproducible.
    #[serde(default)]
    pub record_timing: bool,
    #[serde(default)]
    pub skip_failures: bool,
    #[serde(default)]
    pub output_dir: Option<PathBuf>,
}

fn default_n0() -> usize {
    10
}
fn default_true() -> bool {
    true
}

impl RunConfig {
    pub fn new(problem: ProblemConfig, budget: usize) -> Self {
        Self {
            schema_version: SCHEMA_VERSION,
            problem,
            n0: default_n0(),
            budget,
            seed: 0,
            backbone: BackboneSettings::default(),
            ensemble: EnsembleConfig::default(),
            trigger: TriggerConfig::default(),
            trust_region: TrustRegionConfig::default(),
            training: TrainSchedule::default(),
            acquisition: AcquisitionConfig::default(),
            cache: true,
            record_timing: false,
            skip_failures: false,
            output_dir: None,
        }
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: RunConfig = serde_json::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    /// Reads a config file. Relative problem paths resolve against the file's directory.
    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        let mut cfg = Self::from_json(&text)?;
        if let Some(base) = path.parent() {
            cfg.problem.resolve_paths(base);
        }
        Ok(cfg)
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    /// Shape checks that need no problem data; rank feasibility is checked at build time.
    pub fn validate(&self) -> Result<()> {
        if self.schema_version != SCHEMA_VERSION {
            return Err(Error::Config(format!(
                "schema_version {} unsupported (expected {SCHEMA_VERSION})",
                self.schema_version
            )));
        }
        if self.n0 == 0 || self.budget == 0 {
            return Err(Error::Config("n0 and budget must be >= 1".into()));
        }
        if self.acquisition.q == 0 {
            return Err(Error::Config("q must be >= 1".into()));
        }
        if self.acquisition.mode == AcquisitionMode::SobolPool && self.acquisition.pool_size == 0 {
            return Err(Error::Config("pool_size must be >= 1".into()));
        }
        if !(0.0..1.0).contains(&self.backbone.dropout) {
            return Err(Error::Config(format!(
                "dropout {} not in [0, 1)",
                self.backbone.dropout
            )));
        }
        if self.backbone.output_dim == 0 || self.backbone.hidden.contains(&0) {
            return Err(Error::Config("layer widths must be positive".into()));
        }
        self.ensemble.validate()?;
        self.trigger.validate()?;
        if !self.ensemble.bypass_backbone {
            let widths: Vec<usize> = self
                .backbone
                .hidden
                .iter()
                .copied()
                .chain([self.backbone.output_dim])
                .collect();
            let narrowest = widths.iter().copied().min().unwrap_or(0);
            if let Some(r) = self.ensemble.ranks.iter().find(|&&r| r == 0 || r > narrowest) {
                return Err(Error::Config(format!("rank {r} invalid for layer widths {widths:?}")));
            }
        }
        Ok(())
    }
}

pub const BENCH_SUITES: &[&str] = &["ackley20", "ackley53", "ackley_continuous", "branin32", "maxsat60"];

/// Canned configurations for the standard benchmark problems.
pub fn bench_suite(name: &str) -> Option<RunConfig> {
    let problem = match name {
        "ackley20" => ProblemConfig::AckleyCategorical {
            dims: 20,
            cardinality: 11,
        },
        "ackley53" => ProblemConfig::AckleyMixed {
            n_cat: 50,
            cardinality: 11,
            n_cont: 3,
        },
        "ackley_continuous" => ProblemConfig::AckleyContinuous {
            dims: 20,
            lower: default_ackley_lower(),
            upper: default_ackley_upper(),
        },
        "branin32" => ProblemConfig::Branin32 {
            dims: 32,
            cardinality: 11,
        },
        "maxsat60" => ProblemConfig::MaxsatRandom {
            num_vars: 60,
            num_clauses: 255,
            instance_seed: 60,
        },
        _ => return None,
    };
    Some(RunConfig::new(problem, 100))
}
