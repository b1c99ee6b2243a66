//! Run configuration: a TOML file with command-line overrides on top.
//!
//! ```toml
//! seed = 7
//! out = "runs/kin8nm"
//!
//! [data]
//! path = "data/kin8nm.csv"      # or: synthetic = "correlated_noise", n = 500
//! targets = ["y"]
//! test_fraction = 0.1
//!
//! [model]
//! variant = "diffwgp"
//! rank = 5
//! dof = 5
//!
//! [train]
//! total_iters = 50000
//! ```
//!
//! Every key is optional except `seed` (which may also come from `--seed`).

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use wishart_sde::data::Schema;
use wishart_sde::dynamics::{DynamicsConfig, OutputMap};
use wishart_sde::models::{variant, ModelConfig, Task};
use wishart_sde::sdeflow::FlowConfig;
use wishart_sde::train::Schedule;
use wishart_sde::wishart::WishartConfig;

use crate::error::{CliError, CliResult};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub seed: Option<u64>,
    #[serde(default = "default_out")]
    pub out: PathBuf,
    #[serde(default)]
    pub data: DataSection,
    #[serde(default)]
    pub model: ModelSection,
    #[serde(default)]
    pub train: TrainSection,
    #[serde(default)]
    pub forecast: ForecastSection,
    #[serde(default)]
    pub ablate: AblateSection,
}

fn default_out() -> PathBuf {
    PathBuf::from("runs/default")
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DataSection {
    /// CSV file; relative paths resolve against the config file's directory.
    pub path: Option<PathBuf>,
    /// Optional held-out CSV; otherwise a seeded split of `path`.
    pub test_path: Option<PathBuf>,
    /// Built-in generator used when no path is given: `sine`, `correlated_noise` or `correlated_ou`.
    pub synthetic: Option<String>,
    /// Rows generated by the synthetic source.
    pub n: usize,
    pub targets: Vec<String>,
    pub features: Option<Vec<String>>,
    /// Column of hours; makes the data a time series.
    pub time_column: Option<String>,
    pub delimiter: char,
    /// Held-out share of rows (tabular) or trailing share of the series.
    pub test_fraction: f64,
}

impl Default for DataSection {
    fn default() -> Self {
        DataSection {
            path: None,
            test_path: None,
            synthetic: None,
            n: 500,
            targets: vec!["y".into()],
            features: None,
            time_column: None,
            delimiter: ',',
            test_fraction: 0.1,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelSection {
    pub variant: String,
    pub num_inducing: usize,
    /// ρ.
    pub rank: usize,
    /// ν.
    pub dof: usize,
    pub white_noise: bool,
    pub white_noise_init: f64,
    /// Flow integration time `T`.
    pub flow_time: f64,
    pub num_steps: usize,
    pub mc_samples: usize,
    pub eval_mc_samples: usize,
    pub flow_variance_init: f64,
    pub flow_lengthscale_init: f64,
    pub output_variance_init: f64,
    pub output_lengthscale_init: f64,
    pub noise_init: f64,
    pub diagonal_init: f64,
    // latent dynamics only
    pub output_map: String,
    pub latent_dim: Option<usize>,
    pub max_step: f64,
    pub window: usize,
}

impl Default for ModelSection {
    fn default() -> Self {
        let m = ModelConfig::default();
        let d = DynamicsConfig::default();
        ModelSection {
            variant: m.variant,
            num_inducing: m.num_inducing,
            rank: m.wishart.rank,
            dof: m.wishart.dof,
            white_noise: m.wishart.white_noise,
            white_noise_init: m.wishart.white_noise_init,
            flow_time: m.flow.horizon,
            num_steps: m.flow.num_steps,
            mc_samples: m.flow.mc_samples,
            eval_mc_samples: m.flow.eval_mc_samples,
            flow_variance_init: m.flow_variance_init,
            flow_lengthscale_init: m.flow_lengthscale_init,
            output_variance_init: m.output_variance_init,
            output_lengthscale_init: m.output_lengthscale_init,
            noise_init: m.noise_init,
            diagonal_init: m.diagonal_init,
            output_map: d.output_map.name().into(),
            latent_dim: d.latent_dim,
            max_step: d.max_step,
            window: d.window,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainSection {
    pub phase1_iters: usize,
    pub total_iters: usize,
    pub phase1_lr: f64,
    /// Defaults to 0.001 for regression and 0.01 for time series.
    pub phase2_lr: Option<f64>,
    pub anneal_iters: usize,
    pub batch_size: usize,
    /// Adam β₁; defaults to 0.9 for regression and 0.5 for time series.
    pub beta1: Option<f64>,
    /// Global gradient-norm clip; defaults to off for regression and 100 for time series.
    pub clip_norm: Option<f64>,
    pub train_inducing: bool,
    pub train_white_noise: bool,
    pub log_every: usize,
    pub record_wall_time: bool,
}

impl Default for TrainSection {
    fn default() -> Self {
        let s = Schedule::default();
        TrainSection {
            phase1_iters: s.phase1_iters,
            total_iters: s.total_iters,
            phase1_lr: s.phase1_lr,
            phase2_lr: None,
            anneal_iters: s.anneal_iters,
            batch_size: s.batch_size,
            beta1: None,
            clip_norm: None,
            train_inducing: s.train_inducing,
            train_white_noise: s.train_white_noise,
            log_every: s.log_every,
            record_wall_time: s.record_wall_time,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ForecastSection {
    /// Hours to simulate past the end of the context.
    pub horizon: i64,
    pub n_sims: usize,
    /// Coordinate pairs for the joint density grids.
    pub pairs: Vec<[usize; 2]>,
    pub bins: usize,
}

impl Default for ForecastSection {
    fn default() -> Self {
        ForecastSection {
            horizon: 48,
            n_sims: 50,
            pairs: vec![[0, 1]],
            bins: 20,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AblateSection {
    pub variants: Vec<String>,
    pub seeds: Vec<u64>,
    /// Concurrent rows; 0 uses every available core.
    pub workers: usize,
}

impl Default for AblateSection {
    fn default() -> Self {
        AblateSection {
            variants: vec!["sgp".into(), "diffgp".into(), "diffwgp".into()],
            seeds: vec![1, 2, 3, 4, 5],
            workers: 0,
        }
    }
}

/// Command-line values that take precedence over the file.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Overrides {
    pub seed: Option<u64>,
    pub out: Option<PathBuf>,
    pub variant: Option<String>,
    pub rho: Option<usize>,
    pub nu: Option<usize>,
    pub steps: Option<usize>,
    pub mc_samples: Option<usize>,
    pub horizon: Option<i64>,
    pub n_sims: Option<usize>,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            seed: None,
            out: default_out(),
            data: DataSection::default(),
            model: ModelSection::default(),
            train: TrainSection::default(),
            forecast: ForecastSection::default(),
            ablate: AblateSection::default(),
        }
    }
}

impl RunConfig {
    pub fn parse(text: &str) -> CliResult<Self> {
        toml::from_str(text).map_err(|e| CliError::Config(format!("invalid config: {}", e.message())))
    }

    /// Reads `path`, resolving data paths relative to its directory.
    pub fn load(path: &Path) -> CliResult<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| CliError::Config(format!("cannot read config {}: {e}", path.display())))?;
        let mut cfg = Self::parse(&text)?;
        let base = path.parent().unwrap_or(Path::new(""));
        for p in [&mut cfg.data.path, &mut cfg.data.test_path].into_iter().flatten() {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        }
        Ok(cfg)
    }

    pub fn apply(&mut self, o: &Overrides) {
        if let Some(s) = o.seed {
            self.seed = Some(s);
        }
        if let Some(out) = &o.out {
            self.out = out.clone();
        }
        if let Some(v) = &o.variant {
            self.model.variant = v.clone();
        }
        if let Some(r) = o.rho {
            self.model.rank = r;
        }
        if let Some(n) = o.nu {
            self.model.dof = n;
        }
        if let Some(steps) = o.steps {
            self.train.total_iters = steps;
            self.train.phase1_iters = self.train.phase1_iters.min(steps);
        }
        if let Some(m) = o.mc_samples {
            self.model.mc_samples = m;
        }
        if let Some(h) = o.horizon {
            self.forecast.horizon = h;
        }
        if let Some(n) = o.n_sims {
            self.forecast.n_sims = n;
        }
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("configuration serializes")
    }

    /// SHA-256 of the canonical serialization, hex encoded. The output
    /// directory is left out: it names where results go, not what they are.
    pub fn hash(&self) -> String {
        let canonical = RunConfig {
            out: PathBuf::new(),
            ..self.clone()
        };
        Sha256::digest(canonical.to_toml().as_bytes())
            .iter()
            .map(|b| format!("{b:02x}"))
            .collect()
    }

    pub fn seed(&self) -> u64 {
        self.seed.expect("validated config has a seed")
    }

    pub fn is_time_series(&self) -> bool {
        self.data.time_column.is_some() || self.data.synthetic.as_deref() == Some("correlated_ou")
    }

    pub fn task(&self) -> Task {
        if self.is_time_series() {
            Task::Dynamics
        } else {
            Task::Regression
        }
    }

    /// Field-named checks that do not need the data.
    pub fn validate(&self) -> CliResult<()> {
        let field = |name: &str, msg: String| CliError::Config(format!("`{name}`: {msg}"));
        if self.seed.is_none() {
            return Err(field("seed", "a seed is required (set it in the config or pass --seed)".into()));
        }
        match (&self.data.path, &self.data.synthetic) {
            (Some(p), None) => {
                if !p.is_file() {
                    return Err(field("data.path", format!("{} does not exist", p.display())));
                }
            }
            (None, Some(s)) => {
                if !["sine", "correlated_noise", "correlated_ou"].contains(&s.as_str()) {
                    return Err(field(
                        "data.synthetic",
                        format!("unknown generator `{s}` (expected sine, correlated_noise or correlated_ou)"),
                    ));
                }
                if self.data.n < 4 {
                    return Err(field("data.n", "need at least 4 rows".into()));
                }
            }
            (Some(_), Some(_)) => return Err(field("data", "set either `path` or `synthetic`, not both".into())),
            (None, None) => return Err(field("data", "set `path` or `synthetic`".into())),
        }
        if let Some(p) = &self.data.test_path {
            if !p.is_file() {
                return Err(field("data.test_path", format!("{} does not exist", p.display())));
            }
        }
        if !(self.data.test_fraction > 0.0 && self.data.test_fraction < 1.0) && self.data.test_path.is_none() {
            return Err(field("data.test_fraction", format!("must lie in (0, 1), got {}", self.data.test_fraction)));
        }
        if !self.data.delimiter.is_ascii() {
            return Err(field("data.delimiter", "must be a single ASCII character".into()));
        }
        let spec = variant(&self.model.variant).map_err(|e| field("model.variant", e.to_string()))?;
        if !spec.supports(self.task()) {
            return Err(field(
                "model.variant",
                format!("`{}` does not apply to {} data", spec.name, if self.is_time_series() { "time-series" } else { "tabular" }),
            ));
        }
        if self.is_time_series() {
            OutputMap::parse(&self.model.output_map).map_err(|e| field("model.output_map", e.to_string()))?;
            self.dynamics_config()
                .validate()
                .map_err(|e| field("model", e.to_string()))?;
        } else {
            self.model_config().validate().map_err(|e| field("model", e.to_string()))?;
        }
        self.schedule().validate().map_err(|e| field("train", e.to_string()))?;
        if self.forecast.horizon <= 0 {
            return Err(field("forecast.horizon", format!("must be positive, got {}", self.forecast.horizon)));
        }
        if self.forecast.n_sims == 0 {
            return Err(field("forecast.n_sims", "must be positive".into()));
        }
        if self.forecast.bins == 0 {
            return Err(field("forecast.bins", "must be positive".into()));
        }
        Ok(())
    }

    pub fn schema(&self) -> Schema {
        Schema {
            targets: self.data.targets.clone(),
            features: self.data.features.clone(),
            time_column: self.data.time_column.clone(),
            delimiter: self.data.delimiter as u8,
        }
    }

    pub fn model_config(&self) -> ModelConfig {
        let m = &self.model;
        ModelConfig {
            variant: m.variant.clone(),
            num_inducing: m.num_inducing,
            flow: FlowConfig {
                horizon: m.flow_time,
                num_steps: m.num_steps,
                mc_samples: m.mc_samples,
                eval_mc_samples: m.eval_mc_samples,
            },
            wishart: WishartConfig {
                rank: m.rank,
                dof: m.dof,
                white_noise: m.white_noise,
                white_noise_init: m.white_noise_init,
            },
            flow_variance_init: m.flow_variance_init,
            flow_lengthscale_init: m.flow_lengthscale_init,
            output_variance_init: m.output_variance_init,
            output_lengthscale_init: m.output_lengthscale_init,
            noise_init: m.noise_init,
            diagonal_init: m.diagonal_init,
        }
    }

    pub fn dynamics_config(&self) -> DynamicsConfig {
        DynamicsConfig {
            model: self.model_config(),
            output_map: OutputMap::parse(&self.model.output_map).unwrap_or(OutputMap::Identity),
            latent_dim: self.model.latent_dim,
            max_step: self.model.max_step,
            window: self.model.window,
        }
    }

    pub fn schedule(&self) -> Schedule {
        let t = &self.train;
        let base = if self.is_time_series() {
            Schedule::dynamics()
        } else {
            Schedule::default()
        };
        Schedule {
            phase1_iters: t.phase1_iters,
            total_iters: t.total_iters,
            phase1_lr: t.phase1_lr,
            phase2_lr: t.phase2_lr.unwrap_or(base.phase2_lr),
            anneal_iters: t.anneal_iters,
            batch_size: t.batch_size,
            beta1: t.beta1.unwrap_or(base.beta1),
            clip_norm: t.clip_norm.or(base.clip_norm),
            train_inducing: t.train_inducing,
            train_white_noise: t.train_white_noise,
            log_every: t.log_every,
            record_wall_time: t.record_wall_time,
        }
    }
}
