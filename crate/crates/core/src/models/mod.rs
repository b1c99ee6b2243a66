//! Model variants built from a flow field and an output GP.
//!
//! Variants and diffusion strategies are looked up by name at run time; see
//! [`variant`] and [`diffusion::build`].

pub mod diffusion;
mod flow;
mod regression;

pub use diffusion::DiffusionStrategy;
pub use flow::{BoundFlow, Flow};
pub use regression::{expected_loglik, gaussian_log_density, Prediction, RegressionModel};
pub(crate) use regression::log_mean_exp;

use crate::error::{Error, Result};
use crate::ndcore::Var;
use crate::sdeflow::FlowConfig;
use crate::wishart::WishartConfig;

/// Which kind of model a variant applies to.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Task {
    Regression,
    Dynamics,
    Both,
}

/// A named combination of flow, drift and diffusion strategy.
#[derive(Debug, PartialEq, Eq)]
pub struct VariantSpec {
    pub name: &'static str,
    /// Whether inputs pass through an SDE before the output GP.
    pub flow: bool,
    /// Whether the drift is the flow GP mean (otherwise zero).
    pub drift: bool,
    /// Registered diffusion strategy name.
    pub diffusion: &'static str,
    pub task: Task,
}

impl VariantSpec {
    pub fn supports(&self, task: Task) -> bool {
        self.task == Task::Both || self.task == task
    }
}

pub const VARIANTS: &[VariantSpec] = &[
    VariantSpec {
        name: "sgp",
        flow: false,
        drift: false,
        diffusion: "zero",
        task: Task::Regression,
    },
    VariantSpec {
        name: "nonoise",
        flow: true,
        drift: true,
        diffusion: "zero",
        task: Task::Regression,
    },
    VariantSpec {
        name: "diffgp",
        flow: true,
        drift: true,
        diffusion: "kernel-diagonal",
        task: Task::Both,
    },
    VariantSpec {
        name: "diffwgp",
        flow: true,
        drift: true,
        diffusion: "wishart",
        task: Task::Both,
    },
    VariantSpec {
        name: "diagonal",
        flow: true,
        drift: true,
        diffusion: "lambda-diagonal",
        task: Task::Dynamics,
    },
    VariantSpec {
        name: "nodrift",
        flow: true,
        drift: false,
        diffusion: "wishart",
        task: Task::Dynamics,
    },
];

/// Looks a variant up by (case-insensitive) name.
pub fn variant(name: &str) -> Result<&'static VariantSpec> {
    let key = name.trim().to_ascii_lowercase().replace(['_', '-'], "");
    VARIANTS.iter().find(|v| v.name == key).ok_or_else(|| {
        let known: Vec<_> = VARIANTS.iter().map(|v| v.name).collect();
        Error::contract(format!("unknown variant `{name}` (expected one of {})", known.join(", ")))
    })
}

/// Hyperparameters shared by the regression and dynamical models.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelConfig {
    pub variant: String,
    pub num_inducing: usize,
    pub flow: FlowConfig,
    pub wishart: WishartConfig,
    /// Initial flow kernel variance; small so that `x_T ≈ x_0` at the start.
    pub flow_variance_init: f64,
    pub flow_lengthscale_init: f64,
    pub output_variance_init: f64,
    pub output_lengthscale_init: f64,
    /// Initial observation noise variance.
    pub noise_init: f64,
    /// Initial entries of the diagonal-ablation diffusion.
    pub diagonal_init: f64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            variant: "diffwgp".into(),
            num_inducing: 100,
            flow: FlowConfig::default(),
            wishart: WishartConfig::default(),
            flow_variance_init: 0.01,
            flow_lengthscale_init: 1.0,
            output_variance_init: 1.0,
            output_lengthscale_init: 1.0,
            noise_init: 0.1,
            diagonal_init: 0.01,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        variant(&self.variant)?;
        self.flow.validate()?;
        if self.num_inducing == 0 {
            return Err(Error::contract("num_inducing must be positive"));
        }
        if self.wishart.rank == 0 || self.wishart.dof == 0 {
            return Err(Error::contract("rank and dof must be positive"));
        }
        for (name, v) in [
            ("flow_variance_init", self.flow_variance_init),
            ("flow_lengthscale_init", self.flow_lengthscale_init),
            ("output_variance_init", self.output_variance_init),
            ("output_lengthscale_init", self.output_lengthscale_init),
            ("noise_init", self.noise_init),
            ("diagonal_init", self.diagonal_init),
            ("white_noise_init", self.wishart.white_noise_init),
        ] {
            if !(v > 0.0 && v.is_finite()) {
                return Err(Error::contract(format!("{name} must be positive, got {v}")));
            }
        }
        Ok(())
    }
}

/// Values of one ELBO evaluation.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ElboBreakdown {
    pub expected_loglik: f64,
    pub kl_g: f64,
    pub kl_f: f64,
    pub kl_sigma: f64,
    pub total: f64,
    /// Dataset-to-minibatch factor applied to `expected_loglik`.
    pub scale: f64,
}

/// ELBO terms on a tape.
#[derive(Clone, Copy)]
pub struct Elbo<'t> {
    pub expected_loglik: Var<'t>,
    pub kl_g: Option<Var<'t>>,
    pub kl_f: Option<Var<'t>>,
    pub kl_sigma: Option<Var<'t>>,
    pub total: Var<'t>,
    pub scale: f64,
}

impl<'t> Elbo<'t> {
    /// `scale·E[log p] − kl_g − c²·kl_f − c·kl_sigma`.
    pub fn assemble(
        expected_loglik: Var<'t>,
        kl_g: Option<Var<'t>>,
        kl_f: Option<Var<'t>>,
        kl_sigma: Option<Var<'t>>,
        c: f64,
        scale: f64,
    ) -> Result<Self> {
        if !(0.0..=1.0).contains(&c) {
            return Err(Error::contract(format!("anneal coefficient must lie in [0, 1], got {c}")));
        }
        let mut total = expected_loglik.scale(scale);
        for (kl, w) in [(kl_g, 1.0), (kl_f, c * c), (kl_sigma, c)] {
            if let Some(kl) = kl {
                total = total.sub(kl.scale(w))?;
            }
        }
        Ok(Elbo {
            expected_loglik,
            kl_g,
            kl_f,
            kl_sigma,
            total,
            scale,
        })
    }

    pub fn breakdown(&self) -> ElboBreakdown {
        let v = |k: Option<Var<'_>>| k.map_or(0.0, |k| k.item());
        ElboBreakdown {
            expected_loglik: self.expected_loglik.item(),
            kl_g: v(self.kl_g),
            kl_f: v(self.kl_f),
            kl_sigma: v(self.kl_sigma),
            total: self.total.item(),
            scale: self.scale,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn variant_lookup() {
        assert_eq!(variant("DiffWGP").unwrap().diffusion, "wishart");
        assert_eq!(variant("no_noise").unwrap().name, "nonoise");
        assert!(!variant("sgp").unwrap().flow);
        assert!(!variant("nodrift").unwrap().drift);
        match variant("bogus") {
            Err(Error::Contract(m)) => assert!(m.contains("bogus")),
            _ => panic!(),
        }
        for v in VARIANTS {
            assert!(diffusion::REGISTRY.iter().any(|d| d.name == v.diffusion), "{}", v.name);
        }
    }
}
