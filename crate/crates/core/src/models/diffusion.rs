//! Diffusion strategies for the flow field, registered by name.

use std::fmt::Debug;

use crate::error::{Error, Result};
use crate::ndcore::{inv_softplus, Tensor, Var};
use crate::params::{Binding, ParamGroup, ParamId, ParamStore};
use crate::rng::NoiseStream;
use crate::sdeflow::SqrtDiffusion;
use crate::svgp::{InducingPrior, Marginal, SvgpLayer};
use crate::wishart::{WishartConfig, WishartDiffusion};

/// How `√Σ(x)` is produced for the flow.
pub trait DiffusionStrategy: Debug + Send + Sync {
    fn name(&self) -> &'static str;
    /// Standard normal columns per point to sample the coefficient itself.
    fn noise_width(&self) -> usize;
    /// Standard normal columns per point of one Brownian increment.
    fn brownian_width(&self) -> usize;
    /// Draws `√Σ` at `x`; `flow` are the flow GP marginals at the same points.
    fn sample<'t>(
        &self,
        params: &Binding<'t>,
        prior: &InducingPrior<'t>,
        x: Var<'t>,
        flow: &Marginal<'t>,
        noise: Option<Var<'t>>,
    ) -> Result<SqrtDiffusion<'t>>;
    /// KL of the strategy's own variational distribution, if it has one.
    fn kl<'t>(&self, params: &Binding<'t>, prior: &InducingPrior<'t>) -> Result<Option<Var<'t>>>;
    fn wishart(&self) -> Option<&WishartDiffusion> {
        None
    }
    fn clone_box(&self) -> Box<dyn DiffusionStrategy>;
}

impl Clone for Box<dyn DiffusionStrategy> {
    fn clone(&self) -> Self {
        self.clone_box()
    }
}

/// Everything a strategy may need at construction.
pub struct DiffusionOptions<'a> {
    pub wishart: &'a WishartConfig,
    pub diagonal_init: f64,
    pub stream: &'a NoiseStream,
}

pub type Builder =
    fn(&mut ParamStore, &SvgpLayer, &DiffusionOptions<'_>) -> Result<Box<dyn DiffusionStrategy>>;

pub struct Entry {
    pub name: &'static str,
    pub build: Builder,
}

pub const REGISTRY: &[Entry] = &[
    Entry {
        name: "zero",
        build: |_, _, _| Ok(Box::new(ZeroDiffusion)),
    },
    Entry {
        name: "kernel-diagonal",
        build: |_, flow, _| Ok(Box::new(KernelDiagonal { dim: flow.input_dim() })),
    },
    Entry {
        name: "wishart",
        build: |store, flow, opts| {
            Ok(Box::new(WishartStrategy(WishartDiffusion::register(
                store,
                "wishart",
                flow,
                opts.wishart,
                opts.stream,
            )?)))
        },
    },
    Entry {
        name: "lambda-diagonal",
        build: |store, flow, opts| {
            let dim = flow.input_dim();
            let lambda_raw = store.add(
                "diagonal.lambda",
                ParamGroup::WhiteNoise,
                Tensor::full(1, dim, inv_softplus(opts.diagonal_init)),
            );
            Ok(Box::new(LambdaDiagonal { lambda_raw, dim }))
        },
    },
];

/// Builds the strategy registered under `name`.
pub fn build(
    name: &str,
    store: &mut ParamStore,
    flow: &SvgpLayer,
    opts: &DiffusionOptions<'_>,
) -> Result<Box<dyn DiffusionStrategy>> {
    let entry = REGISTRY
        .iter()
        .find(|e| e.name == name)
        .ok_or_else(|| Error::contract(format!("unknown diffusion strategy `{name}`")))?;
    (entry.build)(store, flow, opts)
}

/// Deterministic flow: `Σ = 0`.
#[derive(Debug, Clone)]
pub struct ZeroDiffusion;

impl DiffusionStrategy for ZeroDiffusion {
    fn name(&self) -> &'static str {
        "zero"
    }
    fn noise_width(&self) -> usize {
        0
    }
    fn brownian_width(&self) -> usize {
        0
    }
    fn sample<'t>(
        &self,
        _: &Binding<'t>,
        _: &InducingPrior<'t>,
        _: Var<'t>,
        _: &Marginal<'t>,
        _: Option<Var<'t>>,
    ) -> Result<SqrtDiffusion<'t>> {
        Ok(SqrtDiffusion::Zero)
    }
    fn kl<'t>(&self, _: &Binding<'t>, _: &InducingPrior<'t>) -> Result<Option<Var<'t>>> {
        Ok(None)
    }
    fn clone_box(&self) -> Box<dyn DiffusionStrategy> {
        Box::new(self.clone())
    }
}

/// Diagonal `Σ` equal to the flow GP's marginal variances.
#[derive(Debug, Clone)]
pub struct KernelDiagonal {
    dim: usize,
}

impl DiffusionStrategy for KernelDiagonal {
    fn name(&self) -> &'static str {
        "kernel-diagonal"
    }
    fn noise_width(&self) -> usize {
        0
    }
    fn brownian_width(&self) -> usize {
        self.dim
    }
    fn sample<'t>(
        &self,
        _: &Binding<'t>,
        _: &InducingPrior<'t>,
        _: Var<'t>,
        flow: &Marginal<'t>,
        _: Option<Var<'t>>,
    ) -> Result<SqrtDiffusion<'t>> {
        Ok(SqrtDiffusion::Diagonal(flow.var.safe_sqrt()))
    }
    fn kl<'t>(&self, _: &Binding<'t>, _: &InducingPrior<'t>) -> Result<Option<Var<'t>>> {
        Ok(None)
    }
    fn clone_box(&self) -> Box<dyn DiffusionStrategy> {
        Box::new(self.clone())
    }
}

/// Wishart-process diffusion.
#[derive(Debug, Clone)]
pub struct WishartStrategy(pub WishartDiffusion);

impl DiffusionStrategy for WishartStrategy {
    fn name(&self) -> &'static str {
        "wishart"
    }
    fn noise_width(&self) -> usize {
        self.0.noise_width()
    }
    fn brownian_width(&self) -> usize {
        self.0.dof() + if self.0.white_noise() { self.0.dim() } else { 0 }
    }
    fn sample<'t>(
        &self,
        params: &Binding<'t>,
        prior: &InducingPrior<'t>,
        x: Var<'t>,
        _: &Marginal<'t>,
        noise: Option<Var<'t>>,
    ) -> Result<SqrtDiffusion<'t>> {
        let noise = noise.ok_or_else(|| Error::contract("Wishart diffusion needs sampling noise"))?;
        Ok(SqrtDiffusion::Factor(self.0.sample_sqrt_sigma(params, prior, x, noise)?))
    }
    fn kl<'t>(&self, params: &Binding<'t>, prior: &InducingPrior<'t>) -> Result<Option<Var<'t>>> {
        Ok(Some(self.0.kl(params, prior)?))
    }
    fn wishart(&self) -> Option<&WishartDiffusion> {
        Some(&self.0)
    }
    fn clone_box(&self) -> Box<dyn DiffusionStrategy> {
        Box::new(self.clone())
    }
}

/// State-independent learned diagonal `Σ = Λ`.
#[derive(Debug, Clone)]
pub struct LambdaDiagonal {
    pub lambda_raw: ParamId,
    dim: usize,
}

impl DiffusionStrategy for LambdaDiagonal {
    fn name(&self) -> &'static str {
        "lambda-diagonal"
    }
    fn noise_width(&self) -> usize {
        0
    }
    fn brownian_width(&self) -> usize {
        self.dim
    }
    fn sample<'t>(
        &self,
        params: &Binding<'t>,
        _: &InducingPrior<'t>,
        _: Var<'t>,
        _: &Marginal<'t>,
        _: Option<Var<'t>>,
    ) -> Result<SqrtDiffusion<'t>> {
        Ok(SqrtDiffusion::Diagonal(params.get(self.lambda_raw).softplus().sqrt()))
    }
    fn kl<'t>(&self, _: &Binding<'t>, _: &InducingPrior<'t>) -> Result<Option<Var<'t>>> {
        Ok(None)
    }
    fn clone_box(&self) -> Box<dyn DiffusionStrategy> {
        Box::new(self.clone())
    }
}
