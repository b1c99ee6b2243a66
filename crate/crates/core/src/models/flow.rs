use crate::error::Result;
use crate::kernels::RbfArdKernel;
use crate::ndcore::{Tensor, Var};
use crate::params::{Binding, ParamGroup, ParamStore};
use crate::rng::NoiseStream;
use crate::sdeflow::{Field, SqrtDiffusion};
use crate::svgp::{InducingPrior, LayerInit, SvgpLayer};

use super::diffusion::{self, DiffusionOptions, DiffusionStrategy};
use super::{ModelConfig, VariantSpec};

/// The SDE field: drift from a GP whose covariance is tied to its prior, and
/// a diffusion strategy sharing that GP's kernel and inducing inputs.
#[derive(Debug, Clone)]
pub struct Flow {
    pub layer: SvgpLayer,
    pub diffusion: Box<dyn DiffusionStrategy>,
    pub drift: bool,
}

impl Flow {
    pub fn register(
        store: &mut ParamStore,
        spec: &VariantSpec,
        cfg: &ModelConfig,
        z0: Tensor,
        stream: &NoiseStream,
    ) -> Result<Self> {
        let dim = z0.cols();
        let kernel = RbfArdKernel::register(
            store,
            "flow.kernel",
            ParamGroup::FlowKernel,
            dim,
            cfg.flow_lengthscale_init,
            cfg.flow_variance_init,
        );
        let layer = SvgpLayer::register(
            store,
            LayerInit {
                prefix: "flow",
                group: ParamGroup::Flow,
                inducing_group: ParamGroup::FlowInducing,
                num_outputs: dim,
                fixed_prior_covariance: true,
            },
            kernel,
            z0,
        )?;
        let diffusion = diffusion::build(
            spec.diffusion,
            store,
            &layer,
            &DiffusionOptions {
                wishart: &cfg.wishart,
                diagonal_init: cfg.diagonal_init,
                stream,
            },
        )?;
        Ok(Flow {
            layer,
            diffusion,
            drift: spec.drift,
        })
    }

    pub fn dim(&self) -> usize {
        self.layer.input_dim()
    }

    pub fn bind<'a, 't>(&'a self, params: &'a Binding<'t>) -> Result<BoundFlow<'a, 't>> {
        Ok(BoundFlow {
            flow: self,
            params,
            prior: self.layer.prior(params)?,
        })
    }
}

/// A flow lifted onto a tape; `k(Z,Z)` is factorized once per binding.
pub struct BoundFlow<'a, 't> {
    flow: &'a Flow,
    params: &'a Binding<'t>,
    pub prior: InducingPrior<'t>,
}

impl<'t> BoundFlow<'_, 't> {
    /// `KL(q(u_f) ‖ p(u_f))`, absent when the drift is frozen at zero.
    pub fn kl_f(&self) -> Result<Option<Var<'t>>> {
        if !self.flow.drift {
            return Ok(None);
        }
        Ok(Some(self.flow.layer.kl_fixed_cov(self.params, &self.prior)?))
    }

    pub fn kl_sigma(&self) -> Result<Option<Var<'t>>> {
        self.flow.diffusion.kl(self.params, &self.prior)
    }
}

impl<'t> Field<'t> for BoundFlow<'_, 't> {
    fn dim(&self) -> usize {
        self.flow.dim()
    }

    fn diffusion_noise_width(&self) -> usize {
        self.flow.diffusion.noise_width()
    }

    fn brownian_width(&self) -> usize {
        self.flow.diffusion.brownian_width()
    }

    fn coefficients(&self, x: Var<'t>, noise: Option<Var<'t>>) -> Result<(Var<'t>, SqrtDiffusion<'t>)> {
        let marginal = self.flow.layer.conditional(self.params, &self.prior, x)?;
        let diffusion = self
            .flow
            .diffusion
            .sample(self.params, &self.prior, x, &marginal, noise)?;
        let drift = if self.flow.drift {
            marginal.mean
        } else {
            x.tape().constant(Tensor::zeros(x.rows(), x.cols()))
        };
        Ok((drift, diffusion))
    }
}
