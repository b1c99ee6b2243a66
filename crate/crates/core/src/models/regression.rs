use std::f64::consts::PI;
use std::ops::Range;

use crate::error::{Error, Result};
use crate::kernels::RbfArdKernel;
use crate::ndcore::{inv_softplus, softplus_scalar, Tape, Tensor, Var};
use crate::params::{Binding, ParamGroup, ParamId, ParamStore};
use crate::rng::NoiseStream;
use crate::sdeflow::{integrate, simulate, tile};
use crate::svgp::{kmeans_inducing, LayerInit, Marginal, SvgpLayer};

use super::{variant, Elbo, ElboBreakdown, Flow, ModelConfig, Task, VariantSpec};

/// Points per tape when predicting, to bound memory.
const PREDICT_CHUNK: usize = 256;

/// Regression model `y = g(x_T) + ε` with `x_T` the flow of `x` (or `x` itself for SGP).
#[derive(Debug, Clone)]
pub struct RegressionModel {
    pub spec: &'static VariantSpec,
    pub config: ModelConfig,
    pub params: ParamStore,
    pub flow: Option<Flow>,
    pub g: SvgpLayer,
    pub noise_raw: ParamId,
    output_dim: usize,
}

/// `Σ log N(y; μ, v)` elementwise.
pub fn gaussian_log_density(y: &Tensor, mean: &Tensor, var: &Tensor) -> Result<f64> {
    if y.shape() != mean.shape() || y.shape() != var.shape() {
        return Err(Error::Dimension {
            op: "gaussian_log_density",
            lhs: y.shape(),
            rhs: mean.shape(),
        });
    }
    Ok(y.data()
        .iter()
        .zip(mean.data())
        .zip(var.data())
        .map(|((y, m), v)| -0.5 * (2.0 * PI * v).ln() - 0.5 * (y - m).powi(2) / v)
        .sum())
}

/// Monte Carlo estimate of `E_q[log N(y | g, σ²)]`, summed over points.
///
/// `g` holds the output-GP marginals on sample-major stacked paths; the
/// Gaussian expectation over each marginal is taken in closed form,
/// `log N(y; μ, σ²) − v / (2σ²)`, and the paths are averaged.
pub fn expected_loglik<'t>(g: &Marginal<'t>, y: Var<'t>, noise_var: Var<'t>) -> Result<Var<'t>> {
    if noise_var.shape() != [1, 1] || noise_var.item() <= 0.0 {
        return Err(Error::contract("observation noise variance must be a positive scalar"));
    }
    let n = y.rows();
    if n == 0 || g.mean.rows() % n != 0 || g.mean.cols() != y.cols() {
        return Err(Error::Dimension {
            op: "expected_loglik",
            lhs: g.mean.shape(),
            rhs: y.shape(),
        });
    }
    let samples = g.mean.rows() / n;
    let count = (n * y.cols()) as f64;
    let resid = tile(y, samples)?.sub(g.mean)?.square().add(g.var)?;
    let quad = resid.sum().div(noise_var.scale(2.0))?;
    let norm = noise_var.ln().add_scalar((2.0 * PI).ln()).scale(-0.5 * count);
    Ok(norm.sub(quad.scale(1.0 / samples as f64))?)
}

/// Gaussian-mixture predictive over Monte Carlo paths.
#[derive(Debug, Clone, PartialEq)]
pub struct Prediction {
    /// Component means, one n×η matrix per path.
    pub means: Vec<Tensor>,
    /// Component variances including observation noise.
    pub vars: Vec<Tensor>,
}

impl Prediction {
    pub fn num_samples(&self) -> usize {
        self.means.len()
    }

    pub fn mean(&self) -> Tensor {
        let s = self.means.len() as f64;
        let mut acc = Tensor::zeros(self.means[0].rows(), self.means[0].cols());
        for m in &self.means {
            acc.add_assign(m);
        }
        acc.scale(1.0 / s)
    }

    /// Mixture variance `E[v + μ²] − (E μ)²`.
    pub fn variance(&self) -> Tensor {
        let mean = self.mean();
        let s = self.means.len() as f64;
        let mut acc = Tensor::zeros(mean.rows(), mean.cols());
        for (m, v) in self.means.iter().zip(&self.vars) {
            acc.add_assign(&m.zip_map(v, |m, v| v + m * m).expect("same shape"));
        }
        acc.scale(1.0 / s).zip_map(&mean, |a, m| (a - m * m).max(0.0)).expect("same shape")
    }

    /// `log p(y_i)` per point under each component, S×n.
    pub fn component_log_density(&self, y: &Tensor) -> Result<Tensor> {
        let (s, n) = (self.means.len(), y.rows());
        if self.means[0].shape() != y.shape() {
            return Err(Error::Dimension {
                op: "log_density",
                lhs: self.means[0].shape(),
                rhs: y.shape(),
            });
        }
        let mut out = Tensor::zeros(s, n);
        for k in 0..s {
            for i in 0..n {
                let ll = y
                    .row_slice(i)
                    .iter()
                    .zip(self.means[k].row_slice(i))
                    .zip(self.vars[k].row_slice(i))
                    .map(|((y, m), v)| -0.5 * (2.0 * PI * v).ln() - 0.5 * (y - m).powi(2) / v)
                    .sum();
                out.set(k, i, ll);
            }
        }
        Ok(out)
    }

    /// Mixture log density per point (log-mean-exp over components).
    pub fn log_density(&self, y: &Tensor) -> Result<Vec<f64>> {
        let comp = self.component_log_density(y)?;
        Ok((0..y.rows())
            .map(|i| {
                let col: Vec<f64> = (0..comp.rows()).map(|k| comp.get(k, i)).collect();
                log_mean_exp(&col)
            })
            .collect())
    }

    /// Root mean squared error of the mixture mean.
    pub fn rmse(&self, y: &Tensor) -> Result<f64> {
        let err = self.mean().sub(y)?;
        Ok((err.data().iter().map(|e| e * e).sum::<f64>() / err.len() as f64).sqrt())
    }

    fn concat(parts: Vec<Prediction>) -> Result<Prediction> {
        let s = parts[0].means.len();
        let pick = |f: &dyn Fn(&Prediction) -> &Vec<Tensor>| -> Result<Vec<Tensor>> {
            (0..s)
                .map(|k| Tensor::concat_rows(&parts.iter().map(|p| f(p)[k].clone()).collect::<Vec<_>>()))
                .collect()
        };
        Ok(Prediction {
            means: pick(&|p| &p.means)?,
            vars: pick(&|p| &p.vars)?,
        })
    }
}

pub(crate) fn log_mean_exp(v: &[f64]) -> f64 {
    let max = v.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    if !max.is_finite() {
        return max;
    }
    max + (v.iter().map(|x| (x - max).exp()).sum::<f64>() / v.len() as f64).ln()
}

impl RegressionModel {
    /// Builds a model with inducing inputs placed by k-means on `x`.
    pub fn new(cfg: &ModelConfig, x: &Tensor, output_dim: usize, stream: &NoiseStream) -> Result<Self> {
        cfg.validate()?;
        let spec = variant(&cfg.variant)?;
        if !spec.supports(Task::Regression) {
            return Err(Error::contract(format!("variant `{}` is not a regression model", spec.name)));
        }
        if x.rows() == 0 {
            return Err(Error::EmptyDataset);
        }
        if output_dim == 0 {
            return Err(Error::contract("output dimension must be positive"));
        }
        let dim = x.cols();
        let z0 = kmeans_inducing(x, cfg.num_inducing.min(x.rows()), stream)?;
        let mut params = ParamStore::new();
        let kernel = RbfArdKernel::register(
            &mut params,
            "g.kernel",
            ParamGroup::Output,
            dim,
            cfg.output_lengthscale_init,
            cfg.output_variance_init,
        );
        let g = SvgpLayer::register(
            &mut params,
            LayerInit {
                prefix: "g",
                group: ParamGroup::Output,
                inducing_group: ParamGroup::OutputInducing,
                num_outputs: output_dim,
                fixed_prior_covariance: false,
            },
            kernel,
            z0.clone(),
        )?;
        let noise_raw = params.add(
            "likelihood.noise",
            ParamGroup::Likelihood,
            Tensor::scalar(inv_softplus(cfg.noise_init)),
        );
        let flow = if spec.flow {
            Some(Flow::register(&mut params, spec, cfg, z0, stream)?)
        } else {
            None
        };
        Ok(RegressionModel {
            spec,
            config: cfg.clone(),
            params,
            flow,
            g,
            noise_raw,
            output_dim,
        })
    }

    pub fn input_dim(&self) -> usize {
        self.g.input_dim()
    }

    pub fn output_dim(&self) -> usize {
        self.output_dim
    }

    pub fn noise_variance(&self) -> f64 {
        softplus_scalar(self.params.value(self.noise_raw).item())
    }

    fn check_inputs(&self, x: &Tensor, y: Option<&Tensor>) -> Result<()> {
        if x.cols() != self.input_dim() {
            return Err(Error::contract(format!(
                "model expects {} input columns, got {}",
                self.input_dim(),
                x.cols()
            )));
        }
        if !x.is_finite() {
            return Err(Error::contract("inputs contain non-finite values"));
        }
        if let Some(y) = y {
            if y.rows() != x.rows() || y.cols() != self.output_dim {
                return Err(Error::Dimension {
                    op: "regression targets",
                    lhs: [x.rows(), self.output_dim],
                    rhs: y.shape(),
                });
            }
        }
        Ok(())
    }

    /// Output-GP marginals at the terminal states of `samples` paths (one
    /// block for SGP, which has no flow).
    pub fn forward<'t>(
        &self,
        params: &Binding<'t>,
        x: Var<'t>,
        samples: Range<usize>,
        stream: &NoiseStream,
    ) -> Result<Marginal<'t>> {
        let xt = match &self.flow {
            Some(flow) => integrate(x, &flow.bind(params)?, &self.config.flow, samples, stream)?,
            None => x,
        };
        let prior = self.g.prior(params)?;
        self.g.conditional(params, &prior, xt)
    }

    /// ELBO on a minibatch with likelihood scale `scale = N / |batch|`.
    #[allow(clippy::too_many_arguments)]
    pub fn elbo<'t>(
        &self,
        params: &Binding<'t>,
        x: &Tensor,
        y: &Tensor,
        c: f64,
        scale: f64,
        samples: usize,
        stream: &NoiseStream,
    ) -> Result<Elbo<'t>> {
        self.check_inputs(x, Some(y))?;
        let tape = params.get(self.noise_raw).tape();
        let xv = tape.constant(x.clone());
        let g_prior = self.g.prior(params)?;
        let (xt, kl_f, kl_sigma) = match &self.flow {
            Some(flow) => {
                let bound = flow.bind(params)?;
                let xt = integrate(xv, &bound, &self.config.flow, 0..samples, stream)?;
                (xt, bound.kl_f()?, bound.kl_sigma()?)
            }
            None => (xv, None, None),
        };
        let gm = self.g.conditional(params, &g_prior, xt)?;
        let noise = params.get(self.noise_raw).softplus();
        let ell = expected_loglik(&gm, tape.constant(y.clone()), noise)?;
        let kl_g = self.g.kl_full(params, &g_prior)?;
        Elbo::assemble(ell, Some(kl_g), kl_f, kl_sigma, c, scale)
    }

    /// Value-only ELBO over the full data set.
    pub fn elbo_estimate(
        &self,
        x: &Tensor,
        y: &Tensor,
        c: f64,
        samples: usize,
        stream: &NoiseStream,
    ) -> Result<ElboBreakdown> {
        let tape = Tape::new();
        let params = self.params.bind_constant(&tape);
        Ok(self.elbo(&params, x, y, c, 1.0, samples, stream)?.breakdown())
    }

    /// Predictive mixture at `x` over `samples` paths.
    pub fn predict(&self, x: &Tensor, samples: usize, stream: &NoiseStream) -> Result<Prediction> {
        self.check_inputs(x, None)?;
        if x.rows() == 0 {
            return Err(Error::EmptyDataset);
        }
        let samples = if self.flow.is_some() { samples.max(1) } else { 1 };
        let noise = self.noise_variance();
        let mut parts = Vec::new();
        for (chunk, start) in (0..x.rows()).step_by(PREDICT_CHUNK).enumerate() {
            let rows: Vec<usize> = (start..(start + PREDICT_CHUNK).min(x.rows())).collect();
            let xc = x.select_rows(&rows);
            let n = xc.rows();
            let tape = Tape::new();
            let params = self.params.bind_constant(&tape);
            let xt = match &self.flow {
                Some(flow) => {
                    let bound = flow.bind(&params)?;
                    let steps = self.config.flow.steps();
                    let path = simulate(
                        &tape,
                        &xc.tile_rows(samples),
                        &bound,
                        &steps,
                        0..samples,
                        &stream.child(chunk as u64),
                        0,
                    )?;
                    path.into_iter().last().unwrap_or_else(|| xc.tile_rows(samples))
                }
                None => xc,
            };
            let prior = self.g.prior(&params)?;
            let gm = self.g.conditional(&params, &prior, tape.constant(xt))?;
            let (mean, var) = (gm.mean.value(), gm.var.value());
            let block = |t: &Tensor, k: usize, add: f64| t.slice(k * n..(k + 1) * n, 0..t.cols()).map(|v| v + add);
            parts.push(Prediction {
                means: (0..samples).map(|k| block(&mean, k, 0.0)).collect(),
                vars: (0..samples).map(|k| block(&var, k, noise)).collect(),
            });
        }
        Prediction::concat(parts)
    }
}
