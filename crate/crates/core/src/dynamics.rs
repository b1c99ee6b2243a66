//! Latent SDE dynamics observed through `y_t = g(x_t) + ε_t`, with
//! `ε_t ~ N(0, A Σ(x_t) Aᵀ + Λ)` sharing the diffusion of the latent path.

use std::ops::Range;

use rand::Rng;
use rand_distr::StandardNormal;

use crate::error::{Error, Result};
use crate::kernels::RbfArdKernel;
use crate::models::{variant, Elbo, Flow, ModelConfig, Task, VariantSpec};
use crate::models::BoundFlow;
use crate::ndcore::{inv_softplus, Jitter, Tape, Tensor, Var};
use crate::params::{Binding, ParamGroup, ParamId, ParamStore};
use crate::rng::{tag, NoiseStream};
use crate::sdeflow::{rollout, tile, Field, SqrtDiffusion};
use crate::svgp::{kmeans_inducing, InducingPrior, LayerInit, SvgpLayer};
use crate::wishart::WishartFactor;

/// How latent states map to observation means.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum OutputMap {
    /// `g(x) = x`; requires the latent and observed dimensions to agree.
    Identity,
    /// A sparse GP from latent to observed space.
    Gp,
}

impl OutputMap {
    pub fn parse(name: &str) -> Result<Self> {
        match name.to_ascii_lowercase().as_str() {
            "identity" => Ok(OutputMap::Identity),
            "gp" => Ok(OutputMap::Gp),
            other => Err(Error::contract(format!(
                "unknown output map `{other}` (expected identity or gp)"
            ))),
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            OutputMap::Identity => "identity",
            OutputMap::Gp => "gp",
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct DynamicsConfig {
    pub model: ModelConfig,
    pub output_map: OutputMap,
    /// Latent dimension; defaults to the observed dimension.
    pub latent_dim: Option<usize>,
    /// Largest Euler–Maruyama step, in hours.
    pub max_step: f64,
    /// Observations per training window.
    pub window: usize,
}

impl Default for DynamicsConfig {
    fn default() -> Self {
        DynamicsConfig {
            model: ModelConfig::default(),
            output_map: OutputMap::Identity,
            latent_dim: None,
            max_step: 1.0,
            window: 64,
        }
    }
}

impl DynamicsConfig {
    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        if !(self.max_step > 0.0 && self.max_step.is_finite()) {
            return Err(Error::contract(format!("max_step must be positive, got {}", self.max_step)));
        }
        if self.window < 1 {
            return Err(Error::contract("window must hold at least one observation"));
        }
        if self.latent_dim == Some(0) {
            return Err(Error::contract("latent_dim must be positive"));
        }
        Ok(())
    }
}

/// A stretch of one multivariate series.
#[derive(Debug, Clone, PartialEq)]
pub struct SequenceBatch {
    /// Hours, strictly increasing.
    pub times: Vec<f64>,
    /// len×η.
    pub observations: Tensor,
    /// Row-major flags, `true` where the entry was observed rather than interpolated.
    pub mask: Vec<bool>,
}

impl SequenceBatch {
    /// A fully observed sequence.
    pub fn new(times: Vec<f64>, observations: Tensor) -> Result<Self> {
        let mask = vec![true; observations.len()];
        let b = SequenceBatch {
            times,
            observations,
            mask,
        };
        b.validate()?;
        Ok(b)
    }

    pub fn len(&self) -> usize {
        self.times.len()
    }

    pub fn is_empty(&self) -> bool {
        self.times.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.observations.cols()
    }

    pub fn validate(&self) -> Result<()> {
        if self.times.is_empty() {
            return Err(Error::EmptyDataset);
        }
        if self.observations.rows() != self.times.len() || self.mask.len() != self.observations.len() {
            return Err(Error::contract("sequence times, observations and mask disagree in length"));
        }
        if !self.observations.is_finite() || self.times.iter().any(|t| !t.is_finite()) {
            return Err(Error::contract("sequence contains non-finite values"));
        }
        if let Some(w) = self.times.windows(2).find(|w| w[1] <= w[0]) {
            return Err(Error::contract(format!(
                "times must be strictly increasing ({} then {})",
                w[0], w[1]
            )));
        }
        Ok(())
    }

    /// Rows `range` as their own batch.
    pub fn slice(&self, range: Range<usize>) -> SequenceBatch {
        let eta = self.dim();
        SequenceBatch {
            times: self.times[range.clone()].to_vec(),
            observations: self.observations.slice(range.clone(), 0..eta),
            mask: self.mask[range.start * eta..range.end * eta].to_vec(),
        }
    }

    /// Observation at time `t`, linearly interpolated between stored rows.
    pub fn value_at(&self, t: f64) -> Option<Vec<f64>> {
        let (first, last) = (self.times[0], *self.times.last()?);
        if t < first - 1e-9 || t > last + 1e-9 {
            return None;
        }
        let k = self.times.partition_point(|&s| s < t - 1e-9);
        if k < self.len() && (self.times[k] - t).abs() <= 1e-9 {
            return Some(self.observations.row_slice(k).to_vec());
        }
        let (t0, t1) = (self.times[k - 1], self.times[k]);
        let w = (t - t0) / (t1 - t0);
        Some(
            self.observations
                .row_slice(k - 1)
                .iter()
                .zip(self.observations.row_slice(k))
                .map(|(a, b)| a + w * (b - a))
                .collect(),
        )
    }
}

/// Contiguous training windows of `window` observations covering `0..len`;
/// a trailing remainder of a single observation is merged into the last window.
pub fn windows(len: usize, window: usize) -> Vec<Range<usize>> {
    let mut out: Vec<Range<usize>> = (0..len)
        .step_by(window.max(1))
        .map(|s| s..(s + window).min(len))
        .collect();
    if out.len() > 1 && out.last().is_some_and(|r| r.len() == 1) && window > 1 {
        let tail = out.pop().unwrap();
        out.last_mut().unwrap().end = tail.end;
    }
    out
}

/// Euler–Maruyama step sizes covering `delta` with no step above `max_step`.
pub fn substeps(delta: f64, max_step: f64) -> Vec<f64> {
    let n = ((delta / max_step) - 1e-9).ceil().max(1.0) as usize;
    vec![delta / n as f64; n]
}

const LN_2PI: f64 = 1.837_877_066_409_345_5;

/// `log N(y; g, B)` with `B = A Σ Aᵀ + diag(Λ)` for every row, via the
/// determinant lemma and Woodbury identity on the factors of `Σ`.
///
/// `resid` is `y − g` (S×η); `sqrt_sigma` holds the factors of `Σ` at the
/// same rows; `out_var`, when present, adds the variational correction
/// `−½ tr(B⁻¹ diag v)` for a Gaussian-distributed `g`. Returns S×1.
pub fn obs_loglik_rows<'t>(
    resid: Var<'t>,
    out_var: Option<Var<'t>>,
    sqrt_sigma: &SqrtDiffusion<'t>,
    a: Var<'t>,
    lambda: Var<'t>,
) -> Result<Var<'t>> {
    let (s, eta) = (resid.rows(), resid.cols());
    if a.rows() != eta || lambda.shape() != [1, eta] {
        return Err(Error::Dimension {
            op: "obs_loglik",
            lhs: resid.shape(),
            rhs: a.shape(),
        });
    }
    if let Some(j) = lambda.value().data().iter().position(|&l| !(l > 0.0)) {
        return Err(Error::contract(format!("observation noise entry {j} must be positive")));
    }
    let tape = resid.tape();
    let at = a.t();
    // per-sample factor columns (as rows of G) and shared ones
    let mut per_sample: Vec<Var<'t>> = Vec::new();
    let mut shared: Vec<Var<'t>> = Vec::new();
    match sqrt_sigma {
        SqrtDiffusion::Zero => {}
        SqrtDiffusion::Diagonal(d) if d.rows() == 1 => shared.push(at.mul(d.t())?),
        SqrtDiffusion::Diagonal(d) => per_sample.push(*d),
        SqrtDiffusion::Factor(WishartFactor { factors, sqrt_lambda }) => {
            for f in factors {
                per_sample.push(f.matmul(at)?);
            }
            if let Some(sl) = sqrt_lambda {
                shared.push(at.mul(sl.t())?);
            }
        }
    }
    let diag_per_sample = matches!(sqrt_sigma, SqrtDiffusion::Diagonal(d) if d.rows() != 1);
    let log_det_lambda = lambda.ln().sum();
    let mut out = Vec::with_capacity(s);
    for i in 0..s {
        let r = resid.rows_range(i..i + 1)?;
        let mut parts: Vec<Var<'t>> = Vec::new();
        if diag_per_sample {
            parts.push(at.mul(per_sample[0].rows_range(i..i + 1)?.t())?);
        } else {
            for p in &per_sample {
                parts.push(p.rows_range(i..i + 1)?);
            }
        }
        parts.extend(shared.iter().copied());
        let mut quad = r.square().div(lambda)?.sum();
        let var = out_var.map(|v| v.rows_range(i..i + 1)).transpose()?;
        if let Some(v) = var {
            quad = quad.add(v.div(lambda)?.sum())?;
        }
        let mut log_det = log_det_lambda;
        if !parts.is_empty() {
            let g = Var::concat_rows(&parts)?;
            let k = g.rows();
            let gs = g.div(lambda)?;
            let c = tape.constant(Tensor::identity(k)).add(gs.matmul(g.t())?)?;
            let l = c.cholesky(Jitter::EXACT)?;
            let z = l.solve_lower(gs.matmul(r.t())?)?;
            quad = quad.sub(z.square().sum())?;
            if let Some(v) = var {
                let w = l.solve_lower(gs)?;
                quad = quad.sub(w.square().mul(v)?.sum())?;
            }
            log_det = log_det.add(l.diag()?.ln().sum().scale(2.0))?;
        }
        out.push(log_det.add(quad)?.scale(-0.5).add_scalar(-0.5 * eta as f64 * LN_2PI));
    }
    Var::concat_rows(&out)
}

/// `log N(y; g, A F Fᵀ Aᵀ + diag(Λ))` for a single observation, `F` being D×ν.
pub fn obs_loglik(y: &[f64], g: &[f64], factor: &Tensor, a: &Tensor, lambda: &[f64]) -> Result<f64> {
    if y.len() != g.len() || factor.rows() != a.cols() {
        return Err(Error::Dimension {
            op: "obs_loglik",
            lhs: [y.len(), g.len()],
            rhs: [factor.rows(), a.cols()],
        });
    }
    let tape = Tape::new();
    let resid: Vec<f64> = y.iter().zip(g).map(|(y, g)| y - g).collect();
    let ft = factor.transpose();
    let factors = (0..ft.rows())
        .map(|v| tape.constant(ft.slice(v..v + 1, 0..ft.cols())))
        .collect();
    let sqrt = SqrtDiffusion::Factor(WishartFactor {
        factors,
        sqrt_lambda: None,
    });
    let out = obs_loglik_rows(
        tape.constant(Tensor::row(&resid)),
        None,
        &sqrt,
        tape.constant(a.clone()),
        tape.constant(Tensor::row(lambda)),
    )?;
    Ok(out.item())
}

/// Orthonormal rows (or columns, when taller than wide) from a Gaussian draw.
fn random_orthonormal(rows: usize, cols: usize, stream: &NoiseStream) -> Tensor {
    let (n, m) = (rows.min(cols), rows.max(cols));
    let mut rng = stream.rng(&[tag::INIT, 3]);
    let mut basis: Vec<Vec<f64>> = Vec::with_capacity(n);
    while basis.len() < n {
        let mut v: Vec<f64> = (0..m).map(|_| rng.sample(StandardNormal)).collect();
        for b in &basis {
            let d: f64 = v.iter().zip(b).map(|(x, y)| x * y).sum();
            v.iter_mut().zip(b).for_each(|(x, y)| *x -= d * y);
        }
        let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        if norm > 1e-8 {
            basis.push(v.into_iter().map(|x| x / norm).collect());
        }
    }
    let short = Tensor::from_rows(&basis);
    if rows <= cols {
        short
    } else {
        short.transpose()
    }
}

/// Latent SDE model of a multivariate time series.
#[derive(Debug, Clone)]
pub struct DynamicalModel {
    pub spec: &'static VariantSpec,
    pub config: DynamicsConfig,
    pub params: ParamStore,
    pub flow: Flow,
    /// Output GP, absent for the identity map.
    pub g: Option<SvgpLayer>,
    /// Mixing matrix `A`, η×D.
    pub a: ParamId,
    /// `Λ` before the softplus, 1×η.
    pub lambda_obs_raw: ParamId,
    /// Learned initial state per training window (output GP only).
    pub initial_states: Option<ParamId>,
    obs_dim: usize,
}

/// Per-time forecast statistics and simulated trajectories.
#[derive(Debug, Clone, PartialEq)]
pub struct Forecast {
    /// Hours after the end of the context.
    pub hours: Vec<f64>,
    /// Mean over simulations of the held-out log-likelihood.
    pub mean_loglik: Vec<f64>,
    /// Standard error of that mean (zero for a single simulation).
    pub std_error: Vec<f64>,
    /// Log-likelihood under the equally weighted mixture of simulations.
    pub mixture_loglik: Vec<f64>,
    /// Latent states per time, n_sims×D.
    pub latent: Vec<Tensor>,
    /// Simulated observations per time, n_sims×η.
    pub observed: Vec<Tensor>,
}

impl DynamicalModel {
    /// Builds a model for `train`, placing inducing inputs by k-means on the observations.
    pub fn new(cfg: &DynamicsConfig, train: &SequenceBatch, stream: &NoiseStream) -> Result<Self> {
        cfg.validate()?;
        train.validate()?;
        let spec = variant(&cfg.model.variant)?;
        if !spec.supports(Task::Dynamics) || !spec.flow {
            return Err(Error::contract(format!("variant `{}` is not a dynamical model", spec.name)));
        }
        let eta = train.dim();
        let dim = cfg.latent_dim.unwrap_or(eta);
        if cfg.output_map == OutputMap::Identity && dim != eta {
            return Err(Error::contract(format!(
                "identity output map needs latent_dim = {eta}, got {dim}"
            )));
        }
        let m = cfg.model.num_inducing.min(train.len());
        let z0 = if dim == eta {
            kmeans_inducing(&train.observations, m, stream)?
        } else {
            stream.normals(&[tag::INIT, 4], m, dim)
        };
        let mut params = ParamStore::new();
        let flow = Flow::register(&mut params, spec, &cfg.model, z0.clone(), stream)?;
        let g = match cfg.output_map {
            OutputMap::Identity => None,
            OutputMap::Gp => {
                let kernel = RbfArdKernel::register(
                    &mut params,
                    "g.kernel",
                    ParamGroup::Output,
                    dim,
                    cfg.model.output_lengthscale_init,
                    cfg.model.output_variance_init,
                );
                Some(SvgpLayer::register(
                    &mut params,
                    LayerInit {
                        prefix: "g",
                        group: ParamGroup::Output,
                        inducing_group: ParamGroup::OutputInducing,
                        num_outputs: eta,
                        fixed_prior_covariance: false,
                    },
                    kernel,
                    z0,
                )?)
            }
        };
        let a = params.add(
            "observation.mixing",
            ParamGroup::Observation,
            random_orthonormal(eta, dim, stream),
        );
        let lambda_obs_raw = params.add(
            "observation.lambda",
            ParamGroup::Observation,
            Tensor::full(1, eta, inv_softplus(cfg.model.noise_init)),
        );
        let initial_states = g.as_ref().map(|_| {
            let w = windows(train.len(), cfg.window);
            let init = Tensor::from_fn(w.len(), dim, |k, d| {
                if dim == eta {
                    train.observations.get(w[k].start, d)
                } else {
                    0.0
                }
            });
            params.add("initial.state", ParamGroup::InitialState, init)
        });
        Ok(DynamicalModel {
            spec,
            config: cfg.clone(),
            params,
            flow,
            g,
            a,
            lambda_obs_raw,
            initial_states,
            obs_dim: eta,
        })
    }

    pub fn obs_dim(&self) -> usize {
        self.obs_dim
    }

    pub fn latent_dim(&self) -> usize {
        self.flow.dim()
    }

    fn check_batch(&self, batch: &SequenceBatch) -> Result<()> {
        batch.validate()?;
        if batch.dim() != self.obs_dim {
            return Err(Error::contract(format!(
                "model observes {} series, batch has {}",
                self.obs_dim,
                batch.dim()
            )));
        }
        Ok(())
    }

    /// Latent state at the first time of `batch` (1×D).
    fn initial_state<'t>(&self, params: &Binding<'t>, batch: &SequenceBatch, window: Option<usize>) -> Result<Var<'t>> {
        match self.initial_states {
            None => {
                let tape = params.get(self.a).tape();
                Ok(tape.constant(batch.observations.slice(0..1, 0..self.obs_dim)))
            }
            Some(id) => {
                let states = params.get(id);
                let k = window.ok_or_else(|| Error::contract("a learned initial state needs a window index"))?;
                if k >= states.rows() {
                    return Err(Error::contract(format!(
                        "window {k} out of range ({} training windows)",
                        states.rows()
                    )));
                }
                states.rows_range(k..k + 1)
            }
        }
    }

    /// Per-path `log p(y | x)` at one time (S×1).
    #[allow(clippy::too_many_arguments)]
    fn observe<'t>(
        &self,
        params: &Binding<'t>,
        bound: &BoundFlow<'_, 't>,
        g_prior: Option<&InducingPrior<'t>>,
        x: Var<'t>,
        y: &[f64],
        index: usize,
        samples: &Range<usize>,
        stream: &NoiseStream,
    ) -> Result<Var<'t>> {
        let tape = x.tape();
        let width = bound.diffusion_noise_width();
        let noise = if width > 0 {
            let parts: Vec<Tensor> = samples
                .clone()
                .map(|s| stream.normals(&[tag::OBS_DIFFUSION, s as u64, index as u64], 1, width))
                .collect();
            Some(tape.constant(Tensor::concat_rows(&parts)?))
        } else {
            None
        };
        let (_, sqrt) = bound.coefficients(x, noise)?;
        let (mean, var) = match (&self.g, g_prior) {
            (Some(layer), Some(prior)) => {
                let m = layer.conditional(params, prior, x)?;
                (m.mean, Some(m.var))
            }
            _ => (x, None),
        };
        let resid = tile(tape.constant(Tensor::row(y)), samples.len())?.sub(mean)?;
        let lambda = params.get(self.lambda_obs_raw).softplus();
        obs_loglik_rows(resid, var, &sqrt, params.get(self.a), lambda)
    }

    fn advance<'t>(
        &self,
        bound: &BoundFlow<'_, 't>,
        x: Var<'t>,
        from: f64,
        to: f64,
        samples: Range<usize>,
        stream: &NoiseStream,
        step: &mut usize,
    ) -> Result<Var<'t>> {
        let dts = substeps(to - from, self.config.max_step);
        let out = rollout(x, bound, &dts, samples, stream, *step).map_err(|e| match e {
            Error::Divergence { step } => {
                Error::Numerical(format!("latent path diverged between t = {from} h and t = {to} h (step {step})"))
            }
            other => other,
        })?;
        *step += dts.len();
        Ok(out)
    }

    /// ELBO of one window; `window` indexes the learned initial state when
    /// the output map is a GP, and `scale` lifts the window's likelihood to
    /// the whole series.
    #[allow(clippy::too_many_arguments)]
    pub fn sequence_elbo<'t>(
        &self,
        params: &Binding<'t>,
        batch: &SequenceBatch,
        window: Option<usize>,
        c: f64,
        scale: f64,
        samples: usize,
        stream: &NoiseStream,
    ) -> Result<Elbo<'t>> {
        self.check_batch(batch)?;
        if samples == 0 {
            return Err(Error::contract("need at least one Monte Carlo path"));
        }
        let bound = self.flow.bind(params)?;
        let g_prior = self.g.as_ref().map(|g| g.prior(params)).transpose()?;
        let range = 0..samples;
        let mut x = tile(self.initial_state(params, batch, window)?, samples)?;
        let mut step = 0;
        let mut total: Option<Var<'t>> = None;
        for k in 0..batch.len() {
            if k > 0 {
                x = self.advance(&bound, x, batch.times[k - 1], batch.times[k], range.clone(), stream, &mut step)?;
            }
            let ll = self
                .observe(params, &bound, g_prior.as_ref(), x, batch.observations.row_slice(k), k, &range, stream)?
                .sum();
            total = Some(match total {
                Some(t) => t.add(ll)?,
                None => ll,
            });
        }
        let ell = total.expect("non-empty batch").scale(1.0 / samples as f64);
        let kl_g = match (&self.g, &g_prior) {
            (Some(g), Some(p)) => Some(g.kl_full(params, p)?),
            _ => None,
        };
        Elbo::assemble(ell, kl_g, bound.kl_f()?, bound.kl_sigma()?, c, scale)
    }

    /// Simulates `n_sims` paths from the end of `context` over an hourly grid
    /// up to `horizon` hours, scoring `truth` (if given) at each grid time.
    pub fn forecast(
        &self,
        context: &SequenceBatch,
        truth: Option<&SequenceBatch>,
        horizon: f64,
        n_sims: usize,
        stream: &NoiseStream,
    ) -> Result<Forecast> {
        if !(horizon > 0.0 && horizon.is_finite()) {
            return Err(Error::contract(format!("forecast horizon must be positive, got {horizon}")));
        }
        if n_sims == 0 {
            return Err(Error::contract("need at least one simulation"));
        }
        self.check_batch(context)?;
        if let Some(t) = truth {
            self.check_batch(t)?;
        }
        let mut hours: Vec<f64> = (1..=horizon.floor() as usize).map(|h| h as f64).collect();
        if hours.is_empty() {
            hours.push(horizon);
        }
        let t_end = *context.times.last().expect("validated");
        let targets: Option<Vec<Vec<f64>>> = truth
            .map(|t| {
                hours
                    .iter()
                    .map(|h| {
                        t.value_at(t_end + h).ok_or_else(|| {
                            Error::contract(format!("held-out series does not cover t = {} h", t_end + h))
                        })
                    })
                    .collect::<Result<Vec<_>>>()
            })
            .transpose()?;

        let tape = Tape::new();
        let params = self.params.bind_constant(&tape);
        let bound = self.flow.bind(&params)?;
        let g_prior = self.g.as_ref().map(|g| g.prior(&params)).transpose()?;
        let range = 0..n_sims;
        let roll = stream.child(tag::FORECAST);
        let mut step = 0;

        // state at the end of the context
        let mut x = match self.initial_states {
            None => context.observations.slice(context.len() - 1..context.len(), 0..self.obs_dim).tile_rows(n_sims),
            Some(id) => {
                let ws = windows(context.len(), self.config.window);
                let states = self.params.value(id);
                if ws.len() != states.rows() {
                    return Err(Error::contract(
                        "with a GP output map the context must be the training sequence",
                    ));
                }
                let last = ws.last().expect("non-empty").clone();
                let mut x = states.slice(states.rows() - 1..states.rows(), 0..self.latent_dim()).tile_rows(n_sims);
                for k in last.start + 1..context.len() {
                    let mark = tape.len();
                    x = self
                        .advance(&bound, tape.constant(x), context.times[k - 1], context.times[k], range.clone(), &roll, &mut step)?
                        .value();
                    tape.truncate(mark);
                }
                x
            }
        };

        let mut out = Forecast {
            hours: hours.clone(),
            mean_loglik: Vec::new(),
            std_error: Vec::new(),
            mixture_loglik: Vec::new(),
            latent: Vec::new(),
            observed: Vec::new(),
        };
        let mut prev = 0.0;
        for (k, &h) in hours.iter().enumerate() {
            let mark = tape.len();
            let xv = self.advance(&bound, tape.constant(x), t_end + prev, t_end + h, range.clone(), &roll, &mut step)?;
            prev = h;
            let lambda = params.get(self.lambda_obs_raw).softplus();
            // a simulated observation per path
            let obs_noise = stream.child(tag::EVAL);
            let (mean, var) = match (&self.g, &g_prior) {
                (Some(layer), Some(prior)) => {
                    let m = layer.conditional(&params, prior, xv)?;
                    (m.mean, Some(m.var))
                }
                _ => (xv, None),
            };
            let width = bound.diffusion_noise_width();
            let nj = (width > 0)
                .then(|| -> Result<Var<'_>> {
                    let parts: Vec<Tensor> = range
                        .clone()
                        .map(|s| obs_noise.normals(&[tag::OBS_DIFFUSION, s as u64, k as u64], 1, width))
                        .collect();
                    Ok(tape.constant(Tensor::concat_rows(&parts)?))
                })
                .transpose()?;
            let (_, sqrt) = bound.coefficients(xv, nj)?;
            let bw = sqrt.brownian_width(self.latent_dim());
            let mut y = mean.value();
            if bw > 0 {
                let eps = tape.constant(obs_noise.normals(&[tag::FORECAST, k as u64, 0], n_sims, bw));
                if let Some(inc) = sqrt.apply(eps)? {
                    y = y.add(&inc.value().matmul(&params.get(self.a).value().transpose())?)?;
                }
            }
            let eps = obs_noise.normals(&[tag::FORECAST, k as u64, 1], n_sims, self.obs_dim);
            let lv = lambda.value();
            let v = var.map(|v| v.value());
            y = Tensor::from_fn(n_sims, self.obs_dim, |s, j| {
                let extra = v.as_ref().map_or(0.0, |v| v.get(s, j));
                y.get(s, j) + (lv.data()[j] + extra).sqrt() * eps.get(s, j)
            });

            if let Some(targets) = &targets {
                let ll = self
                    .observe(&params, &bound, g_prior.as_ref(), xv, &targets[k], k, &range, &obs_noise)?
                    .value();
                let vals = ll.data();
                let n = vals.len() as f64;
                let mean = vals.iter().sum::<f64>() / n;
                let se = if vals.len() > 1 {
                    (vals.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0)).sqrt() / n.sqrt()
                } else {
                    0.0
                };
                out.mean_loglik.push(mean);
                out.std_error.push(se);
                out.mixture_loglik.push(crate::models::log_mean_exp(vals));
            }
            x = xv.value();
            tape.truncate(mark);
            out.latent.push(x.clone());
            out.observed.push(y);
        }
        Ok(out)
    }
}

/// Joint histogram of two observed coordinates, normalized to unit mass.
#[derive(Debug, Clone, PartialEq)]
pub struct Histogram2d {
    pub x_edges: Vec<f64>,
    pub y_edges: Vec<f64>,
    /// bins×bins, row = x bin.
    pub mass: Tensor,
    pub count: usize,
}

impl Histogram2d {
    /// Pearson χ² statistic for independence of the two coordinates, with its
    /// degrees of freedom (empty margins excluded).
    pub fn chi_square_independence(&self) -> (f64, usize) {
        let (r, c) = (self.mass.rows(), self.mass.cols());
        let n = self.count as f64;
        let rows: Vec<f64> = (0..r).map(|i| (0..c).map(|j| self.mass.get(i, j)).sum()).collect();
        let cols: Vec<f64> = (0..c).map(|j| (0..r).map(|i| self.mass.get(i, j)).sum()).collect();
        let mut stat = 0.0;
        for (i, ri) in rows.iter().enumerate() {
            for (j, cj) in cols.iter().enumerate() {
                let e = ri * cj;
                if e > 0.0 {
                    stat += n * (self.mass.get(i, j) - e).powi(2) / e;
                }
            }
        }
        let nr = rows.iter().filter(|&&v| v > 0.0).count();
        let nc = cols.iter().filter(|&&v| v > 0.0).count();
        (stat, nr.saturating_sub(1) * nc.saturating_sub(1))
    }
}

/// Empirical joint density of coordinates `i` and `j` pooled over all
/// simulations and times of `observed` (one n_sims×η matrix per time).
pub fn cross_correlation_density(observed: &[Tensor], i: usize, j: usize, bins: usize) -> Result<Histogram2d> {
    let first = observed.first().ok_or(Error::EmptyDataset)?;
    if first.rows() < 2 {
        return Err(Error::contract("need at least two simulations"));
    }
    if i >= first.cols() || j >= first.cols() || bins == 0 {
        return Err(Error::contract(format!(
            "coordinates ({i}, {j}) or bin count {bins} invalid for {} series",
            first.cols()
        )));
    }
    let pairs: Vec<(f64, f64)> = observed
        .iter()
        .flat_map(|t| (0..t.rows()).map(move |s| (t.get(s, i), t.get(s, j))))
        .collect();
    let edges = |vals: &mut dyn Iterator<Item = f64>| {
        let (lo, hi) = vals.fold((f64::INFINITY, f64::NEG_INFINITY), |(l, h), v| (l.min(v), h.max(v)));
        let (lo, hi) = if hi > lo { (lo, hi) } else { (lo - 0.5, hi + 0.5) };
        (0..=bins).map(|k| lo + (hi - lo) * k as f64 / bins as f64).collect::<Vec<_>>()
    };
    let xe = edges(&mut pairs.iter().map(|p| p.0));
    let ye = edges(&mut pairs.iter().map(|p| p.1));
    let locate = |e: &[f64], v: f64| {
        let w = (e[bins] - e[0]) / bins as f64;
        (((v - e[0]) / w).floor() as usize).min(bins - 1)
    };
    let mut mass = Tensor::zeros(bins, bins);
    let unit = 1.0 / pairs.len() as f64;
    for &(a, b) in &pairs {
        let (r, c) = (locate(&xe, a), locate(&ye, b));
        mass.set(r, c, mass.get(r, c) + unit);
    }
    Ok(Histogram2d {
        x_edges: xe,
        y_edges: ye,
        mass,
        count: pairs.len(),
    })
}
