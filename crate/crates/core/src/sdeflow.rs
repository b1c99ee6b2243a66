//! Euler–Maruyama integration of state-dependent random fields.
//!
//! Monte Carlo paths are stacked as rows, sample-major: with `n` inputs and
//! samples `s ∈ range`, row `(s − range.start)·n + i` is path `s` of input `i`.
//! Noise for path `s` at step `k` comes from its own substream, so any split
//! of the sample range across calls (or threads) reproduces the same paths.

use std::ops::Range;

use crate::error::{Error, Result};
use crate::ndcore::{Tape, Tensor, Var};
use crate::rng::{tag, NoiseStream};
use crate::wishart::WishartFactor;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FlowConfig {
    /// Integration horizon `T`.
    pub horizon: f64,
    pub num_steps: usize,
    /// Paths per input during training.
    pub mc_samples: usize,
    /// Paths per input for evaluation and prediction.
    pub eval_mc_samples: usize,
}

impl Default for FlowConfig {
    fn default() -> Self {
        FlowConfig {
            horizon: 1.0,
            num_steps: 20,
            mc_samples: 5,
            eval_mc_samples: 25,
        }
    }
}

impl FlowConfig {
    pub fn dt(&self) -> f64 {
        self.horizon / self.num_steps as f64
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.horizon > 0.0 && self.horizon.is_finite()) {
            return Err(Error::contract(format!("flow horizon must be positive, got {}", self.horizon)));
        }
        if self.num_steps == 0 || self.mc_samples == 0 || self.eval_mc_samples == 0 {
            return Err(Error::contract("flow steps and sample counts must be positive"));
        }
        Ok(())
    }

    pub fn steps(&self) -> Vec<f64> {
        vec![self.dt(); self.num_steps]
    }
}

/// A draw of `√Σ(x)` at every row of a state.
#[derive(Clone)]
pub enum SqrtDiffusion<'t> {
    Zero,
    /// Elementwise square roots of a diagonal `Σ`, n×D or 1×D.
    Diagonal(Var<'t>),
    Factor(WishartFactor<'t>),
}

impl<'t> SqrtDiffusion<'t> {
    /// Standard normal columns one Brownian increment needs.
    pub fn brownian_width(&self, dim: usize) -> usize {
        match self {
            SqrtDiffusion::Zero => 0,
            SqrtDiffusion::Diagonal(_) => dim,
            SqrtDiffusion::Factor(f) => f.factors.len() + f.sqrt_lambda.map_or(0, |_| dim),
        }
    }

    /// `√Σ · N` for each row; `None` when there is no diffusion.
    pub fn apply(&self, noise: Var<'t>) -> Result<Option<Var<'t>>> {
        match self {
            SqrtDiffusion::Zero => Ok(None),
            SqrtDiffusion::Diagonal(s) => Ok(Some(s.mul(noise)?)),
            SqrtDiffusion::Factor(f) => {
                let nu = f.factors.len();
                let mut acc: Option<Var<'t>> = None;
                for (v, fv) in f.factors.iter().enumerate() {
                    let term = fv.mul(noise.cols_range(v..v + 1)?)?;
                    acc = Some(match acc {
                        Some(a) => a.add(term)?,
                        None => term,
                    });
                }
                if let Some(s) = f.sqrt_lambda {
                    let d = s.cols();
                    let term = s.mul(noise.cols_range(nu..nu + d)?)?;
                    acc = Some(match acc {
                        Some(a) => a.add(term)?,
                        None => term,
                    });
                }
                Ok(acc)
            }
        }
    }
}

/// Drift and diffusion of an SDE, evaluated together at one state.
pub trait Field<'t> {
    fn dim(&self) -> usize;
    /// Standard normal columns per row needed to sample the diffusion coefficient.
    fn diffusion_noise_width(&self) -> usize;
    /// Standard normal columns per row of one Brownian increment.
    fn brownian_width(&self) -> usize;
    /// `(μ(x), √Σ(x))`; `noise` has `diffusion_noise_width` columns (absent when zero).
    fn coefficients(&self, x: Var<'t>, noise: Option<Var<'t>>) -> Result<(Var<'t>, SqrtDiffusion<'t>)>;
}

/// One Euler–Maruyama step `x + μ(x)Δ + √Δ · √Σ(x) N`.
pub fn em_step<'t, F: Field<'t> + ?Sized>(
    x: Var<'t>,
    field: &F,
    dt: f64,
    noise_j: Option<Var<'t>>,
    noise_b: Option<Var<'t>>,
    step: usize,
) -> Result<Var<'t>> {
    if !(dt > 0.0) {
        return Err(Error::contract(format!("step size must be positive, got {dt}")));
    }
    let (drift, diffusion) = field.coefficients(x, noise_j)?;
    let mut next = x.add(drift.scale(dt))?;
    if let Some(b) = noise_b {
        if let Some(inc) = diffusion.apply(b)? {
            next = next.add(inc.scale(dt.sqrt()))?;
        }
    }
    if !next.value().is_finite() {
        return Err(Error::Divergence { step });
    }
    Ok(next)
}

fn step_noise<'t>(
    tape: &'t Tape,
    stream: &NoiseStream,
    purpose: u64,
    samples: &Range<usize>,
    n: usize,
    width: usize,
    step: usize,
) -> Result<Option<Var<'t>>> {
    if width == 0 {
        return Ok(None);
    }
    let parts: Vec<Tensor> = samples
        .clone()
        .map(|s| stream.normals(&[purpose, s as u64, step as u64], n, width))
        .collect();
    Ok(Some(tape.constant(Tensor::concat_rows(&parts)?)))
}

/// Stacks `x` once per sample (sample-major).
pub fn tile<'t>(x: Var<'t>, samples: usize) -> Result<Var<'t>> {
    if samples == 1 {
        return Ok(x);
    }
    Var::concat_rows(&vec![x; samples])
}

/// Applies one step per entry of `dts` to an already tiled state.
///
/// `first_step` offsets the step counter used for noise and error reporting,
/// so a long path can be integrated in segments.
pub fn rollout<'t, F: Field<'t> + ?Sized>(
    x: Var<'t>,
    field: &F,
    dts: &[f64],
    samples: Range<usize>,
    stream: &NoiseStream,
    first_step: usize,
) -> Result<Var<'t>> {
    let count = samples.len();
    if count == 0 || x.rows() % count != 0 {
        return Err(Error::contract("state rows must be a multiple of the sample count"));
    }
    let n = x.rows() / count;
    let tape = x.tape();
    let mut x = x;
    for (k, &dt) in dts.iter().enumerate() {
        let step = first_step + k;
        let nj = step_noise(tape, stream, tag::FLOW_DIFFUSION, &samples, n, field.diffusion_noise_width(), step)?;
        let nb = step_noise(tape, stream, tag::FLOW_BROWNIAN, &samples, n, field.brownian_width(), step)?;
        x = em_step(x, field, dt, nj, nb, step)?;
    }
    Ok(x)
}

/// Terminal states at `cfg.horizon` for each sample in `samples`, stacked sample-major.
pub fn integrate<'t, F: Field<'t> + ?Sized>(
    x0: Var<'t>,
    field: &F,
    cfg: &FlowConfig,
    samples: Range<usize>,
    stream: &NoiseStream,
) -> Result<Var<'t>> {
    if !x0.value().is_finite() {
        return Err(Error::contract("initial state is not finite"));
    }
    let x = tile(x0, samples.len())?;
    rollout(x, field, &cfg.steps(), samples, stream, 0)
}

/// Gradient-free rollout: returns the state after every step.
///
/// The tape is truncated back after each step, so memory stays flat however
/// long the path; `field` must be bound to `tape` before the call.
pub fn simulate<'t, F: Field<'t> + ?Sized>(
    tape: &'t Tape,
    x: &Tensor,
    field: &F,
    dts: &[f64],
    samples: Range<usize>,
    stream: &NoiseStream,
    first_step: usize,
) -> Result<Vec<Tensor>> {
    let mark = tape.len();
    let mut cur = x.clone();
    let mut out = Vec::with_capacity(dts.len());
    for (k, &dt) in dts.iter().enumerate() {
        let next = rollout(tape.constant(cur), field, &[dt], samples.clone(), stream, first_step + k)?;
        cur = next.value();
        tape.truncate(mark);
        out.push(cur.clone());
    }
    Ok(out)
}
