//! Sparse variational GP layers in the unwhitened parameterization.
//!
//! A layer with `P` outputs keeps inducing inputs `Z` (M×d), variational means
//! `m` (M×P) and, unless its covariance is tied to the prior, `P` lower
//! triangular factors stored side by side as one M×(P·M) array. All outputs
//! share one univariate kernel, so a single Cholesky of `k(Z,Z)` serves every
//! output and every layer built on the same `Z` and kernel.

use rand::seq::SliceRandom;
use rand::Rng;

use crate::error::{Error, Result};
use crate::kernels::{BoundRbf, RbfArdKernel};
use crate::ndcore::{linalg, Jitter, Tape, Tensor, Var};
use crate::params::{Binding, ParamGroup, ParamId, ParamStore};
use crate::rng::NoiseStream;

/// Negative variances down to this are treated as rounding and clamped to zero.
pub const VARIANCE_TOLERANCE: f64 = 1e-12;

#[derive(Debug, Clone)]
pub struct SvgpLayer {
    pub z: ParamId,
    pub mean: ParamId,
    pub s_chol: Option<ParamId>,
    pub kernel: RbfArdKernel,
    num_inducing: usize,
    num_outputs: usize,
}

/// Per-point Gaussian marginals of a layer (values only).
#[derive(Debug, Clone, PartialEq)]
pub struct MarginalGaussian {
    pub mean: Tensor,
    pub var: Tensor,
}

/// Per-point Gaussian marginals on a tape.
#[derive(Debug, Clone, Copy)]
pub struct Marginal<'t> {
    pub mean: Var<'t>,
    pub var: Var<'t>,
}

/// `k(Z,Z)` and its Cholesky factor for one set of inducing inputs and kernel.
#[derive(Clone, Copy)]
pub struct InducingPrior<'t> {
    pub z: Var<'t>,
    pub kernel: BoundRbf<'t>,
    pub chol: Var<'t>,
}

impl<'t> InducingPrior<'t> {
    pub fn new(z: Var<'t>, kernel: BoundRbf<'t>) -> Result<Self> {
        let kzz = kernel.gram(z, z)?;
        let chol = kzz.cholesky(Jitter::DEFAULT)?;
        Ok(InducingPrior { z, kernel, chol })
    }

    pub fn num_inducing(&self) -> usize {
        self.z.rows()
    }

    /// `log det k(Z,Z)` (jittered).
    pub fn log_det(&self) -> Result<Var<'t>> {
        Ok(self.chol.diag()?.ln().sum().scale(2.0))
    }

    /// Returns `(A, α)` with `A = L⁻¹ k(Z,X)` and `α = k(Z,Z)⁻¹ k(Z,X)`, both M×n.
    pub fn projections(&self, x: Var<'t>) -> Result<(Var<'t>, Var<'t>)> {
        let kzx = self.kernel.gram(self.z, x)?;
        let a = self.chol.solve_lower(kzx)?;
        let alpha = self.chol.solve_lower_t(a)?;
        Ok((a, alpha))
    }
}

impl<'t> Marginal<'t> {
    /// Reparameterized draw `mean + sqrt(var) ⊙ noise`.
    pub fn sample(&self, noise: Var<'t>) -> Result<Var<'t>> {
        check_variance(&self.var.value())?;
        self.mean.add(self.var.safe_sqrt().mul(noise)?)
    }
}

impl MarginalGaussian {
    pub fn sample(&self, noise: &Tensor) -> Result<Tensor> {
        let tape = Tape::new();
        let m = Marginal {
            mean: tape.constant(self.mean.clone()),
            var: tape.constant(self.var.clone()),
        };
        Ok(m.sample(tape.constant(noise.clone()))?.value())
    }
}

fn check_variance(var: &Tensor) -> Result<()> {
    if let Some(v) = var.data().iter().find(|&&v| v < -VARIANCE_TOLERANCE || v.is_nan()) {
        return Err(Error::Numerical(format!("negative marginal variance {v:e}")));
    }
    Ok(())
}

/// Lower-triangular mask for `blocks` square M×M blocks laid side by side.
fn block_tril_mask(m: usize, blocks: usize) -> Tensor {
    Tensor::from_fn(m, m * blocks, |r, c| if c % m <= r { 1.0 } else { 0.0 })
}

/// P×(P·M) matrix summing consecutive groups of M rows.
fn block_sum_matrix(m: usize, blocks: usize) -> Tensor {
    Tensor::from_fn(blocks, m * blocks, |p, c| if c / m == p { 1.0 } else { 0.0 })
}

/// Specification for a new layer.
pub struct LayerInit<'a> {
    pub prefix: &'a str,
    pub group: ParamGroup,
    pub inducing_group: ParamGroup,
    pub num_outputs: usize,
    pub fixed_prior_covariance: bool,
}

impl SvgpLayer {
    /// Registers a layer with its own inducing inputs `z0`; `q(u)` starts at the prior.
    pub fn register(
        store: &mut ParamStore,
        init: LayerInit<'_>,
        kernel: RbfArdKernel,
        z0: Tensor,
    ) -> Result<Self> {
        if z0.cols() != kernel.dim() {
            return Err(Error::contract(format!(
                "inducing inputs have {} columns but kernel dimension is {}",
                z0.cols(),
                kernel.dim()
            )));
        }
        let z = store.add(format!("{}.z", init.prefix), init.inducing_group, z0);
        Self::register_on(store, init, kernel, z)
    }

    /// Registers a layer reusing the inducing inputs and kernel of `base`.
    pub fn register_shared(store: &mut ParamStore, init: LayerInit<'_>, base: &SvgpLayer) -> Result<Self> {
        Self::register_on(store, init, base.kernel, base.z)
    }

    fn register_on(
        store: &mut ParamStore,
        init: LayerInit<'_>,
        kernel: RbfArdKernel,
        z: ParamId,
    ) -> Result<Self> {
        let zv = store.value(z).clone();
        let m = zv.rows();
        let p = init.num_outputs;
        let mean = store.add(format!("{}.q_mu", init.prefix), init.group, Tensor::zeros(m, p));
        let s_chol = if init.fixed_prior_covariance {
            None
        } else {
            let kzz = kernel.values(store).gram(&zv, &zv)?;
            let (l, _) = linalg::cholesky(&kzz, Jitter::DEFAULT)?;
            let blocks = vec![l; p];
            Some(store.add(
                format!("{}.q_sqrt", init.prefix),
                init.group,
                Tensor::concat_cols(&blocks)?,
            ))
        };
        Ok(SvgpLayer {
            z,
            mean,
            s_chol,
            kernel,
            num_inducing: m,
            num_outputs: p,
        })
    }

    pub fn num_inducing(&self) -> usize {
        self.num_inducing
    }

    pub fn num_outputs(&self) -> usize {
        self.num_outputs
    }

    pub fn input_dim(&self) -> usize {
        self.kernel.dim()
    }

    pub fn fixed_prior_covariance(&self) -> bool {
        self.s_chol.is_none()
    }

    pub fn prior<'t>(&self, params: &Binding<'t>) -> Result<InducingPrior<'t>> {
        InducingPrior::new(params.get(self.z), self.kernel.bind(params))
    }

    /// Masked variational factors, M×(P·M).
    fn factors<'t>(&self, params: &Binding<'t>) -> Result<Option<Var<'t>>> {
        match self.s_chol {
            None => Ok(None),
            Some(id) => {
                let raw = params.get(id);
                let tape = raw.tape();
                let mask = tape.constant(block_tril_mask(self.num_inducing, self.num_outputs));
                Ok(Some(raw.mul(mask)?))
            }
        }
    }

    /// Marginals of `q(f(x))` at the rows of `x`.
    pub fn conditional<'t>(
        &self,
        params: &Binding<'t>,
        prior: &InducingPrior<'t>,
        x: Var<'t>,
    ) -> Result<Marginal<'t>> {
        if x.cols() != self.input_dim() {
            return Err(Error::contract(format!(
                "layer input dimension is {} but got {} columns",
                self.input_dim(),
                x.cols()
            )));
        }
        let n = x.rows();
        let (p, m) = (self.num_outputs, self.num_inducing);
        let (a, alpha) = prior.projections(x)?;
        let mean = alpha.t().matmul(params.get(self.mean))?;
        let kxx = prior.kernel.variance();
        let var = match self.factors(params)? {
            // S = k(Z,Z): the correction terms cancel exactly
            None => kxx.broadcast(n, p)?,
            Some(s) => {
                let tape = x.tape();
                let reduced = a.square().sum_rows(); // 1×n
                let proj = s.t().matmul(alpha)?.square(); // (P·M)×n
                let per_output = tape
                    .constant(block_sum_matrix(m, p))
                    .matmul(proj)?
                    .t(); // n×P
                per_output.sub(reduced.t())?.add(kxx)?
            }
        };
        Ok(Marginal { mean, var })
    }

    /// `Σ_p KL(N(m_p, S_p) ‖ N(0, K))`.
    pub fn kl_full<'t>(&self, params: &Binding<'t>, prior: &InducingPrior<'t>) -> Result<Var<'t>> {
        let s = self.factors(params)?.ok_or_else(|| {
            Error::contract("kl_full on a layer whose covariance is tied to the prior")
        })?;
        let (p, m) = (self.num_outputs, self.num_inducing);
        let trace = prior.chol.solve_lower(s)?.square().sum();
        let quad = prior.chol.solve_lower(params.get(self.mean))?.square().sum();
        let logdet_k = prior.log_det()?.scale(p as f64);
        let mut diags = Vec::with_capacity(p);
        for b in 0..p {
            diags.push(s.cols_range(b * m..(b + 1) * m)?.diag()?);
        }
        let logdet_s = Var::concat_rows(&diags)?.square().ln().sum();
        Ok(trace
            .add(quad)?
            .add(logdet_k)?
            .sub(logdet_s)?
            .add_scalar(-((p * m) as f64))
            .scale(0.5))
    }

    /// `½ Σ_p m_pᵀ K⁻¹ m_p`, the KL when `S = K`.
    pub fn kl_fixed_cov<'t>(&self, params: &Binding<'t>, prior: &InducingPrior<'t>) -> Result<Var<'t>> {
        if self.s_chol.is_some() {
            return Err(Error::contract(
                "kl_fixed_cov on a layer with a free variational covariance",
            ));
        }
        Ok(prior
            .chol
            .solve_lower(params.get(self.mean))?
            .square()
            .sum()
            .scale(0.5))
    }

    /// Whichever KL applies to this layer.
    pub fn kl<'t>(&self, params: &Binding<'t>, prior: &InducingPrior<'t>) -> Result<Var<'t>> {
        if self.fixed_prior_covariance() {
            self.kl_fixed_cov(params, prior)
        } else {
            self.kl_full(params, prior)
        }
    }

    /// Value-level marginals at `x`.
    pub fn predict(&self, store: &ParamStore, x: &Tensor) -> Result<MarginalGaussian> {
        let tape = Tape::new();
        let b = store.bind_constant(&tape);
        let prior = self.prior(&b)?;
        let mg = self.conditional(&b, &prior, tape.constant(x.clone()))?;
        Ok(MarginalGaussian {
            mean: mg.mean.value(),
            var: mg.var.value(),
        })
    }

    /// Value-level KL of this layer.
    pub fn kl_value(&self, store: &ParamStore) -> Result<f64> {
        let tape = Tape::new();
        let b = store.bind_constant(&tape);
        let prior = self.prior(&b)?;
        Ok(self.kl(&b, &prior)?.item())
    }
}

/// k-means centroids of (a subsample of) `x`, used to place inducing inputs.
pub fn kmeans_inducing(x: &Tensor, m: usize, stream: &NoiseStream) -> Result<Tensor> {
    let n = x.rows();
    if m == 0 || n == 0 {
        return Err(Error::contract("k-means needs at least one point and one centroid"));
    }
    if m >= n {
        return Ok(x.clone());
    }
    let mut rng = stream.rng(&[crate::rng::tag::INIT, m as u64]);
    let mut idx: Vec<usize> = (0..n).collect();
    idx.shuffle(&mut rng);
    idx.truncate(2000.max(m));
    let pts = x.select_rows(&idx);
    let (n, d) = (pts.rows(), pts.cols());
    let dist2 = |a: &[f64], b: &[f64]| a.iter().zip(b).map(|(u, v)| (u - v).powi(2)).sum::<f64>();

    // k-means++ seeding
    let mut centers = vec![pts.row_slice(0).to_vec()];
    let mut best: Vec<f64> = (0..n).map(|i| dist2(pts.row_slice(i), &centers[0])).collect();
    while centers.len() < m {
        let total: f64 = best.iter().sum();
        let pick = if total > 0.0 {
            let mut u = rng.random::<f64>() * total;
            let mut chosen = n - 1;
            for (i, &b) in best.iter().enumerate() {
                if u < b {
                    chosen = i;
                    break;
                }
                u -= b;
            }
            chosen
        } else {
            centers.len()
        };
        let c = pts.row_slice(pick).to_vec();
        for (i, b) in best.iter_mut().enumerate() {
            *b = b.min(dist2(pts.row_slice(i), &c));
        }
        centers.push(c);
    }

    let mut assign = vec![usize::MAX; n];
    for _ in 0..50 {
        let mut changed = false;
        for i in 0..n {
            let p = pts.row_slice(i);
            let (k, _) = centers
                .iter()
                .enumerate()
                .map(|(k, c)| (k, dist2(p, c)))
                .fold((0, f64::INFINITY), |acc, x| if x.1 < acc.1 { x } else { acc });
            if assign[i] != k {
                assign[i] = k;
                changed = true;
            }
        }
        let mut sums = vec![vec![0.0; d]; m];
        let mut counts = vec![0usize; m];
        for i in 0..n {
            counts[assign[i]] += 1;
            for (s, v) in sums[assign[i]].iter_mut().zip(pts.row_slice(i)) {
                *s += v;
            }
        }
        for k in 0..m {
            if counts[k] > 0 {
                centers[k] = sums[k].iter().map(|s| s / counts[k] as f64).collect();
            }
        }
        if !changed {
            break;
        }
    }
    Ok(Tensor::from_rows(&centers))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ndcore::{finite_difference, max_relative_error};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn random(seed: u64, r: usize, c: usize, scale: f64) -> Tensor {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Tensor::from_fn(r, c, |_, _| rng.random_range(-scale..scale))
    }

    fn layer(
        store: &mut ParamStore,
        m: usize,
        d: usize,
        p: usize,
        fixed: bool,
        seed: u64,
    ) -> SvgpLayer {
        let kernel = RbfArdKernel::register(store, "k", ParamGroup::Output, d, 0.9, 1.3);
        SvgpLayer::register(
            store,
            LayerInit {
                prefix: "g",
                group: ParamGroup::Output,
                inducing_group: ParamGroup::OutputInducing,
                num_outputs: p,
                fixed_prior_covariance: fixed,
            },
            kernel,
            random(seed, m, d, 2.0),
        )
        .unwrap()
    }

    fn randomize(store: &mut ParamStore, l: &SvgpLayer, seed: u64) {
        let [m, p] = store.value(l.mean).shape();
        store.set(l.mean, random(seed, m, p, 1.0)).unwrap();
        if let Some(s) = l.s_chol {
            let cur = store.value(s).clone();
            let noise = random(seed + 1, cur.rows(), cur.cols(), 0.3);
            store.set(s, cur.add(&noise).unwrap()).unwrap();
        }
    }

    #[test]
    fn marginals_at_inducing_inputs_are_q_u() {
        let mut store = ParamStore::new();
        let l = layer(&mut store, 5, 2, 3, false, 1);
        randomize(&mut store, &l, 2);
        let z = store.value(l.z).clone();
        let mg = l.predict(&store, &z).unwrap();
        let err = mg.mean.sub(store.value(l.mean)).unwrap().max_abs();
        assert!(err < 1e-4, "{err}");
        let s = store.value(l.s_chol.unwrap()).clone();
        for p in 0..3 {
            let blk = s.slice(0..5, p * 5..(p + 1) * 5);
            let blk = Tensor::from_fn(5, 5, |r, c| if c <= r { blk.get(r, c) } else { 0.0 });
            let sp = blk.matmul(&blk.transpose()).unwrap();
            for i in 0..5 {
                assert!((mg.var.get(i, p) - sp.get(i, i)).abs() < 1e-4);
            }
        }
    }

    #[test]
    fn prior_state_recovers_prior() {
        let mut store = ParamStore::new();
        let l = layer(&mut store, 4, 2, 2, false, 3);
        let x = random(4, 7, 2, 3.0);
        let mg = l.predict(&store, &x).unwrap();
        assert!(mg.mean.max_abs() == 0.0);
        assert!(mg.var.data().iter().all(|v| (v - 1.3).abs() < 1e-8));
        assert!(l.kl_value(&store).unwrap().abs() < 1e-10);
    }

    #[test]
    fn single_inducing_point_closed_form() {
        let mut store = ParamStore::new();
        let l = layer(&mut store, 1, 1, 1, false, 5);
        store.set(l.mean, Tensor::scalar(0.7)).unwrap();
        store.set(l.s_chol.unwrap(), Tensor::scalar(0.4)).unwrap();
        let z = store.value(l.z).get(0, 0);
        let x = 0.35;
        let k = l.kernel.values(&store);
        let kzz = k.variance * (1.0 + 1e-6);
        let kxz = k.eval(&[x], &[z]).unwrap();
        let a = kxz / kzz;
        let mean = a * 0.7;
        let var = k.variance - a * kxz + a * 0.16 * a;
        let mg = l.predict(&store, &Tensor::scalar(x)).unwrap();
        assert!((mg.mean.item() - mean).abs() < 1e-12);
        assert!((mg.var.item() - var).abs() < 1e-12);
    }

    #[test]
    fn kl_full_scalar_case() {
        // M=1, K=1, S=2, m=0 → ½(2 − 1 + 0 − ln 2)
        let mut store = ParamStore::new();
        let kernel = RbfArdKernel::register(&mut store, "k", ParamGroup::Output, 1, 1.0, 1.0);
        let l = SvgpLayer::register(
            &mut store,
            LayerInit {
                prefix: "g",
                group: ParamGroup::Output,
                inducing_group: ParamGroup::OutputInducing,
                num_outputs: 1,
                fixed_prior_covariance: false,
            },
            kernel,
            Tensor::scalar(0.0),
        )
        .unwrap();
        store.set(l.s_chol.unwrap(), Tensor::scalar(2f64.sqrt())).unwrap();
        let tape = Tape::new();
        let b = store.bind_constant(&tape);
        let z = b.get(l.z);
        let kern = l.kernel.bind(&b);
        let kzz = kern.gram(z, z).unwrap();
        let prior = InducingPrior {
            z,
            kernel: kern,
            chol: kzz.cholesky(Jitter::EXACT).unwrap(),
        };
        let kl = l.kl_full(&b, &prior).unwrap().item();
        let expect = 0.5 * (2.0 - 1.0 - 2f64.ln());
        assert!((kl - expect).abs() < 1e-10, "{kl}");
        assert!((kl - 0.15343).abs() < 1e-5);
    }

    #[test]
    fn kl_fixed_cov_cases() {
        let mut store = ParamStore::new();
        let l = layer(&mut store, 4, 2, 2, true, 6);
        assert_eq!(l.kl_value(&store).unwrap(), 0.0);
        randomize(&mut store, &l, 7);
        let fixed = l.kl_value(&store).unwrap();

        // same means with S numerically equal to the jittered K
        let mut full_store = ParamStore::new();
        let lf = layer(&mut full_store, 4, 2, 2, false, 6);
        full_store.set(lf.mean, store.value(l.mean).clone()).unwrap();
        let full = lf.kl_value(&full_store).unwrap();
        assert!((fixed - full).abs() < 1e-8, "{fixed} vs {full}");
        assert!(l.kl_full(&store.bind_constant(&Tape::new()), &{
            let tape = Box::leak(Box::new(Tape::new()));
            let b = store.bind_constant(tape);
            l.prior(&b).unwrap()
        })
        .is_err());
    }

    #[test]
    fn kl_unit_quadratic_form() {
        // K = I (far-apart inducing inputs, tiny lengthscale), m = e₁ → 0.5
        let mut store = ParamStore::new();
        let kernel = RbfArdKernel::register(&mut store, "k", ParamGroup::Output, 1, 1e-3, 1.0);
        let l = SvgpLayer::register(
            &mut store,
            LayerInit {
                prefix: "f",
                group: ParamGroup::Flow,
                inducing_group: ParamGroup::FlowInducing,
                num_outputs: 1,
                fixed_prior_covariance: true,
            },
            kernel,
            Tensor::column(&[0.0, 10.0]),
        )
        .unwrap();
        store.set(l.mean, Tensor::column(&[1.0, 0.0])).unwrap();
        assert!((l.kl_value(&store).unwrap() - 0.5).abs() < 1e-6);
    }

    #[test]
    fn kl_is_nonnegative_and_zero_only_at_prior() {
        let mut store = ParamStore::new();
        let l = layer(&mut store, 5, 3, 2, false, 8);
        assert!(l.kl_value(&store).unwrap().abs() <= 1e-10);
        for seed in 0..20 {
            let mut s = store.clone();
            randomize(&mut s, &l, 100 + seed);
            assert!(l.kl_value(&s).unwrap() >= 0.0);
        }
        let mut s = store.clone();
        s.value_mut(l.mean).data_mut()[0] = 1e-2;
        assert!(l.kl_value(&s).unwrap() > 1e-10);
    }

    #[test]
    fn fixed_covariance_variance_is_prior_variance() {
        let mut store = ParamStore::new();
        let l = layer(&mut store, 4, 2, 3, true, 9);
        randomize(&mut store, &l, 10);
        let mg = l.predict(&store, &random(11, 6, 2, 2.0)).unwrap();
        assert_eq!(mg.var.shape(), [6, 3]);
        assert!(mg.var.data().iter().all(|v| (v - 1.3).abs() < 1e-12));
    }

    #[test]
    fn variance_is_bounded_by_triangle_bound() {
        let mut store = ParamStore::new();
        let l = layer(&mut store, 5, 2, 2, false, 12);
        randomize(&mut store, &l, 13);
        let x = random(14, 9, 2, 2.5);
        let mg = l.predict(&store, &x).unwrap();
        // σ² + αᵀ S α computed densely
        let k = l.kernel.values(&store);
        let z = store.value(l.z).clone();
        let kzz = k.gram(&z, &z).unwrap();
        let (lk, _) = linalg::cholesky(&kzz, Jitter::DEFAULT).unwrap();
        let alpha = linalg::solve_lower_transposed(&lk, &linalg::solve_lower(&lk, &k.gram(&z, &x).unwrap()).unwrap()).unwrap();
        let s = store.value(l.s_chol.unwrap()).clone();
        for p in 0..2 {
            let blk = s.slice(0..5, p * 5..(p + 1) * 5);
            let blk = Tensor::from_fn(5, 5, |r, c| if c <= r { blk.get(r, c) } else { 0.0 });
            let sa = blk.transpose().matmul(&alpha).unwrap();
            for i in 0..9 {
                let bound: f64 = k.variance + (0..5).map(|r| sa.get(r, i).powi(2)).sum::<f64>();
                assert!(mg.var.get(i, p) <= bound + 1e-12);
                assert!(mg.var.get(i, p) >= -1e-12);
            }
        }
    }

    #[test]
    fn kronecker_block_algebra_agrees() {
        // materialize k ⊗ I_D on 3 points / 2 outputs and compare q(f) moments
        let mut store = ParamStore::new();
        let l = layer(&mut store, 3, 2, 2, false, 15);
        randomize(&mut store, &l, 16);
        let x = random(17, 3, 2, 2.0);
        let mg = l.predict(&store, &x).unwrap();

        let k = l.kernel.values(&store);
        let z = store.value(l.z).clone();
        let kzz = k.gram(&z, &z).unwrap();
        let (_, f) = linalg::cholesky(&kzz, Jitter::DEFAULT).unwrap();
        let kzz = kzz.add(&Tensor::identity(3).scale(f * k.variance)).unwrap();
        let kxz = k.gram(&x, &z).unwrap();
        let kron = |a: &Tensor| nalgebra::DMatrix::from_fn(a.rows() * 2, a.cols() * 2, |r, c| {
            if r % 2 == c % 2 { a.get(r / 2, c / 2) } else { 0.0 }
        });
        let (kzz_d, kxz_d) = (kron(&kzz), kron(&kxz));
        let alpha_t = &kxz_d * kzz_d.clone().try_inverse().unwrap(); // (3·2)×(3·2)
        let m = store.value(l.mean);
        let vec_m = nalgebra::DVector::from_fn(6, |i, _| m.get(i / 2, i % 2));
        let mean = &alpha_t * vec_m;
        let s = store.value(l.s_chol.unwrap()).clone();
        let mut s_big = nalgebra::DMatrix::zeros(6, 6);
        for p in 0..2 {
            let blk = s.slice(0..3, p * 3..(p + 1) * 3);
            let blk = Tensor::from_fn(3, 3, |r, c| if c <= r { blk.get(r, c) } else { 0.0 });
            let sp = blk.matmul(&blk.transpose()).unwrap();
            for r in 0..3 {
                for c in 0..3 {
                    s_big[(r * 2 + p, c * 2 + p)] = sp.get(r, c);
                }
            }
        }
        let cov = kron(&k.gram(&x, &x).unwrap()) + &alpha_t * (s_big - kzz_d) * alpha_t.transpose();
        for i in 0..3 {
            for p in 0..2 {
                assert!((mean[i * 2 + p] - mg.mean.get(i, p)).abs() < 1e-10);
                assert!((cov[(i * 2 + p, i * 2 + p)] - mg.var.get(i, p)).abs() < 1e-10);
            }
        }
    }

    #[test]
    fn kl_gradients_match_finite_differences() {
        for fixed in [false, true] {
            let mut store = ParamStore::new();
            let l = layer(&mut store, 4, 2, 2, fixed, 20);
            randomize(&mut store, &l, 21);
            let loss = |s: &ParamStore| l.kl_value(s).unwrap();
            let tape = Tape::new();
            let b = store.bind(&tape, |_| true);
            let prior = l.prior(&b).unwrap();
            let kl = l.kl(&b, &prior).unwrap();
            let grads = b.gradients(&tape.backward(kl).unwrap());
            for id in store.ids() {
                let fd = finite_difference(store.value(id), 1e-5, |t| {
                    let mut s = store.clone();
                    s.set(id, t.clone()).unwrap();
                    loss(&s)
                });
                let err = max_relative_error(&grads[id.index()], &fd, 1e-3);
                assert!(err < 1e-4, "{} fixed={fixed}: {err}", store.name(id));
            }
        }
    }

    #[test]
    fn conditional_gradients_match_finite_differences() {
        let mut store = ParamStore::new();
        let l = layer(&mut store, 3, 2, 2, false, 30);
        randomize(&mut store, &l, 31);
        let x = random(32, 4, 2, 2.0);
        let proj = random(33, 4, 4, 1.0);
        let eval = |s: &ParamStore, grad: bool| {
            let tape = Tape::new();
            let b = s.bind(&tape, |_| true);
            let prior = l.prior(&b).unwrap();
            let mg = l.conditional(&b, &prior, tape.constant(x.clone())).unwrap();
            let out = Var::concat_cols(&[mg.mean, mg.var]).unwrap();
            let loss = out.mul(tape.constant(proj.clone())).unwrap().sum();
            (loss.item(), grad.then(|| b.gradients(&tape.backward(loss).unwrap())))
        };
        let grads = eval(&store, true).1.unwrap();
        for id in store.ids() {
            let fd = finite_difference(store.value(id), 1e-5, |t| {
                let mut s = store.clone();
                s.set(id, t.clone()).unwrap();
                eval(&s, false).0
            });
            let err = max_relative_error(&grads[id.index()], &fd, 1e-3);
            assert!(err < 1e-4, "{}: {err}", store.name(id));
        }
    }

    #[test]
    fn sampling_cases() {
        let mg = MarginalGaussian {
            mean: Tensor::from_rows(&[[1.0, -2.0]]),
            var: Tensor::from_rows(&[[0.5, 2.0]]),
        };
        assert_eq!(mg.sample(&Tensor::zeros(1, 2)).unwrap(), mg.mean);
        let clamp = MarginalGaussian {
            mean: Tensor::scalar(0.0),
            var: Tensor::scalar(-1e-13),
        };
        assert_eq!(clamp.sample(&Tensor::scalar(1.0)).unwrap().item(), 0.0);
        let bad = MarginalGaussian {
            mean: Tensor::scalar(0.0),
            var: Tensor::scalar(-1e-6),
        };
        assert!(matches!(bad.sample(&Tensor::scalar(1.0)), Err(Error::Numerical(_))));
    }

    #[test]
    fn sample_moments_match_marginal() {
        let n = 100_000;
        let mg = MarginalGaussian {
            mean: Tensor::full(n, 1, 0.8),
            var: Tensor::full(n, 1, 2.5),
        };
        let noise = NoiseStream::new(3).normals(&[0], n, 1);
        let s = mg.sample(&noise).unwrap();
        let mean = s.mean();
        let var = s.data().iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1) as f64;
        let se = (2.5f64 / n as f64).sqrt();
        assert!((mean - 0.8).abs() < 4.0 * se, "{mean}");
        assert!((var - 2.5).abs() / 2.5 < 0.05, "{var}");
    }

    #[test]
    fn kmeans_returns_distinct_centroids() {
        let x = random(40, 300, 2, 3.0);
        let c = kmeans_inducing(&x, 10, &NoiseStream::new(1)).unwrap();
        assert_eq!(c.shape(), [10, 2]);
        for i in 0..10 {
            for j in 0..i {
                let d: f64 = c.row_slice(i).iter().zip(c.row_slice(j)).map(|(a, b)| (a - b).abs()).sum();
                assert!(d > 1e-6);
            }
        }
        assert_eq!(kmeans_inducing(&x.slice(0..5, 0..2), 10, &NoiseStream::new(1)).unwrap().rows(), 5);
    }
}
