//! Wishart-process diffusion coefficients.
//!
//! `Σ(x) = L J(x) J(x)ᵀ Lᵀ + Λ` with `L` (D×ρ) row-normalized, `J(x)` a ρ×ν
//! matrix of GP values sharing the flow kernel and inducing inputs, and an
//! optional positive diagonal `Λ`. `Σ` is never materialized: a sample is
//! returned as ν factor columns `F_v = L J_v` per point, so that
//! `Σ = Σ_v F_v F_vᵀ + Λ`.
//!
//! The J entries are laid out column-major over ν: column `v·ρ + r` of the
//! J-layer output holds `J_{r,v}`.

use rand_distr::{Distribution, StandardNormal};

use crate::error::{Error, Result};
use crate::ndcore::{inv_softplus, Tape, Tensor, Var};
use crate::params::{Binding, ParamGroup, ParamId, ParamStore};
use crate::rng::NoiseStream;
use crate::svgp::{InducingPrior, LayerInit, SvgpLayer};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct WishartConfig {
    /// ρ: columns of `L`.
    pub rank: usize,
    /// ν: degrees of freedom.
    pub dof: usize,
    /// Whether the additive diagonal `Λ` is present.
    pub white_noise: bool,
    /// Initial `Λ` entries.
    pub white_noise_init: f64,
}

impl Default for WishartConfig {
    fn default() -> Self {
        WishartConfig {
            rank: 5,
            dof: 5,
            white_noise: true,
            white_noise_init: 1e-3,
        }
    }
}

#[derive(Debug, Clone)]
pub struct WishartDiffusion {
    pub l_raw: ParamId,
    pub lambda_raw: Option<ParamId>,
    pub j_layer: SvgpLayer,
    dim: usize,
    rank: usize,
    dof: usize,
}

/// Square-root factors of one Wishart sample at `n` points.
#[derive(Clone)]
pub struct WishartFactor<'t> {
    /// ν matrices of shape n×D; row `i` of `factors[v]` is `L J_v(x_i)`.
    pub factors: Vec<Var<'t>>,
    /// `√Λ` as 1×D, when white noise is enabled.
    pub sqrt_lambda: Option<Var<'t>>,
}

impl WishartFactor<'_> {
    pub fn num_points(&self) -> usize {
        self.factors.first().map_or(0, |f| f.rows())
    }

    /// `Σ(x_i)` as a dense D×D matrix.
    pub fn sigma_at(&self, i: usize) -> Tensor {
        let d = self.factors[0].cols();
        let mut out = Tensor::zeros(d, d);
        for f in &self.factors {
            let v = f.value();
            let row = v.row_slice(i);
            for a in 0..d {
                for b in 0..d {
                    out.set(a, b, out.get(a, b) + row[a] * row[b]);
                }
            }
        }
        if let Some(s) = self.sqrt_lambda {
            let s = s.value();
            for a in 0..d {
                out.set(a, a, out.get(a, a) + s.data()[a].powi(2));
            }
        }
        out
    }
}

/// Divides each row of `l` by its Euclidean norm.
pub fn row_normalize(l: Var<'_>) -> Result<Var<'_>> {
    let v = l.value();
    for r in 0..v.rows() {
        let norm = v.row_slice(r).iter().map(|x| x * x).sum::<f64>().sqrt();
        if norm < 1e-12 || !norm.is_finite() {
            return Err(Error::contract(format!(
                "cannot normalize row {r} of the Wishart scale (norm {norm:e})"
            )));
        }
    }
    l.div(l.square().sum_cols().sqrt())
}

impl WishartDiffusion {
    /// Registers `L`, `Λ` and the J-layer on the inducing inputs and kernel of `flow`.
    pub fn register(
        store: &mut ParamStore,
        prefix: &str,
        flow: &SvgpLayer,
        cfg: &WishartConfig,
        stream: &NoiseStream,
    ) -> Result<Self> {
        if cfg.rank == 0 || cfg.dof == 0 {
            return Err(Error::contract("Wishart rank and degrees of freedom must be positive"));
        }
        let dim = flow.input_dim();
        let mut rng = stream.rng(&[crate::rng::tag::INIT, 1]);
        let l0 = loop {
            let l = Tensor::from_fn(dim, cfg.rank, |_, _| StandardNormal.sample(&mut rng));
            if (0..dim).all(|r| l.row_slice(r).iter().any(|&x| x != 0.0)) {
                break l;
            }
        };
        let l0 = {
            let tape = Tape::new();
            row_normalize(tape.constant(l0))?.value()
        };
        let l_raw = store.add(format!("{prefix}.scale"), ParamGroup::Diffusion, l0);
        let lambda_raw = cfg.white_noise.then(|| {
            store.add(
                format!("{prefix}.white_noise"),
                ParamGroup::WhiteNoise,
                Tensor::full(1, dim, inv_softplus(cfg.white_noise_init)),
            )
        });
        let j_layer = SvgpLayer::register_shared(
            store,
            LayerInit {
                prefix: &format!("{prefix}.j"),
                group: ParamGroup::Diffusion,
                inducing_group: ParamGroup::FlowInducing,
                num_outputs: cfg.rank * cfg.dof,
                fixed_prior_covariance: false,
            },
            flow,
        )?;
        Ok(WishartDiffusion {
            l_raw,
            lambda_raw,
            j_layer,
            dim,
            rank: cfg.rank,
            dof: cfg.dof,
        })
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn rank(&self) -> usize {
        self.rank
    }

    pub fn dof(&self) -> usize {
        self.dof
    }

    pub fn white_noise(&self) -> bool {
        self.lambda_raw.is_some()
    }

    /// Columns of standard normal noise consumed per point to draw J.
    pub fn noise_width(&self) -> usize {
        self.rank * self.dof
    }

    /// Row-normalized `L`.
    pub fn scale<'t>(&self, params: &Binding<'t>) -> Result<Var<'t>> {
        row_normalize(params.get(self.l_raw))
    }

    /// `Λ` as 1×D.
    pub fn lambda<'t>(&self, params: &Binding<'t>) -> Option<Var<'t>> {
        self.lambda_raw.map(|id| params.get(id).softplus())
    }

    /// Draws `√Σ` at the rows of `x` from `noise` (n×ρν standard normals).
    pub fn sample_sqrt_sigma<'t>(
        &self,
        params: &Binding<'t>,
        prior: &InducingPrior<'t>,
        x: Var<'t>,
        noise: Var<'t>,
    ) -> Result<WishartFactor<'t>> {
        if noise.shape() != [x.rows(), self.noise_width()] {
            return Err(Error::Dimension {
                op: "sample_sqrt_sigma",
                lhs: [x.rows(), self.noise_width()],
                rhs: noise.shape(),
            });
        }
        let j = self.j_layer.conditional(params, prior, x)?.sample(noise)?;
        let lt = self.scale(params)?.t();
        let factors = (0..self.dof)
            .map(|v| j.cols_range(v * self.rank..(v + 1) * self.rank)?.matmul(lt))
            .collect::<Result<Vec<_>>>()?;
        Ok(WishartFactor {
            factors,
            sqrt_lambda: self.lambda(params).map(|l| l.sqrt()),
        })
    }

    /// `KL(q(u_Σ) ‖ p(u_Σ))` summed over the ρ·ν J-processes.
    pub fn kl<'t>(&self, params: &Binding<'t>, prior: &InducingPrior<'t>) -> Result<Var<'t>> {
        self.j_layer.kl_full(params, prior)
    }

    /// `draws` samples of `R Σ(x) Rᵀ` at a single point `x` (1×D).
    pub fn rank_projection_check(
        &self,
        store: &ParamStore,
        x: &Tensor,
        r: &Tensor,
        draws: usize,
        stream: &NoiseStream,
    ) -> Result<Vec<Tensor>> {
        if x.shape() != [1, self.dim] || r.cols() != self.dim {
            return Err(Error::contract("projection check needs a 1×D point and an r×D matrix"));
        }
        let tape = Tape::new();
        let b = store.bind_constant(&tape);
        let prior = self.j_layer.prior(&b)?;
        let xs = tape.constant(x.tile_rows(draws));
        let noise = tape.constant(stream.normals(&[crate::rng::tag::EVAL], draws, self.noise_width()));
        let f = self.sample_sqrt_sigma(&b, &prior, xs, noise)?;
        Ok((0..draws)
            .map(|i| {
                let s = f.sigma_at(i);
                r.matmul(&s).and_then(|rs| rs.matmul(&r.transpose())).expect("shapes checked")
            })
            .collect())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::kernels::RbfArdKernel;
    use crate::ndcore::{finite_difference, max_relative_error, Jitter};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn flow(store: &mut ParamStore, d: usize, m: usize, variance: f64) -> SvgpLayer {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let kernel = RbfArdKernel::register(store, "flow.kernel", ParamGroup::FlowKernel, d, 1.0, variance);
        SvgpLayer::register(
            store,
            LayerInit {
                prefix: "flow",
                group: ParamGroup::Flow,
                inducing_group: ParamGroup::FlowInducing,
                num_outputs: d,
                fixed_prior_covariance: true,
            },
            kernel,
            Tensor::from_fn(m, d, |_, _| rng.random_range(-2.0..2.0)),
        )
        .unwrap()
    }

    fn setup(d: usize, rho: usize, nu: usize, white: bool, variance: f64) -> (ParamStore, WishartDiffusion) {
        let mut store = ParamStore::new();
        let f = flow(&mut store, d, 4, variance);
        let cfg = WishartConfig {
            rank: rho,
            dof: nu,
            white_noise: white,
            white_noise_init: 0.05,
        };
        let w = WishartDiffusion::register(&mut store, "wishart", &f, &cfg, &NoiseStream::new(1)).unwrap();
        (store, w)
    }

    #[test]
    fn row_normalize_cases() {
        let tape = Tape::new();
        let out = row_normalize(tape.constant(Tensor::from_rows(&[[3.0, 4.0], [0.0, 1.0]]))).unwrap();
        assert_eq!(out.value(), Tensor::from_rows(&[[0.6, 0.8], [0.0, 1.0]]));
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let l = Tensor::from_fn(7, 3, |_, _| rng.random_range(-2.0..2.0));
        let n = row_normalize(tape.constant(l)).unwrap().value();
        for r in 0..7 {
            let s: f64 = n.row_slice(r).iter().map(|x| x * x).sum();
            assert!((s - 1.0).abs() < 1e-12);
        }
        let again = row_normalize(tape.constant(n.clone())).unwrap().value();
        assert!(again.sub(&n).unwrap().max_abs() < 1e-15);
        match row_normalize(tape.constant(Tensor::from_rows(&[[1.0, 0.0], [0.0, 0.0]]))) {
            Err(Error::Contract(msg)) => assert!(msg.contains("row 1"), "{msg}"),
            other => panic!("expected contract error, got {:?}", other.map(|v| v.value())),
        }
    }

    #[test]
    fn row_normalize_gradient() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let l = Tensor::from_fn(4, 3, |_, _| rng.random_range(-2.0..2.0));
        let w = Tensor::from_fn(4, 3, |_, _| rng.random_range(-1.0..1.0));
        let f = |t: &Tensor, grad: bool| {
            let tape = Tape::new();
            let v = tape.param(t.clone());
            let loss = row_normalize(v).unwrap().mul(tape.constant(w.clone())).unwrap().sum();
            (loss.item(), grad.then(|| tape.backward(loss).unwrap().wrt(v)))
        };
        let g = f(&l, true).1.unwrap();
        let fd = finite_difference(&l, 1e-5, |t| f(t, false).0);
        assert!(max_relative_error(&g, &fd, 1e-3) < 1e-4);
    }

    #[test]
    fn initial_scale_has_unit_rows_and_prior_j() {
        let (store, w) = setup(3, 2, 2, true, 1.0);
        let l = store.value(w.l_raw);
        for r in 0..3 {
            let s: f64 = l.row_slice(r).iter().map(|x| x * x).sum();
            assert!((s - 1.0).abs() < 1e-12);
        }
        assert!(w.j_layer.kl_value(&store).unwrap().abs() < 1e-10);
        assert_eq!(w.j_layer.z, store.id("flow.z").unwrap());
        assert_eq!(w.j_layer.kernel.variance, store.id("flow.kernel.variance").unwrap());
    }

    #[test]
    fn zero_noise_and_zero_mean_give_lambda_only() {
        let (store, w) = setup(3, 2, 2, true, 1.0);
        let tape = Tape::new();
        let b = store.bind_constant(&tape);
        let prior = w.j_layer.prior(&b).unwrap();
        let x = tape.constant(Tensor::from_rows(&[[0.1, 0.2, 0.3], [1.0, -1.0, 0.0]]));
        let f = w.sample_sqrt_sigma(&b, &prior, x, tape.constant(Tensor::zeros(2, 4))).unwrap();
        assert!(f.factors.iter().all(|v| v.value().max_abs() == 0.0));
        let s = f.sigma_at(1);
        for a in 0..3 {
            for c in 0..3 {
                let expect = if a == c { 0.05 } else { 0.0 };
                assert!((s.get(a, c) - expect).abs() < 1e-15);
            }
        }
    }

    #[test]
    fn sigma_matches_ljjtlt_plus_lambda() {
        let (mut store, w) = setup(3, 2, 3, true, 1.0);
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let [r, c] = store.value(w.j_layer.mean).shape();
        let mean = Tensor::from_fn(r, c, |_, _| rng.random_range(-1.0..1.0));
        store.set(w.j_layer.mean, mean).unwrap();
        let tape = Tape::new();
        let b = store.bind_constant(&tape);
        let prior = w.j_layer.prior(&b).unwrap();
        let x = Tensor::from_rows(&[[0.3, -0.4, 0.9]]);
        let noise = NoiseStream::new(2).normals(&[0], 1, 6);
        let f = w
            .sample_sqrt_sigma(&b, &prior, tape.constant(x.clone()), tape.constant(noise.clone()))
            .unwrap();
        // rebuild J explicitly
        let mg = w.j_layer.predict(&store, &x).unwrap();
        let jflat = mg.sample(&noise).unwrap();
        let j = Tensor::from_fn(2, 3, |r, v| jflat.get(0, v * 2 + r));
        let l = store.value(w.l_raw);
        let lj = l.matmul(&j).unwrap();
        let mut sigma = lj.matmul(&lj.transpose()).unwrap();
        let lam = store.value(w.lambda_raw.unwrap()).map(crate::ndcore::softplus_scalar);
        for d in 0..3 {
            sigma.set(d, d, sigma.get(d, d) + lam.data()[d]);
        }
        assert!(f.sigma_at(0).sub(&sigma).unwrap().max_abs() < 1e-12);
    }

    fn eigen_min(s: &Tensor) -> f64 {
        nalgebra::DMatrix::from_row_slice(s.rows(), s.cols(), s.data())
            .symmetric_eigen()
            .eigenvalues
            .min()
    }

    #[test]
    fn samples_are_symmetric_psd() {
        for white in [false, true] {
            let (store, w) = setup(4, 3, 2, white, 1.0);
            let x = Tensor::from_rows(&[[0.2, 0.1, -0.3, 0.5]]);
            let draws = w
                .rank_projection_check(&store, &x, &Tensor::identity(4), 200, &NoiseStream::new(3))
                .unwrap();
            for s in draws {
                assert_eq!(s, s.transpose());
                let e = eigen_min(&s);
                if white {
                    assert!(e > 0.0, "{e}");
                } else {
                    assert!(e >= -1e-10, "{e}");
                }
            }
        }
    }

    fn prior_moments(white: bool) -> (Tensor, Tensor, Vec<Tensor>) {
        let (store, w) = setup(3, 2, 2, white, 0.7);
        // x at an inducing input: marginal J variance is σ² (up to jitter)
        let z = store.value(w.j_layer.z).slice(0..1, 0..3);
        let draws = w
            .rank_projection_check(&store, &z, &Tensor::identity(3), 20_000, &NoiseStream::new(11))
            .unwrap();
        let mut mean = Tensor::zeros(3, 3);
        for s in &draws {
            mean = mean.add(s).unwrap();
        }
        let mean = mean.scale(1.0 / draws.len() as f64);
        let l = store.value(w.l_raw);
        let kvar = w.j_layer.kernel.values(&store).variance * (1.0 + Jitter::DEFAULT.factor);
        let mut expect = l.matmul(&l.transpose()).unwrap().scale(kvar * 2.0);
        if let Some(id) = w.lambda_raw {
            let lam = store.value(id).map(crate::ndcore::softplus_scalar);
            for d in 0..3 {
                expect.set(d, d, expect.get(d, d) + lam.data()[d]);
            }
        }
        (mean, expect, draws)
    }

    #[test]
    fn prior_mean_matches_wishart_mean() {
        let (mean, expect, _) = prior_moments(true);
        // relative to the diagonal scale, which is 2σ²+Λ for unit rows
        let scale = expect.diag().iter().cloned().fold(0.0, f64::max);
        assert!(mean.sub(&expect).unwrap().max_abs() / scale < 0.05, "{mean:?} vs {expect:?}");
        for d in 0..3 {
            assert!((mean.get(d, d) / expect.get(d, d) - 1.0).abs() < 0.05);
        }
    }

    #[test]
    fn projected_moments_match_chi_square() {
        let (store, w) = setup(3, 2, 2, false, 0.7);
        let z = store.value(w.j_layer.z).slice(0..1, 0..3);
        let r = Tensor::from_rows(&[[1.0, 0.0, 0.0]]);
        let draws = w.rank_projection_check(&store, &z, &r, 20_000, &NoiseStream::new(12)).unwrap();
        let v: Vec<f64> = draws.iter().map(|s| s.item()).collect();
        let n = v.len() as f64;
        let mean = v.iter().sum::<f64>() / n;
        let var = v.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0);
        let l = store.value(w.l_raw);
        let s11 = w.j_layer.kernel.values(&store).variance
            * (1.0 + Jitter::DEFAULT.factor)
            * l.row_slice(0).iter().map(|x| x * x).sum::<f64>();
        assert!((mean / (2.0 * s11) - 1.0).abs() < 0.05, "{mean}");
        assert!((var / (2.0 * 2.0 * s11 * s11) - 1.0).abs() < 0.10, "{var}");
    }

    #[test]
    fn kl_block_equals_sum_of_independent_kls() {
        let (mut store, w) = setup(2, 2, 2, true, 1.0);
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let [r, c] = store.value(w.j_layer.mean).shape();
        let mean = Tensor::from_fn(r, c, |_, _| rng.random_range(-1.0..1.0));
        store.set(w.j_layer.mean, mean).unwrap();
        let s0 = store.value(w.j_layer.s_chol.unwrap()).clone();
        let s = Tensor::from_fn(s0.rows(), s0.cols(), |r, c| s0.get(r, c) * rng.random_range(0.5..1.5));
        store.set(w.j_layer.s_chol.unwrap(), s).unwrap();
        let block = w.j_layer.kl_value(&store).unwrap();

        let m = w.j_layer.num_inducing();
        let kern = w.j_layer.kernel.values(&store);
        let z = store.value(w.j_layer.z);
        let kzz = kern.gram(z, z).unwrap();
        let (_, f) = crate::ndcore::linalg::cholesky(&kzz, Jitter::DEFAULT).unwrap();
        let k = nalgebra::DMatrix::from_row_slice(m, m, kzz.data())
            + nalgebra::DMatrix::identity(m, m) * (f * kern.variance);
        let kinv = k.clone().try_inverse().unwrap();
        let sfull = store.value(w.j_layer.s_chol.unwrap());
        let mfull = store.value(w.j_layer.mean);
        let mut total = 0.0;
        for p in 0..4 {
            let lp = nalgebra::DMatrix::from_fn(m, m, |r, c| if c <= r { sfull.get(r, p * m + c) } else { 0.0 });
            let sp = &lp * lp.transpose();
            let mp = nalgebra::DVector::from_fn(m, |r, _| mfull.get(r, p));
            total += 0.5
                * ((&kinv * &sp).trace() + (mp.transpose() * &kinv * &mp)[0] - m as f64
                    + k.determinant().ln()
                    - sp.determinant().ln());
        }
        assert!((block - total).abs() < 1e-10, "{block} vs {total}");
    }
}
