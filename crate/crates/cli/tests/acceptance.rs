//! Acceptance suite: one PASS/FAIL line per criterion.
//!
//! Runs without the libtest harness so the report reads top to bottom.
//! `ACCEPTANCE_ONLY=3,7` restricts the run to the listed criteria.

use std::f64::consts::PI;
use std::fs;
use std::panic::{self, AssertUnwindSafe};
use std::time::Instant;

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use wishart_sde::data::synthetic;
use wishart_sde::dynamics::obs_loglik;
use wishart_sde::kernels::RbfArdKernel;
use wishart_sde::models::{ModelConfig, RegressionModel};
use wishart_sde::ndcore::{finite_difference, max_relative_error, Jitter, Tape, Tensor, Var};
use wishart_sde::params::{ParamGroup, ParamStore};
use wishart_sde::rng::{tag, NoiseStream};
use wishart_sde::sdeflow::{simulate, Field, FlowConfig, SqrtDiffusion};
use wishart_sde::svgp::{InducingPrior, LayerInit, SvgpLayer};
use wishart_sde::train::{anneal_coefficient, fit, CheckpointPlan, Objective, RegressionObjective, Schedule, Trainer};
use wishart_sde::wishart::{WishartConfig, WishartDiffusion};
use wsde_cli::commands::{EVAL_FILE, METRICS_FILE};
use wsde_cli::{cmd_eval, cmd_forecast, cmd_train, Overrides, RunConfig};

/// Criteria that are expected to fail; see the README for the analysis.
const KNOWN_RED: &[usize] = &[8];

type Outcome = Result<String, String>;

fn check(ok: bool, detail: String) -> Outcome {
    if ok {
        Ok(detail)
    } else {
        Err(detail)
    }
}

fn uniform(rng: &mut ChaCha8Rng, r: usize, c: usize, scale: f64) -> Tensor {
    Tensor::from_fn(r, c, |_, _| rng.random_range(-scale..scale))
}

fn model_config(variant: &str, m: usize) -> ModelConfig {
    let mut cfg = ModelConfig {
        variant: variant.into(),
        num_inducing: m,
        ..ModelConfig::default()
    };
    cfg.wishart.rank = 2;
    cfg.wishart.dof = 2;
    cfg.flow.num_steps = 5;
    cfg
}

fn perturb(store: &mut ParamStore, seed: u64, amount: f64) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let ids: Vec<_> = store.ids().collect();
    for id in ids {
        let v = store.value(id).clone();
        let noise = uniform(&mut rng, v.rows(), v.cols(), amount);
        store.set(id, v.add(&noise).unwrap()).unwrap();
    }
}

fn gradients() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let x = uniform(&mut rng, 3, 2, 2.0);
    let y = Tensor::from_fn(3, 1, |i, _| x.get(i, 0).sin());
    let mut model = RegressionModel::new(&model_config("diffwgp", 3), &x, 1, &NoiseStream::new(1)).map_err(|e| e.to_string())?;
    perturb(&mut model.params, 10, 0.2);
    let stream = NoiseStream::new(4);
    let tape = Tape::new();
    let b = model.params.bind(&tape, |_| true);
    let e = model.elbo(&b, &x, &y, 1.0, 1.0, 2, &stream).map_err(|e| e.to_string())?;
    let grads = b.gradients(&tape.backward(e.total).map_err(|e| e.to_string())?);
    let mut worst = (0.0, String::new());
    for id in model.params.ids() {
        let fd = finite_difference(model.params.value(id), 1e-5, |t| {
            let mut m = model.clone();
            m.params.set(id, t.clone()).unwrap();
            m.elbo_estimate(&x, &y, 1.0, 2, &stream).unwrap().total
        });
        let err = max_relative_error(&grads[id.index()], &fd, 1e-2);
        if err >= worst.0 {
            worst = (err, model.params.name(id).to_string());
        }
    }
    check(
        worst.0 <= 1e-3,
        format!("{} parameters, worst relative error {:.2e} (`{}`)", model.params.len(), worst.0, worst.1),
    )
}

fn svgp_layer(store: &mut ParamStore, fixed: bool, z: Tensor) -> SvgpLayer {
    let kernel = RbfArdKernel::register(store, "k", ParamGroup::Output, z.cols(), 0.9, 1.3);
    SvgpLayer::register(
        store,
        LayerInit {
            prefix: if fixed { "fixed" } else { "full" },
            group: ParamGroup::Output,
            inducing_group: ParamGroup::OutputInducing,
            num_outputs: 2,
            fixed_prior_covariance: fixed,
        },
        kernel,
        z,
    )
    .unwrap()
}

fn kl_oracles() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let z = uniform(&mut rng, 4, 2, 2.0);

    let mut store = ParamStore::new();
    let full = svgp_layer(&mut store, false, z.clone());
    let at_prior = full.kl_value(&store).map_err(|e| e.to_string())?;

    // M = 1, K = 1, S = 2, m = 0
    let mut scalar = ParamStore::new();
    let kernel = RbfArdKernel::register(&mut scalar, "k", ParamGroup::Output, 1, 1.0, 1.0);
    let l = SvgpLayer::register(
        &mut scalar,
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
    .map_err(|e| e.to_string())?;
    scalar.set(l.s_chol.unwrap(), Tensor::scalar(2f64.sqrt())).unwrap();
    let tape = Tape::new();
    let b = scalar.bind_constant(&tape);
    let kern = l.kernel.bind(&b);
    let zv = b.get(l.z);
    let kzz = kern.gram(zv, zv).map_err(|e| e.to_string())?;
    let prior = InducingPrior {
        z: zv,
        kernel: kern,
        chol: kzz.cholesky(Jitter::EXACT).map_err(|e| e.to_string())?,
    };
    let one_d = l.kl_full(&b, &prior).map_err(|e| e.to_string())?.item();
    let one_d_err = (one_d - 0.5 * (2.0 - 1.0 - 2f64.ln())).abs();

    // fixed covariance against the full form with S = K and shared means
    let mut fixed_store = ParamStore::new();
    let fixed = svgp_layer(&mut fixed_store, true, z);
    let means = uniform(&mut rng, 4, 2, 1.0);
    fixed_store.set(fixed.mean, means.clone()).unwrap();
    store.set(full.mean, means).unwrap();
    let agree = (fixed.kl_value(&fixed_store).unwrap() - full.kl_value(&store).unwrap()).abs();

    check(
        at_prior.abs() <= 1e-10 && one_d_err <= 1e-10 && agree <= 1e-8,
        format!("KL at prior {at_prior:.1e}; 1-D case {one_d:.6} (error {one_d_err:.1e}); fixed vs full {agree:.1e}"),
    )
}

fn wishart_moments() -> Outcome {
    let mut store = ParamStore::new();
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let kernel = RbfArdKernel::register(&mut store, "flow.kernel", ParamGroup::FlowKernel, 3, 1.0, 0.7);
    let flow = SvgpLayer::register(
        &mut store,
        LayerInit {
            prefix: "flow",
            group: ParamGroup::Flow,
            inducing_group: ParamGroup::FlowInducing,
            num_outputs: 3,
            fixed_prior_covariance: true,
        },
        kernel,
        uniform(&mut rng, 4, 3, 2.0),
    )
    .map_err(|e| e.to_string())?;
    let cfg = WishartConfig {
        rank: 2,
        dof: 2,
        white_noise: true,
        white_noise_init: 0.05,
    };
    let w = WishartDiffusion::register(&mut store, "wishart", &flow, &cfg, &NoiseStream::new(1)).map_err(|e| e.to_string())?;
    // at an inducing input the marginal of J is the prior variance (plus jitter)
    let x = store.value(w.j_layer.z).slice(0..1, 0..3);
    let kvar = w.j_layer.kernel.values(&store).variance * (1.0 + Jitter::DEFAULT.factor);
    let l = store.value(w.l_raw).clone();
    let lambda = store.value(w.lambda_raw.unwrap()).map(wishart_sde::ndcore::softplus_scalar);

    let draws = w
        .rank_projection_check(&store, &x, &Tensor::identity(3), 20_000, &NoiseStream::new(11))
        .map_err(|e| e.to_string())?;
    let mut mean = Tensor::zeros(3, 3);
    for s in &draws {
        mean = mean.add(s).unwrap();
    }
    let mean = mean.scale(1.0 / draws.len() as f64);
    let mut expect = l.matmul(&l.transpose()).unwrap().scale(kvar * cfg.dof as f64);
    for d in 0..3 {
        expect.set(d, d, expect.get(d, d) + lambda.data()[d]);
    }
    let scale = expect.diag().iter().cloned().fold(0.0, f64::max);
    let mean_err = mean.sub(&expect).unwrap().max_abs() / scale;

    // first row of L picks out a scaled χ²_ν
    let r = Tensor::from_rows(&[[1.0, 0.0, 0.0]]);
    let mut plain = store.clone();
    let lambda_id = w.lambda_raw.unwrap();
    plain.set(lambda_id, store.value(lambda_id).map(|_| -40.0)).unwrap();
    let proj = w
        .rank_projection_check(&plain, &x, &r, 20_000, &NoiseStream::new(12))
        .map_err(|e| e.to_string())?;
    let v: Vec<f64> = proj.iter().map(|s| s.item()).collect();
    let n = v.len() as f64;
    let pm = v.iter().sum::<f64>() / n;
    let pv = v.iter().map(|x| (x - pm).powi(2)).sum::<f64>() / (n - 1.0);
    let s11 = kvar * l.row_slice(0).iter().map(|x| x * x).sum::<f64>();
    let nu = cfg.dof as f64;
    let (em, ev) = ((pm / (nu * s11) - 1.0).abs(), (pv / (2.0 * nu * s11 * s11) - 1.0).abs());
    check(
        mean_err < 0.05 && em < 0.05 && ev < 0.10,
        format!("mean relative error {mean_err:.3}; projected mean {em:.3}, variance {ev:.3}"),
    )
}

/// dx = θ⊙x dt + s dB.
struct Linear<'t> {
    theta: Var<'t>,
    sd: Var<'t>,
}

impl<'t> Field<'t> for Linear<'t> {
    fn dim(&self) -> usize {
        self.theta.cols()
    }
    fn diffusion_noise_width(&self) -> usize {
        0
    }
    fn brownian_width(&self) -> usize {
        self.dim()
    }
    fn coefficients(&self, x: Var<'t>, _: Option<Var<'t>>) -> wishart_sde::Result<(Var<'t>, SqrtDiffusion<'t>)> {
        Ok((x.mul(self.theta)?, SqrtDiffusion::Diagonal(self.sd)))
    }
}

fn column_moments(t: &Tensor, col: usize) -> (f64, f64) {
    let v: Vec<f64> = (0..t.rows()).map(|i| t.get(i, col)).collect();
    let n = v.len() as f64;
    let m = v.iter().sum::<f64>() / n;
    (m, v.iter().map(|x| (x - m).powi(2)).sum::<f64>() / (n - 1.0))
}

fn euler_maruyama() -> Outcome {
    let paths = 100_000;
    let tape = Tape::new();
    let ou = Linear {
        theta: tape.constant(Tensor::row(&[-1.0])),
        sd: tape.constant(Tensor::row(&[1.0])),
    };
    let run = |seed| {
        simulate(&tape, &Tensor::full(paths, 1, 1.0), &ou, &[0.01; 100], 0..1, &NoiseStream::new(seed), 0)
            .map(|mut p| p.pop().unwrap())
    };
    let a = run(3).map_err(|e| e.to_string())?;
    let (mean, var) = column_moments(&a, 0);
    let se = (var / paths as f64).sqrt();
    let z = (mean - (-1.0f64).exp()).abs() / se;
    let bitwise = a == run(3).map_err(|e| e.to_string())?;

    let bm = Linear {
        theta: tape.constant(Tensor::row(&[0.0, 0.0])),
        sd: tape.constant(Tensor::row(&[1.0, 1.0])),
    };
    let cfg = FlowConfig::default();
    let end = simulate(&tape, &Tensor::zeros(paths, 2), &bm, &cfg.steps(), 0..1, &NoiseStream::new(6), 0)
        .map_err(|e| e.to_string())?
        .pop()
        .unwrap();
    let worst = (0..2)
        .map(|d| (column_moments(&end, d).1 / cfg.horizon - 1.0).abs())
        .fold(0.0, f64::max);
    check(
        z < 3.0 && worst < 0.03 && bitwise,
        format!("OU mean {mean:.5} is {z:.2} SE from e^-1; Brownian variance error {:.2}%; bitwise repeat {bitwise}", 100.0 * worst),
    )
}

/// Dense `log N(y; g, A F Fᵀ Aᵀ + diag Λ)`.
fn dense_loglik(y: &[f64], g: &[f64], f: &Tensor, a: &Tensor, lambda: &[f64]) -> f64 {
    let n = y.len();
    let af = DMatrix::from_row_slice(a.rows(), a.cols(), a.data()) * DMatrix::from_row_slice(f.rows(), f.cols(), f.data());
    let b = &af * af.transpose() + DMatrix::from_diagonal(&DVector::from_column_slice(lambda));
    let chol = b.cholesky().expect("B is positive definite");
    let r = DVector::from_iterator(n, y.iter().zip(g).map(|(y, g)| y - g));
    -0.5 * n as f64 * (2.0 * PI).ln() - 0.5 * chol.determinant().ln() - 0.5 * r.dot(&chol.solve(&r))
}

fn woodbury() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(1000);
    let (mut dense_err, mut orth_err) = (0.0f64, 0.0f64);
    for _ in 0..100 {
        let (eta, d, nu) = (rng.random_range(1..=8), rng.random_range(1..=6), rng.random_range(1..=4));
        let y = uniform(&mut rng, 1, eta, 2.0).into_vec();
        let g = uniform(&mut rng, 1, eta, 2.0).into_vec();
        let f = uniform(&mut rng, d, nu, 1.5);
        let a = uniform(&mut rng, eta, d, 1.5);
        let lambda: Vec<f64> = (0..eta).map(|_| rng.random_range(0.05..2.0)).collect();
        let v = obs_loglik(&y, &g, &f, &a, &lambda).map_err(|e| e.to_string())?;
        let e = dense_loglik(&y, &g, &f, &a, &lambda);
        dense_err = dense_err.max((v - e).abs() / e.abs().max(1.0));

        let q = DMatrix::from_fn(nu, nu, |_, _| rng.random_range(-1.0..1.0)).qr().q();
        let fq = Tensor::from_fn(d, nu, |r, c| (0..nu).map(|k| f.get(r, k) * q[(k, c)]).sum());
        let w = obs_loglik(&y, &g, &fq, &a, &lambda).map_err(|e| e.to_string())?;
        orth_err = orth_err.max((v - w).abs() / v.abs().max(1.0));
    }
    check(
        dense_err <= 1e-9 && orth_err <= 1e-9,
        format!("100 instances: dense disagreement {dense_err:.1e}, orthogonal-factor change {orth_err:.1e}"),
    )
}

/// `log N(y; 0, K + σ²I)` for the output GP of an SGP model.
fn dense_evidence(model: &RegressionModel, x: &Tensor, y: &Tensor) -> f64 {
    let k = model.g.kernel.values(&model.params).gram(x, x).unwrap();
    let n = x.rows();
    let c = DMatrix::from_fn(n, n, |i, j| k.get(i, j) + if i == j { model.noise_variance() } else { 0.0 });
    let chol = c.cholesky().unwrap();
    let yv = DVector::from_column_slice(y.data());
    -0.5 * yv.dot(&chol.solve(&yv)) - 0.5 * chol.determinant().ln() - 0.5 * n as f64 * (2.0 * PI).ln()
}

fn elbo_bound() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let x = uniform(&mut rng, 3, 1, 2.0);
    let y = Tensor::from_fn(3, 1, |i, _| x.get(i, 0).sin() + 0.1 * rng.random_range(-1.0..1.0));
    let base = RegressionModel::new(&model_config("sgp", 3), &x, 1, &NoiseStream::new(1)).map_err(|e| e.to_string())?;
    let mut min_gap = f64::INFINITY;
    for seed in 0..20 {
        let mut model = base.clone();
        perturb(&mut model.params, 100 + seed, 0.5);
        let elbo = model.elbo_estimate(&x, &y, 1.0, 1, &NoiseStream::new(0)).map_err(|e| e.to_string())?.total;
        min_gap = min_gap.min(dense_evidence(&model, &x, &y) - elbo);
    }
    check(min_gap >= -1e-8, format!("20 states, smallest evidence − ELBO gap {min_gap:.3e}"))
}

fn training_sanity() -> Outcome {
    let mut lines = Vec::new();
    let mut ok = true;
    for variant in ["sgp", "nonoise", "diffgp", "diffwgp"] {
        let mut wins = 0;
        for seed in [1u64, 2, 3] {
            let data = synthetic::sine(50, seed);
            let mut cfg = model_config(variant, 10);
            cfg.wishart.rank = 1;
            cfg.flow.mc_samples = 2;
            let mut m = RegressionModel::new(&cfg, &data.x, 1, &NoiseStream::new(seed)).map_err(|e| e.to_string())?;
            let mut obj = RegressionObjective::new(&mut m, &data).map_err(|e| e.to_string())?;
            let s = Schedule {
                phase1_iters: 100,
                total_iters: 600,
                phase1_lr: 0.02,
                phase2_lr: 0.01,
                anneal_iters: 100,
                batch_size: 50,
                log_every: 100,
                ..Schedule::default()
            };
            let eval = NoiseStream::new(seed).child(tag::EVAL);
            let mut t = Trainer::new(&obj, s, seed).map_err(|e| e.to_string())?;
            t.run(&mut obj, 100).map_err(|e| e.to_string())?;
            let before = obj.estimate(64, &eval).map_err(|e| e.to_string())?.total;
            t.run(&mut obj, 600).map_err(|e| e.to_string())?;
            let after = obj.estimate(64, &eval).map_err(|e| e.to_string())?.total;
            wins += usize::from(after > before);
            lines.push(format!("{variant}/{seed}: {before:.1}→{after:.1}"));
        }
        ok &= wins == 3;
    }
    check(ok, lines.join(", "))
}

fn median(mut v: Vec<f64>) -> f64 {
    v.sort_by(|a, b| a.partial_cmp(b).unwrap());
    v[v.len() / 2]
}

const CORRELATED_REGRESSION: &str = r#"
[data]
synthetic = "correlated_noise"
n = 400
test_fraction = 0.25
[model]
num_inducing = 20
rank = 3
dof = 3
num_steps = 5
mc_samples = 3
eval_mc_samples = 50
[train]
phase1_iters = 300
total_iters = 1500
phase2_lr = 0.005
anneal_iters = 300
batch_size = 100
log_every = 500
"#;

const CORRELATED_SERIES: &str = r#"
[data]
synthetic = "correlated_ou"
n = 300
test_fraction = 0.2
[model]
num_inducing = 15
rank = 2
dof = 2
mc_samples = 3
window = 32
[train]
phase1_iters = 100
total_iters = 2000
anneal_iters = 100
log_every = 500
[forecast]
horizon = 24
n_sims = 50
"#;

fn run_config(base: &str, variant: &str, seed: u64, out: &std::path::Path) -> RunConfig {
    let mut cfg = RunConfig::parse(base).unwrap();
    cfg.seed = Some(seed);
    cfg.model.variant = variant.into();
    cfg.out = out.join(format!("{variant}-{seed}"));
    cfg
}

fn directional() -> Outcome {
    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    let seeds = 1..=5u64;
    let mut reg = [Vec::new(), Vec::new()];
    let mut ts = [Vec::new(), Vec::new()];
    for seed in seeds {
        for (k, variant) in ["diffwgp", "diffgp"].into_iter().enumerate() {
            let cfg = run_config(CORRELATED_REGRESSION, variant, seed, dir.path());
            let t = cmd_train(&cfg).map_err(|e| e.to_string())?;
            reg[k].push(cmd_eval(&t.checkpoint, None, &cfg.out).map_err(|e| e.to_string())?.loglik);
        }
        for (k, variant) in ["diffwgp", "diagonal"].into_iter().enumerate() {
            let cfg = run_config(CORRELATED_SERIES, variant, seed, dir.path());
            let t = cmd_train(&cfg).map_err(|e| e.to_string())?;
            let trace = cmd_forecast(&t.checkpoint, None, &cfg.out, &Overrides::default()).map_err(|e| e.to_string())?;
            let at = trace.hours.iter().position(|&h| h == 20.0).ok_or("no hour-20 entry")?;
            ts[k].push(trace.mean_loglik[at]);
        }
    }
    let fmt = |v: &[f64]| v.iter().map(|x| format!("{x:.3}")).collect::<Vec<_>>().join(" ");
    let (rw, rg) = (median(reg[0].clone()), median(reg[1].clone()));
    let (tw, td) = (median(ts[0].clone()), median(ts[1].clone()));
    let verdict = |ok: bool| if ok { "pass" } else { "fail" };
    check(
        rw > rg && tw > td,
        format!(
            "regression {}: median test loglik diffwgp {rw:.4} vs diffgp {rg:.4} [{} | {}]; \
             time series {}: hour-20 forecast loglik diffwgp {tw:.4} vs diagonal {td:.4} [{} | {}]",
            verdict(rw > rg),
            fmt(&reg[0]),
            fmt(&reg[1]),
            verdict(tw > td),
            fmt(&ts[0]),
            fmt(&ts[1])
        ),
    )
}

fn schedule_conformance() -> Outcome {
    let mut exact = true;
    for it in [0u64, 2000, 3999, 4000, 1_000_000] {
        exact &= anneal_coefficient(it, 4000) == (it as f64 / 4000.0).min(1.0);
    }
    let data = synthetic::sine(40, 2);
    let mut m = RegressionModel::new(&model_config("diffwgp", 10), &data.x, 1, &NoiseStream::new(3)).map_err(|e| e.to_string())?;
    let before = m.params.clone();
    let mut obj = RegressionObjective::new(&mut m, &data).map_err(|e| e.to_string())?;
    let warm = obj.warm_start_groups();
    let s = Schedule {
        phase1_iters: 8,
        total_iters: 8,
        batch_size: 16,
        ..Schedule::default()
    };
    fit(&mut obj, &s, 5, &CheckpointPlan::default()).map_err(|e| e.to_string())?;
    let after = obj.params();
    let (mut frozen_moved, mut warm_moved) = (0, 0);
    for id in before.ids() {
        let same = before.value(id).data() == after.value(id).data();
        if warm.contains(&before.group(id)) {
            warm_moved += usize::from(!same);
        } else {
            frozen_moved += usize::from(!same);
        }
    }
    check(
        exact && frozen_moved == 0 && warm_moved > 0,
        format!("anneal exact: {exact}; phase 1 moved {warm_moved} warm-start and {frozen_moved} frozen parameters"),
    )
}

fn reproducibility() -> Outcome {
    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    let mut files = Vec::new();
    for run in ["a", "b"] {
        let mut cfg = RunConfig::parse(
            r#"
seed = 3
[data]
synthetic = "correlated_noise"
n = 120
[model]
variant = "diffwgp"
num_inducing = 10
rank = 2
dof = 2
[train]
phase1_iters = 20
total_iters = 60
batch_size = 40
log_every = 10
"#,
        )
        .unwrap();
        cfg.out = dir.path().join(run);
        let t = cmd_train(&cfg).map_err(|e| e.to_string())?;
        cmd_eval(&t.checkpoint, None, &cfg.out).map_err(|e| e.to_string())?;
        files.push((
            fs::read(cfg.out.join(METRICS_FILE)).map_err(|e| e.to_string())?,
            fs::read(cfg.out.join(EVAL_FILE)).map_err(|e| e.to_string())?,
        ));
    }
    check(files[0] == files[1], format!("metrics and eval CSVs identical: {}", files[0] == files[1]))
}

fn main() {
    let criteria: [(&str, fn() -> Outcome); 10] = [
        ("gradient suite", gradients),
        ("KL oracles", kl_oracles),
        ("Wishart moments", wishart_moments),
        ("Euler-Maruyama oracles", euler_maruyama),
        ("Woodbury equivalence", woodbury),
        ("ELBO bound", elbo_bound),
        ("training sanity", training_sanity),
        ("directional experiments", directional),
        ("schedule conformance", schedule_conformance),
        ("reproducibility", reproducibility),
    ];
    let only: Option<Vec<usize>> = std::env::var("ACCEPTANCE_ONLY")
        .ok()
        .map(|s| s.split(',').filter_map(|t| t.trim().parse().ok()).collect());
    panic::set_hook(Box::new(|_| {}));
    let mut unexpected = Vec::new();
    for (i, (name, f)) in criteria.iter().enumerate() {
        let n = i + 1;
        if only.as_ref().is_some_and(|o| !o.contains(&n)) {
            continue;
        }
        let start = Instant::now();
        let outcome = panic::catch_unwind(AssertUnwindSafe(f)).unwrap_or_else(|p| {
            let msg = p
                .downcast_ref::<String>()
                .cloned()
                .or_else(|| p.downcast_ref::<&str>().map(|s| s.to_string()))
                .unwrap_or_default();
            Err(format!("panicked: {msg}"))
        });
        let secs = start.elapsed().as_secs_f64();
        match &outcome {
            Ok(d) => println!("criterion {n:>2} {name}: PASS ({secs:.1}s) {d}"),
            Err(d) => {
                let known = if KNOWN_RED.contains(&n) { " [known]" } else { "" };
                println!("criterion {n:>2} {name}: FAIL{known} ({secs:.1}s) {d}");
            }
        }
        if outcome.is_err() && !KNOWN_RED.contains(&n) {
            unexpected.push(n);
        }
    }
    if !unexpected.is_empty() {
        eprintln!("unexpected failures: {unexpected:?}");
        std::process::exit(1);
    }
}
