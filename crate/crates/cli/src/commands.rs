//! The four subcommands as library functions, so tests can drive them
//! without spawning processes.

use std::fs;
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;

use log::{info, warn};

use wishart_sde::data::{self, synthetic, Preprocessing, Standardizer, TabularDataset, TimeSeriesDataset};
use wishart_sde::dynamics::{cross_correlation_density, DynamicalModel, Forecast};
use wishart_sde::models::{variant, RegressionModel};
use wishart_sde::ndcore::Tensor;
use wishart_sde::rng::{tag, NoiseStream};
use wishart_sde::train::{self, Checkpoint, CheckpointPlan, DynamicsObjective, RegressionObjective};

use crate::config::RunConfig;
use crate::error::{CliError, CliResult};

pub const CHECKPOINT_DIR: &str = "checkpoint";
pub const METRICS_FILE: &str = "metrics.csv";
pub const EVAL_FILE: &str = "eval.csv";
pub const TRACE_FILE: &str = "forecast_trace.csv";
pub const DENSITY_FILE: &str = "forecast_density.csv";
pub const ABLATE_FILE: &str = "ablate.csv";
pub const CONFIG_FILE: &str = "config.toml";

/// Standardized train/test data and the statistics that produced it.
enum Prepared {
    Tabular {
        train: TabularDataset,
        test: TabularDataset,
        prep: Preprocessing,
    },
    Series {
        train: TimeSeriesDataset,
        test: TimeSeriesDataset,
        scale: Standardizer,
    },
}

fn dataset_name(cfg: &RunConfig) -> String {
    match (&cfg.data.synthetic, &cfg.data.path) {
        (Some(s), _) => s.clone(),
        (None, Some(p)) => p.file_stem().map_or("data".into(), |s| s.to_string_lossy().into_owned()),
        (None, None) => "data".into(),
    }
}

fn load_series(cfg: &RunConfig, path: &Path) -> CliResult<TimeSeriesDataset> {
    Ok(data::load_time_series(path, &cfg.schema())?)
}

fn prepare(cfg: &RunConfig) -> CliResult<Prepared> {
    let seed = cfg.seed();
    if cfg.is_time_series() {
        let full = match (&cfg.data.synthetic, &cfg.data.path) {
            (Some(_), _) => synthetic::correlated_ou(cfg.data.n, seed),
            (None, Some(p)) => load_series(cfg, p)?,
            _ => unreachable!("validated"),
        };
        let (train, test) = match &cfg.data.test_path {
            Some(p) => (full, load_series(cfg, p)?),
            None => {
                let held = ((full.len() as f64 * cfg.data.test_fraction).ceil() as usize).max(1);
                full.split_at(full.len().saturating_sub(held))?
            }
        };
        let scale = Standardizer::fit(&train.values)?;
        return Ok(Prepared::Series {
            train: train.standardize_with(&scale)?,
            test: test.standardize_with(&scale)?,
            scale,
        });
    }
    let full = match (&cfg.data.synthetic, &cfg.data.path) {
        (Some(s), _) if s == "sine" => synthetic::sine(cfg.data.n, seed),
        (Some(_), _) => synthetic::correlated_noise_regression(cfg.data.n, seed),
        (None, Some(p)) => data::load_tabular(p, &cfg.schema())?,
        _ => unreachable!("validated"),
    };
    let (train, test) = match &cfg.data.test_path {
        Some(p) => (full, data::load_tabular(p, &cfg.schema())?),
        None => data::split(&full, 1.0 - cfg.data.test_fraction, seed)?,
    };
    if train.target_names != test.target_names || train.feature_names != test.feature_names {
        return Err(CliError::Config("training and test files have different columns".into()));
    }
    let prep = Preprocessing::fit(&train)?;
    Ok(Prepared::Tabular {
        train: prep.transform(&train)?,
        test: prep.transform(&test)?,
        prep,
    })
}

fn stats(prepared: &Prepared) -> Vec<(String, Tensor)> {
    let pair = |prefix: &str, s: &Standardizer| {
        vec![
            (format!("stats.{prefix}_mean"), Tensor::row(&s.means)),
            (format!("stats.{prefix}_std"), Tensor::row(&s.stds)),
        ]
    };
    match prepared {
        Prepared::Tabular { prep, .. } => {
            let mut v = pair("x", &prep.x);
            v.extend(pair("y", &prep.y));
            let kept: Vec<f64> = prep.kept_features.iter().map(|&c| c as f64).collect();
            v.push(("stats.kept_features".into(), Tensor::row(&kept)));
            v
        }
        Prepared::Series { scale, .. } => pair("y", scale),
    }
}

/// Target standardizer stored in a checkpoint.
fn stored_scale(ckpt: &Checkpoint, cols: usize) -> CliResult<Standardizer> {
    let get = |name: &str| {
        ckpt.get(name)
            .map(|t| t.data().to_vec())
            .ok_or_else(|| CliError::Config(format!("checkpoint lacks `{name}`")))
    };
    let s = Standardizer {
        means: get("stats.y_mean")?,
        stds: get("stats.y_std")?,
    };
    if s.means.len() != cols {
        return Err(CliError::Config(format!(
            "schema mismatch: checkpoint has {} targets, data has {cols}",
            s.means.len()
        )));
    }
    Ok(s)
}

fn csv_header(cfg: &RunConfig) -> String {
    format!("# config_hash={}\n", cfg.hash())
}

fn fmt(v: f64) -> String {
    format!("{v:?}")
}

fn write_config(cfg: &RunConfig) -> CliResult<()> {
    fs::create_dir_all(&cfg.out)?;
    fs::write(cfg.out.join(CONFIG_FILE), cfg.to_toml())?;
    Ok(())
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub checkpoint: PathBuf,
    pub metrics: PathBuf,
    pub final_elbo: f64,
}

/// Fits the configured model and writes the checkpoint and metric log under `out`.
pub fn cmd_train(cfg: &RunConfig) -> CliResult<TrainOutcome> {
    cfg.validate()?;
    write_config(cfg)?;
    let prepared = prepare(cfg)?;
    let seed = cfg.seed();
    let init = NoiseStream::new(seed).child(tag::INIT);
    let schedule = cfg.schedule();
    let checkpoint = cfg.out.join(CHECKPOINT_DIR);
    let plan = CheckpointPlan {
        dir: Some(checkpoint.clone()),
        config: cfg.to_toml(),
        extra: stats(&prepared),
    };
    info!("training {} on {} (seed {seed})", cfg.model.variant, dataset_name(cfg));
    let log = match &prepared {
        Prepared::Tabular { train, .. } => {
            let mut model = RegressionModel::new(&cfg.model_config(), &train.x, train.y.cols(), &init)?;
            let mut obj = RegressionObjective::new(&mut model, train)?;
            train::fit(&mut obj, &schedule, seed, &plan)?
        }
        Prepared::Series { train, .. } => {
            let batch = train.to_batch()?;
            let mut model = DynamicalModel::new(&cfg.dynamics_config(), &batch, &init)?;
            let mut obj = DynamicsObjective::new(&mut model, &batch)?;
            train::fit(&mut obj, &schedule, seed, &plan)?
        }
    };
    let metrics = cfg.out.join(METRICS_FILE);
    let hash = cfg.hash();
    train::write_metrics(&metrics, &log, &[("config_hash", &hash)])?;
    Ok(TrainOutcome {
        checkpoint,
        metrics,
        final_elbo: log.last().map_or(f64::NAN, |r| r.elbo.total),
    })
}

/// Held-out metrics in original units.
#[derive(Debug, Clone, PartialEq)]
pub struct EvalRow {
    pub dataset: String,
    pub variant: String,
    /// ρ for Wishart variants.
    pub rho: Option<usize>,
    pub seed: u64,
    pub n: usize,
    /// Mean per-point predictive log density (per forecast hour for series).
    pub loglik: f64,
    pub rmse: f64,
}

fn rho_of(cfg: &RunConfig) -> Option<usize> {
    variant(&cfg.model.variant)
        .ok()
        .filter(|v| v.diffusion == "wishart")
        .map(|_| cfg.model.rank)
}

/// Reads a checkpoint and the configuration it was trained with.
pub fn open_checkpoint(dir: &Path) -> CliResult<(Checkpoint, RunConfig)> {
    let ckpt = Checkpoint::read(dir)?;
    let cfg = RunConfig::parse(&ckpt.config)?;
    Ok((ckpt, cfg))
}

enum Restored {
    Regression(RegressionModel),
    Dynamics(DynamicalModel),
}

fn restore(cfg: &RunConfig, ckpt: &Checkpoint, prepared: &Prepared) -> CliResult<Restored> {
    let init = NoiseStream::new(cfg.seed()).child(tag::INIT);
    Ok(match prepared {
        Prepared::Tabular { train, .. } => {
            let mut model = RegressionModel::new(&cfg.model_config(), &train.x, train.y.cols(), &init)?;
            train::restore_params(&mut RegressionObjective::new(&mut model, train)?, ckpt)?;
            Restored::Regression(model)
        }
        Prepared::Series { train, .. } => {
            let batch = train.to_batch()?;
            let mut model = DynamicalModel::new(&cfg.dynamics_config(), &batch, &init)?;
            train::restore_params(&mut DynamicsObjective::new(&mut model, &batch)?, ckpt)?;
            Restored::Dynamics(model)
        }
    })
}

/// Test data for evaluation: the configured split, or a separate CSV.
fn eval_data(cfg: &RunConfig, prepared: &mut Prepared, data: Option<&Path>) -> CliResult<()> {
    let Some(path) = data else { return Ok(()) };
    match prepared {
        Prepared::Tabular { test, prep, .. } => {
            let raw = data::load_tabular(path, &cfg.schema())?;
            if raw.y.cols() != prep.y.means.len() {
                return Err(CliError::Config(format!(
                    "schema mismatch: checkpoint has {} targets, data has {}",
                    prep.y.means.len(),
                    raw.y.cols()
                )));
            }
            *test = prep.transform(&raw)?;
        }
        Prepared::Series { test, scale, .. } => {
            *test = load_series(cfg, path)?.standardize_with(scale)?;
        }
    }
    Ok(())
}

/// Evaluates a checkpoint on held-out data and writes `eval.csv` under `out`.
pub fn cmd_eval(checkpoint: &Path, data: Option<&Path>, out: &Path) -> CliResult<EvalRow> {
    let (ckpt, cfg) = open_checkpoint(checkpoint)?;
    cfg.validate()?;
    let mut prepared = prepare(&cfg)?;
    eval_data(&cfg, &mut prepared, data)?;
    let model = restore(&cfg, &ckpt, &prepared)?;
    let stream = NoiseStream::new(cfg.seed()).child(tag::EVAL);
    let (n, loglik, rmse) = match (&model, &prepared) {
        (Restored::Regression(m), Prepared::Tabular { test, .. }) => {
            let scale = stored_scale(&ckpt, test.y.cols())?;
            let pred = m.predict(&test.x, cfg.model.eval_mc_samples, &stream)?;
            let ll = pred.log_density(&test.y)?;
            let loglik = ll.iter().sum::<f64>() / ll.len() as f64 - scale.log_jacobian();
            let mean = scale.inverse(&pred.mean())?;
            let truth = scale.inverse(&test.y)?;
            (test.len(), loglik, rmse(&mean, &truth))
        }
        (Restored::Dynamics(m), Prepared::Series { train, test, .. }) => {
            let scale = stored_scale(&ckpt, test.values.cols())?;
            let context = train.to_batch()?;
            let truth = test.to_batch()?;
            let span = truth.times.last().copied().unwrap_or(0.0) - context.times.last().copied().unwrap_or(0.0);
            let horizon = (cfg.forecast.horizon as f64).min(span.floor());
            if horizon < 1.0 {
                return Err(CliError::Config("held-out series is shorter than one hour".into()));
            }
            let f = m.forecast(&context, Some(&truth), horizon, cfg.forecast.n_sims, &stream)?;
            let loglik = f.mean_loglik.iter().sum::<f64>() / f.hours.len() as f64 - scale.log_jacobian();
            let t_end = *context.times.last().expect("non-empty");
            let mut means = Vec::new();
            let mut targets = Vec::new();
            for (h, sims) in f.hours.iter().zip(&f.observed) {
                means.push(sims.column_means());
                targets.push(Tensor::row(&truth.value_at(t_end + h).expect("covered")));
            }
            let mean = scale.inverse(&Tensor::concat_rows(&means)?)?;
            let target = scale.inverse(&Tensor::concat_rows(&targets)?)?;
            (f.hours.len(), loglik, rmse(&mean, &target))
        }
        _ => unreachable!("model and data come from the same config"),
    };
    let row = EvalRow {
        dataset: dataset_name(&cfg),
        variant: cfg.model.variant.clone(),
        rho: rho_of(&cfg),
        seed: cfg.seed(),
        n,
        loglik,
        rmse,
    };
    fs::create_dir_all(out)?;
    let text = format!(
        "{}dataset,variant,rho,seed,n,loglik,rmse\n{},{},{},{},{},{},{}\n",
        csv_header(&cfg),
        row.dataset,
        row.variant,
        row.rho.map_or("NA".into(), |r| r.to_string()),
        row.seed,
        row.n,
        fmt(row.loglik),
        fmt(row.rmse)
    );
    fs::write(out.join(EVAL_FILE), text)?;
    Ok(row)
}

fn rmse(a: &Tensor, b: &Tensor) -> f64 {
    let n = a.len() as f64;
    (a.data().iter().zip(b.data()).map(|(x, y)| (x - y).powi(2)).sum::<f64>() / n).sqrt()
}

/// Per-hour forecast quality in original units.
#[derive(Debug, Clone, PartialEq)]
pub struct ForecastTrace {
    pub hours: Vec<f64>,
    /// Empty when the held-out series does not cover the horizon.
    pub mean_loglik: Vec<f64>,
    pub std_error: Vec<f64>,
    pub mixture_loglik: Vec<f64>,
}

/// Simulates `n_sims` trajectories past the end of the training series and
/// writes the per-hour trace and the pairwise density grids under `out`.
pub fn cmd_forecast(checkpoint: &Path, data: Option<&Path>, out: &Path, overrides: &crate::config::Overrides) -> CliResult<ForecastTrace> {
    let (ckpt, mut cfg) = open_checkpoint(checkpoint)?;
    cfg.apply(&crate::config::Overrides {
        horizon: overrides.horizon,
        n_sims: overrides.n_sims,
        ..Default::default()
    });
    cfg.validate()?;
    if !cfg.is_time_series() {
        return Err(CliError::Config("forecast needs a checkpoint of a time-series model".into()));
    }
    let mut prepared = prepare(&cfg)?;
    eval_data(&cfg, &mut prepared, data)?;
    let model = restore(&cfg, &ckpt, &prepared)?;
    let (Restored::Dynamics(model), Prepared::Series { train, test, .. }) = (&model, &prepared) else {
        unreachable!("time-series config");
    };
    let scale = stored_scale(&ckpt, test.values.cols())?;
    let context = train.to_batch()?;
    let truth = test.to_batch()?;
    let horizon = cfg.forecast.horizon as f64;
    let t_end = *context.times.last().expect("non-empty");
    let covered = truth.value_at(t_end + horizon).is_some() && truth.value_at(t_end + 1.0).is_some();
    if !covered {
        warn!("held-out series does not cover {horizon} h; writing simulations without log-likelihoods");
    }
    let stream = NoiseStream::new(cfg.seed()).child(tag::FORECAST);
    let f: Forecast = model.forecast(&context, covered.then_some(&truth), horizon, cfg.forecast.n_sims, &stream)?;
    let jac = scale.log_jacobian();
    let trace = ForecastTrace {
        hours: f.hours.clone(),
        mean_loglik: f.mean_loglik.iter().map(|v| v - jac).collect(),
        std_error: f.std_error.clone(),
        mixture_loglik: f.mixture_loglik.iter().map(|v| v - jac).collect(),
    };

    fs::create_dir_all(out)?;
    let mut text = csv_header(&cfg);
    text.push_str("hour,mean_loglik,std_error,mixture_loglik\n");
    for (k, h) in trace.hours.iter().enumerate() {
        let col = |v: &Vec<f64>| v.get(k).map_or("NA".to_string(), |x| fmt(*x));
        text.push_str(&format!(
            "{},{},{},{}\n",
            fmt(*h),
            col(&trace.mean_loglik),
            col(&trace.std_error),
            col(&trace.mixture_loglik)
        ));
    }
    fs::write(out.join(TRACE_FILE), text)?;

    let mut grid = csv_header(&cfg);
    grid.push_str("i,j,x_lo,x_hi,y_lo,y_hi,density\n");
    if cfg.forecast.n_sims < 2 {
        warn!("density grids need at least two simulations; skipping");
    } else {
        let observed: Vec<Tensor> = f.observed.iter().map(|o| scale.inverse(o)).collect::<Result<_, _>>()?;
        for &[i, j] in &cfg.forecast.pairs {
            let hist = cross_correlation_density(&observed, i, j, cfg.forecast.bins)?;
            let (chi2, df) = hist.chi_square_independence();
            info!("pair ({i}, {j}): independence chi-square {chi2:.1} on {df} df");
            let (xw, yw) = (hist.x_edges[1] - hist.x_edges[0], hist.y_edges[1] - hist.y_edges[0]);
            for a in 0..cfg.forecast.bins {
                for b in 0..cfg.forecast.bins {
                    grid.push_str(&format!(
                        "{i},{j},{},{},{},{},{}\n",
                        fmt(hist.x_edges[a]),
                        fmt(hist.x_edges[a + 1]),
                        fmt(hist.y_edges[b]),
                        fmt(hist.y_edges[b + 1]),
                        fmt(hist.mass.get(a, b) / (xw * yw))
                    ));
                }
            }
        }
    }
    fs::write(out.join(DENSITY_FILE), grid)?;
    Ok(trace)
}

/// One row of an ablation table.
#[derive(Debug, Clone, PartialEq)]
pub struct AblateRow {
    pub dataset: String,
    pub variant: String,
    pub rho: Option<usize>,
    pub seed: u64,
    /// `Ok((loglik, rmse))` or the failure message.
    pub result: Result<(f64, f64), String>,
}

/// Trains and evaluates every configured variant × seed; rows run on worker
/// threads, each in its own output directory.
pub fn cmd_ablate(cfg: &RunConfig) -> CliResult<Vec<AblateRow>> {
    let mut jobs = Vec::new();
    for v in &cfg.ablate.variants {
        for &seed in &cfg.ablate.seeds {
            let mut c = cfg.clone();
            c.model.variant = v.clone();
            c.seed = Some(seed);
            c.out = cfg.out.join("ablate").join(format!("{v}-seed{seed}"));
            c.validate()?;
            jobs.push(c);
        }
    }
    if jobs.is_empty() {
        return Err(CliError::Config("`ablate`: no variants or seeds given".into()));
    }
    let workers = match cfg.ablate.workers {
        0 => std::thread::available_parallelism().map_or(1, |n| n.get()),
        w => w,
    }
    .min(jobs.len());
    let next = AtomicUsize::new(0);
    let results: Mutex<Vec<Option<AblateRow>>> = Mutex::new(vec![None; jobs.len()]);
    std::thread::scope(|s| {
        for _ in 0..workers {
            s.spawn(|| loop {
                let k = next.fetch_add(1, Ordering::SeqCst);
                let Some(job) = jobs.get(k) else { break };
                let result = cmd_train(job)
                    .and_then(|t| cmd_eval(&t.checkpoint, None, &job.out))
                    .map(|r| (r.loglik, r.rmse))
                    .map_err(|e| {
                        warn!("{} seed {}: {e}", job.model.variant, job.seed());
                        e.to_string()
                    });
                let row = AblateRow {
                    dataset: dataset_name(job),
                    variant: job.model.variant.clone(),
                    rho: rho_of(job),
                    seed: job.seed(),
                    result,
                };
                results.lock().expect("worker panicked")[k] = Some(row);
            });
        }
    });
    let rows: Vec<AblateRow> = results
        .into_inner()
        .expect("worker panicked")
        .into_iter()
        .map(|r| r.expect("every job ran"))
        .collect();

    let mut text = csv_header(cfg);
    text.push_str("dataset,variant,rho,seed,loglik,rmse,status\n");
    for r in &rows {
        let (ll, rmse, status) = match &r.result {
            Ok((ll, rmse)) => (fmt(*ll), fmt(*rmse), "ok".to_string()),
            Err(e) => ("NA".into(), "NA".into(), format!("\"failed: {}\"", e.replace('"', "'").replace('\n', " "))),
        };
        text.push_str(&format!(
            "{},{},{},{},{ll},{rmse},{status}\n",
            r.dataset,
            r.variant,
            r.rho.map_or("NA".into(), |v| v.to_string()),
            r.seed
        ));
    }
    fs::create_dir_all(&cfg.out)?;
    fs::write(cfg.out.join(ABLATE_FILE), text)?;
    if rows.iter().all(|r| r.result.is_err()) {
        return Err(CliError::Core(wishart_sde::Error::Training("every ablation row failed".into())));
    }
    Ok(rows)
}
