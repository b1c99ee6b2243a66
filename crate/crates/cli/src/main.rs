use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use log::error;

use wsde_cli::commands::{self, CHECKPOINT_DIR};
use wsde_cli::{CliError, CliResult, Overrides, RunConfig};

#[derive(Parser)]
#[command(name = "wsde", version, about = "Train and evaluate SDE-flow GP models with Wishart diffusions")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Fit a model; writes a checkpoint and metrics.csv.
    Train(Common),
    /// Held-out log-likelihood and RMSE of a checkpoint.
    Eval(Common),
    /// Simulate past the end of a time series; writes a trace and density grids.
    Forecast(Common),
    /// Train and evaluate a grid of variants × seeds.
    Ablate(Common),
}

#[derive(Args)]
struct Common {
    /// TOML run configuration.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Checkpoint directory (eval/forecast; default `<out>/checkpoint`).
    #[arg(long)]
    checkpoint: Option<PathBuf>,
    /// Held-out CSV overriding the configured split (eval/forecast).
    #[arg(long)]
    data: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    /// Output directory.
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long)]
    variant: Option<String>,
    /// Wishart rank ρ.
    #[arg(long)]
    rho: Option<usize>,
    /// Wishart degrees of freedom ν.
    #[arg(long)]
    nu: Option<usize>,
    /// Total training iterations.
    #[arg(long)]
    steps: Option<usize>,
    /// Monte Carlo paths per input during training.
    #[arg(long)]
    mc_samples: Option<usize>,
    /// Forecast horizon in hours.
    #[arg(long, allow_negative_numbers = true)]
    horizon: Option<i64>,
    #[arg(long)]
    n_sims: Option<usize>,
}

impl Common {
    fn overrides(&self) -> Overrides {
        Overrides {
            seed: self.seed,
            out: self.out.clone(),
            variant: self.variant.clone(),
            rho: self.rho,
            nu: self.nu,
            steps: self.steps,
            mc_samples: self.mc_samples,
            horizon: self.horizon,
            n_sims: self.n_sims,
        }
    }

    fn run_config(&self) -> CliResult<RunConfig> {
        let mut cfg = match &self.config {
            Some(p) => RunConfig::load(p)?,
            None => RunConfig::default(),
        };
        cfg.apply(&self.overrides());
        cfg.validate()?;
        Ok(cfg)
    }

    /// Checkpoint and output directory for eval/forecast.
    fn locate(&self) -> CliResult<(PathBuf, PathBuf)> {
        if let Some(ck) = &self.checkpoint {
            let out = self.out.clone().unwrap_or_else(|| ck.parent().map_or(PathBuf::from("."), PathBuf::from));
            return Ok((ck.clone(), out));
        }
        let cfg = self.run_config()?;
        Ok((cfg.out.join(CHECKPOINT_DIR), cfg.out))
    }
}

fn run(cli: Cli) -> CliResult<()> {
    match cli.command {
        Command::Train(c) => {
            let t = commands::cmd_train(&c.run_config()?)?;
            println!("checkpoint: {}", t.checkpoint.display());
            println!("metrics: {}", t.metrics.display());
        }
        Command::Eval(c) => {
            let (ck, out) = c.locate()?;
            let r = commands::cmd_eval(&ck, c.data.as_deref(), &out)?;
            println!("loglik {:.4}  rmse {:.4}  (n = {})", r.loglik, r.rmse, r.n);
        }
        Command::Forecast(c) => {
            if c.horizon.is_some_and(|h| h <= 0) {
                return Err(CliError::Config("`--horizon` must be positive".into()));
            }
            let (ck, out) = c.locate()?;
            let t = commands::cmd_forecast(&ck, c.data.as_deref(), &out, &c.overrides())?;
            println!("{} forecast hours written to {}", t.hours.len(), out.join(commands::TRACE_FILE).display());
        }
        Command::Ablate(c) => {
            let cfg = c.run_config()?;
            let rows = commands::cmd_ablate(&cfg)?;
            let ok = rows.iter().filter(|r| r.result.is_ok()).count();
            println!("{ok}/{} rows succeeded; table at {}", rows.len(), cfg.out.join(commands::ABLATE_FILE).display());
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 1 } else { 0 });
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            error!("{e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
