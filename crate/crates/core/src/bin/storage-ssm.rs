//! Command-line front end: `solve`, `simulate`, `fit`, `compare`, `diagnose`
//! and `replay`.

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use storage_ssm::model_eval::NumeratorLikelihood;
use storage_ssm::pipeline::{replay, run, Command, ModelKind, ParamValues, RunConfig, MANIFEST_FILE};
use storage_ssm::{Error, Result};

#[derive(Parser)]
#[command(name = "storage-ssm", version, about = "Storage model with stochastic trend: solve, simulate, estimate, compare")]
struct Cli {
    #[command(subcommand)]
    command: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Solve the equilibrium and write the storage policy and price function.
    Solve {
        #[command(flatten)]
        params: ParamArgs,
        #[command(flatten)]
        common: Common,
    },
    /// Simulate a price path; also writes a `date,price` file usable by `fit`.
    Simulate {
        #[arg(long, default_value = "storage-ssm")]
        model: String,
        #[command(flatten)]
        params: ParamArgs,
        /// Trend coefficients for deterministic-trend models, in basis order.
        #[arg(long = "trend-coef", allow_negative_numbers = true, value_delimiter = ',')]
        trend_coefficients: Vec<f64>,
        #[arg(long)]
        t_len: Option<usize>,
        #[arg(long)]
        sim_burn_in: Option<usize>,
        #[command(flatten)]
        common: Common,
    },
    /// Estimate one model by MCMC.
    Fit {
        #[arg(long, default_value = "storage-ssm")]
        model: String,
        #[command(flatten)]
        est: Estimation,
        #[command(flatten)]
        common: Common,
    },
    /// Marginal likelihoods, Bayes factors, residual tests and economic summaries.
    Compare {
        /// Models to compare; Bayes factors are relative to the first.
        #[arg(required = true)]
        models: Vec<String>,
        #[command(flatten)]
        est: Estimation,
        /// Proposal draws for the marginal likelihood denominator.
        #[arg(long)]
        cj_draws: Option<usize>,
        /// Re-evaluate the likelihood at every posterior draw.
        #[arg(long)]
        cj_recompute: bool,
        #[command(flatten)]
        common: Common,
    },
    /// Residual diagnostics at the posterior mean.
    Diagnose {
        #[arg(required = true)]
        models: Vec<String>,
        #[command(flatten)]
        est: Estimation,
        #[command(flatten)]
        common: Common,
    },
    /// Re-run a manifest and check that every output is byte-identical.
    Replay {
        manifest: PathBuf,
        /// Where to write the replayed outputs.
        #[arg(long, default_value = "replay")]
        out: PathBuf,
    },
}

#[derive(Args)]
struct ParamArgs {
    #[arg(long)]
    v: Option<f64>,
    #[arg(long)]
    delta: Option<f64>,
    #[arg(long)]
    b: f64,
}

#[derive(Args)]
struct Estimation {
    /// `date,price` CSV with `YYYY-MM` dates.
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    particles: Option<usize>,
    #[arg(long)]
    iterations: Option<usize>,
    #[arg(long)]
    burn_in: Option<usize>,
    /// Monte Carlo points for deterministic-trend Pearson residuals.
    #[arg(long)]
    residual_mc: Option<usize>,
    #[arg(long)]
    prior_log_b_mean: Option<f64>,
    #[arg(long)]
    prior_log_b_sd: Option<f64>,
    #[arg(long)]
    prior_v2_scale: Option<f64>,
    #[arg(long)]
    prior_v2_df: Option<f64>,
    #[arg(long)]
    prior_delta_a: Option<f64>,
    #[arg(long)]
    prior_delta_b: Option<f64>,
    #[arg(long)]
    prior_coef_sd: Option<f64>,
}

#[derive(Args)]
struct Common {
    /// JSON run configuration used as the base; flags override it.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Output directory; the STORAGE_SSM_OUT environment variable overrides it.
    #[arg(long, default_value = "out")]
    out: PathBuf,
    #[arg(long)]
    seed: Option<u64>,
    /// Storage capacity C.
    #[arg(long)]
    capacity: Option<f64>,
    #[arg(long)]
    annual_rate: Option<f64>,
    /// Solver grid points.
    #[arg(long)]
    grid_size: Option<usize>,
}

fn base_config(command: Command, common: &Common) -> Result<RunConfig> {
    let mut cfg = match &common.config {
        Some(p) => {
            let mut c: RunConfig = serde_json::from_slice(&std::fs::read(p)?)?;
            c.command = command;
            c
        }
        None => RunConfig::new(command),
    };
    cfg.output_dir = common.out.clone();
    set(&mut cfg.seed, common.seed);
    set(&mut cfg.capacity, common.capacity);
    set(&mut cfg.annual_rate, common.annual_rate);
    set(&mut cfg.solver.grid_size, common.grid_size);
    Ok(cfg.with_env_override())
}

fn set<T>(slot: &mut T, value: Option<T>) {
    if let Some(v) = value {
        *slot = v;
    }
}

fn apply_estimation(cfg: &mut RunConfig, e: Estimation) {
    cfg.data = Some(e.data);
    set(&mut cfg.n_particles, e.particles);
    set(&mut cfg.mcmc.iterations, e.iterations);
    set(&mut cfg.mcmc.burn_in, e.burn_in);
    set(&mut cfg.residual_mc, e.residual_mc);
    let p = &mut cfg.prior;
    set(&mut p.log_b_mean, e.prior_log_b_mean);
    set(&mut p.log_b_sd, e.prior_log_b_sd);
    set(&mut p.v2_scale, e.prior_v2_scale);
    set(&mut p.v2_df, e.prior_v2_df);
    set(&mut p.delta_a, e.prior_delta_a);
    set(&mut p.delta_b, e.prior_delta_b);
    set(&mut p.coefficient_sd, e.prior_coef_sd);
}

fn models(names: &[String]) -> Result<Vec<ModelKind>> {
    names.iter().map(|n| ModelKind::parse(n)).collect()
}

fn execute(cli: Cli) -> Result<PathBuf> {
    let cfg = match cli.command {
        Cmd::Replay { manifest, out } => {
            replay(&manifest, &out)?;
            return Ok(out.join(MANIFEST_FILE));
        }
        Cmd::Solve { params, common } => {
            let mut cfg = base_config(Command::Solve, &common)?;
            cfg.params = Some(ParamValues {
                v: params.v,
                delta: params.delta,
                b: params.b,
                trend_coefficients: Vec::new(),
            });
            cfg
        }
        Cmd::Simulate {
            model,
            params,
            trend_coefficients,
            t_len,
            sim_burn_in,
            common,
        } => {
            let mut cfg = base_config(Command::Simulate, &common)?;
            cfg.models = vec![ModelKind::parse(&model)?];
            cfg.params = Some(ParamValues {
                v: params.v,
                delta: params.delta,
                b: params.b,
                trend_coefficients,
            });
            set(&mut cfg.t_len, t_len);
            set(&mut cfg.sim_burn_in, sim_burn_in);
            cfg
        }
        Cmd::Fit { model, est, common } => {
            let mut cfg = base_config(Command::Fit, &common)?;
            cfg.models = vec![ModelKind::parse(&model)?];
            apply_estimation(&mut cfg, est);
            cfg
        }
        Cmd::Compare {
            models: names,
            est,
            cj_draws,
            cj_recompute,
            common,
        } => {
            let mut cfg = base_config(Command::Compare, &common)?;
            cfg.models = models(&names)?;
            apply_estimation(&mut cfg, est);
            cfg.cj_draws = cj_draws.or(cfg.cj_draws);
            if cj_recompute {
                cfg.cj_numerator = NumeratorLikelihood::Recompute;
            }
            cfg
        }
        Cmd::Diagnose { models: names, est, common } => {
            let mut cfg = base_config(Command::Diagnose, &common)?;
            cfg.models = models(&names)?;
            apply_estimation(&mut cfg, est);
            cfg
        }
    };
    run(&cfg)?;
    Ok(cfg.output_dir.join(MANIFEST_FILE))
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    match execute(Cli::parse()) {
        Ok(manifest) => {
            println!("{}", manifest.display());
            ExitCode::SUCCESS
        }
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}

fn exit_code(e: &Error) -> u8 {
    e.exit_code().clamp(1, 255) as u8
}
