//! Subcommands, run configuration and manifests.
//!
//! Every run stages its outputs in a scratch directory and moves them into
//! the output directory only after all of them have been written, so a
//! failed run leaves no partial artifacts. The manifest lists the full
//! configuration and the hash of every input and output; replaying it must
//! reproduce the outputs byte for byte.

use std::fs;
use std::io::BufWriter;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::alt_models::{
    det_trend_loglik, det_trend_residuals, simulate_det_trend, trend_basis, trend_values, write_trend_csv,
    DetTrendParams, Jacobian, TrendSpec,
};
use crate::equilibrium::{monthly_rate, solve_equilibrium, EquilibriumSolution, ModelParams, SolverConfig};
use crate::error::{Error, Result};
use crate::io::{content_hash, file_hash, load_price_csv, write_price_csv, HashedFile};
use crate::kalman::{kalman_filter, lgll_residuals, simulate_lgll, LgllParams};
use crate::model_eval::{
    chib_jeliazkov, price_elasticity, storage_cost_annual, CjConfig, ComparisonReport, ModelReport,
    NumeratorLikelihood,
};
use crate::particle_filter::{bpf, FilterConfig};
use crate::rng::{child_seed, Stream};
use crate::samplers::{
    mh_exact, pmmh, posterior_summary, Chain, DetTrendTarget, LgllTarget, McmcConfig, ParamSummary, PriorSpec,
    StorageTarget,
};
use crate::ssm::{simulate, PriceSeries, StorageSsm, DEFAULT_BURN_IN};

/// Environment variable that overrides the output directory.
pub const OUTPUT_DIR_ENV: &str = "STORAGE_SSM_OUT";
pub const MANIFEST_FILE: &str = "manifest.json";
const MANIFEST_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Command {
    Solve,
    Simulate,
    Fit,
    Compare,
    Diagnose,
}

impl Command {
    pub fn name(self) -> &'static str {
        match self {
            Command::Solve => "solve",
            Command::Simulate => "simulate",
            Command::Fit => "fit",
            Command::Compare => "compare",
            Command::Diagnose => "diagnose",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
pub enum ModelKind {
    #[serde(rename = "storage-ssm")]
    StorageSsm,
    #[serde(rename = "lgll")]
    Lgll,
    #[serde(rename = "linear")]
    Linear,
    #[serde(rename = "rcs3")]
    Rcs3,
    #[serde(rename = "rcs7")]
    Rcs7,
}

impl ModelKind {
    pub fn name(self) -> &'static str {
        match self {
            ModelKind::StorageSsm => "storage-ssm",
            ModelKind::Lgll => "lgll",
            ModelKind::Linear => "linear",
            ModelKind::Rcs3 => "rcs3",
            ModelKind::Rcs7 => "rcs7",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        Ok(match s {
            "storage-ssm" | "storage" => ModelKind::StorageSsm,
            "lgll" => ModelKind::Lgll,
            "linear" => ModelKind::Linear,
            "rcs3" => ModelKind::Rcs3,
            "rcs7" => ModelKind::Rcs7,
            _ => {
                return Err(Error::InvalidConfig(format!(
                    "unknown model {s:?}; expected storage-ssm, lgll, linear, rcs3 or rcs7"
                )))
            }
        })
    }

    pub fn trend_spec(self) -> Option<TrendSpec> {
        match self {
            ModelKind::Linear => Some(TrendSpec::linear()),
            ModelKind::Rcs3 => Some(TrendSpec::rcs(3).expect("valid knot count")),
            ModelKind::Rcs7 => Some(TrendSpec::rcs(7).expect("valid knot count")),
            _ => None,
        }
    }

    /// Has storage parameters `δ` and `b`.
    pub fn has_storage(self) -> bool {
        self != ModelKind::Lgll
    }
}

/// Parameter values for `solve` and `simulate`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ParamValues {
    pub v: Option<f64>,
    pub delta: Option<f64>,
    pub b: f64,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub trend_coefficients: Vec<f64>,
}

/// Everything a run depends on. The output directory is not part of the
/// recorded configuration, so a replay may write elsewhere.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunConfig {
    pub command: Command,
    pub models: Vec<ModelKind>,
    pub data: Option<PathBuf>,
    pub params: Option<ParamValues>,
    /// Simulated path length.
    pub t_len: usize,
    /// Simulated periods discarded before the kept path.
    pub sim_burn_in: usize,
    pub solver: SolverConfig,
    pub n_particles: usize,
    pub mcmc: McmcConfig,
    pub seed: u64,
    pub prior: PriorSpec,
    pub capacity: f64,
    pub annual_rate: f64,
    /// Monte Carlo points for deterministic-trend Pearson residuals.
    pub residual_mc: usize,
    /// Denominator draws of the marginal likelihood; the kept chain length when absent.
    pub cj_draws: Option<usize>,
    pub cj_numerator: NumeratorLikelihood,
    #[serde(skip)]
    pub output_dir: PathBuf,
}

impl RunConfig {
    pub fn new(command: Command) -> Self {
        RunConfig {
            command,
            models: vec![ModelKind::StorageSsm],
            data: None,
            params: None,
            t_len: 300,
            sim_burn_in: DEFAULT_BURN_IN,
            solver: SolverConfig::default(),
            n_particles: 10_000,
            mcmc: McmcConfig::default(),
            seed: 1,
            prior: PriorSpec::default(),
            capacity: 10.0,
            annual_rate: 0.05,
            residual_mc: 1000,
            cj_draws: None,
            cj_numerator: NumeratorLikelihood::Reuse,
            output_dir: PathBuf::from("out"),
        }
    }

    /// Applies the output-directory environment override.
    pub fn with_env_override(mut self) -> Self {
        if let Some(dir) = std::env::var_os(OUTPUT_DIR_ENV) {
            self.output_dir = PathBuf::from(dir);
        }
        self
    }

    pub fn validate(&self) -> Result<()> {
        let needs_data = matches!(self.command, Command::Fit | Command::Compare | Command::Diagnose);
        if needs_data {
            let path = self
                .data
                .as_ref()
                .ok_or_else(|| Error::InvalidConfig(format!("{} needs a data file", self.command.name())))?;
            if !path.is_file() {
                return Err(Error::InvalidConfig(format!("data file {} does not exist", path.display())));
            }
            if self.n_particles == 0 || self.mcmc.iterations == 0 || self.mcmc.burn_in == 0 {
                return Err(Error::InvalidConfig("particles, iterations and burn-in must be positive".into()));
            }
            self.mcmc.validate()?;
        }
        if matches!(self.command, Command::Solve | Command::Simulate) && self.params.is_none() {
            return Err(Error::InvalidConfig(format!("{} needs parameter values", self.command.name())));
        }
        if self.models.is_empty() {
            return Err(Error::InvalidConfig("no model given".into()));
        }
        if matches!(self.command, Command::Solve | Command::Simulate | Command::Fit) && self.models.len() != 1 {
            return Err(Error::InvalidConfig(format!("{} takes exactly one model", self.command.name())));
        }
        if self.command == Command::Solve && !self.models[0].has_storage() {
            return Err(Error::InvalidConfig("solve needs a storage model".into()));
        }
        if !(self.capacity > 0.0 && self.annual_rate > 0.0) {
            return Err(Error::InvalidConfig("capacity and interest rate must be positive".into()));
        }
        if self.command == Command::Simulate && self.t_len < 2 {
            return Err(Error::InvalidConfig("simulated paths need at least two periods".into()));
        }
        self.solver.validate()
    }

    fn model_params(&self, delta: f64, b: f64, v: f64) -> Result<ModelParams> {
        Ok(ModelParams::new(delta, b, v)?
            .with_capacity(self.capacity)
            .with_rate(monthly_rate(self.annual_rate)))
    }

    fn required_params(&self) -> Result<&ParamValues> {
        self.params
            .as_ref()
            .ok_or_else(|| Error::InvalidConfig("parameter values missing".into()))
    }

    fn param(v: Option<f64>, name: &str) -> Result<f64> {
        v.ok_or_else(|| Error::InvalidConfig(format!("parameter {name} missing")))
    }
}

/// Reproduction record of one run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub manifest_version: u32,
    pub tool: String,
    pub tool_version: String,
    pub config: RunConfig,
    pub inputs: Vec<HashedFile>,
    /// Paths relative to the output directory, excluding the manifest itself.
    pub outputs: Vec<HashedFile>,
}

/// Files produced by a subcommand before they are committed.
struct Staging {
    dir: PathBuf,
    files: Vec<String>,
}

impl Staging {
    fn new(output_dir: &Path, command: Command) -> Result<Self> {
        let dir = output_dir.join(format!(".incomplete-{}", command.name()));
        if dir.exists() {
            fs::remove_dir_all(&dir)?;
        }
        fs::create_dir_all(&dir)?;
        Ok(Staging { dir, files: Vec::new() })
    }

    fn create(&mut self, name: &str) -> Result<BufWriter<fs::File>> {
        self.files.push(name.to_string());
        Ok(BufWriter::new(fs::File::create(self.dir.join(name))?))
    }

    fn write_json<T: Serialize>(&mut self, name: &str, value: &T) -> Result<()> {
        let mut text = serde_json::to_string_pretty(value)?;
        text.push('\n');
        self.files.push(name.to_string());
        fs::write(self.dir.join(name), text)?;
        Ok(())
    }

    fn commit(self, output_dir: &Path) -> Result<Vec<HashedFile>> {
        let mut out = Vec::with_capacity(self.files.len());
        for name in &self.files {
            let from = self.dir.join(name);
            let bytes = fs::read(&from)?;
            fs::rename(&from, output_dir.join(name))?;
            out.push(HashedFile {
                path: name.clone(),
                sha256: content_hash(&bytes),
            });
        }
        fs::remove_dir_all(&self.dir)?;
        Ok(out)
    }

    fn abandon(self) {
        let _ = fs::remove_dir_all(&self.dir);
    }
}

/// Runs one subcommand and writes its outputs and manifest.
pub fn run(cfg: &RunConfig) -> Result<Manifest> {
    cfg.validate()?;
    fs::create_dir_all(&cfg.output_dir)?;
    let inputs = match &cfg.data {
        Some(p) if matches!(cfg.command, Command::Fit | Command::Compare | Command::Diagnose) => vec![HashedFile {
            path: p.to_string_lossy().into_owned(),
            sha256: file_hash(p)?,
        }],
        _ => Vec::new(),
    };
    let mut staging = Staging::new(&cfg.output_dir, cfg.command)?;
    let result = match cfg.command {
        Command::Solve => run_solve(cfg, &mut staging).map_err(|e| e.in_stage("solve")),
        Command::Simulate => run_simulate(cfg, &mut staging).map_err(|e| e.in_stage("simulate")),
        Command::Fit => run_fit(cfg, &mut staging),
        Command::Compare => run_compare(cfg, &mut staging, true),
        Command::Diagnose => run_compare(cfg, &mut staging, false),
    };
    if let Err(e) = result {
        staging.abandon();
        return Err(e);
    }
    let outputs = staging.commit(&cfg.output_dir)?;
    let manifest = Manifest {
        manifest_version: MANIFEST_VERSION,
        tool: env!("CARGO_PKG_NAME").to_string(),
        tool_version: env!("CARGO_PKG_VERSION").to_string(),
        config: cfg.clone(),
        inputs,
        outputs,
    };
    let mut text = serde_json::to_string_pretty(&manifest)?;
    text.push('\n');
    fs::write(cfg.output_dir.join(MANIFEST_FILE), text)?;
    Ok(manifest)
}

/// Re-runs a manifest into `output_dir` and checks every output hash.
pub fn replay(manifest_path: &Path, output_dir: &Path) -> Result<Manifest> {
    let recorded: Manifest = serde_json::from_slice(&fs::read(manifest_path)?)?;
    for input in &recorded.inputs {
        let now = file_hash(Path::new(&input.path))?;
        if now != input.sha256 {
            return Err(Error::ReplayMismatch(format!("input {} has changed", input.path)));
        }
    }
    let mut cfg = recorded.config.clone();
    cfg.output_dir = output_dir.to_path_buf();
    let fresh = run(&cfg)?;
    if fresh.outputs != recorded.outputs {
        let differing: Vec<&str> = recorded
            .outputs
            .iter()
            .filter(|o| !fresh.outputs.contains(o))
            .map(|o| o.path.as_str())
            .collect();
        return Err(Error::ReplayMismatch(format!("outputs differ: {}", differing.join(", "))));
    }
    Ok(fresh)
}

/// Solver summary written next to the equilibrium table.
#[derive(Debug, Clone, Serialize)]
struct SolveSummary {
    params: ModelParams,
    x_star: f64,
    x_star2: f64,
    iterations: usize,
    final_residual: f64,
}

fn solve_for(cfg: &RunConfig, delta: f64, b: f64, v: f64) -> Result<(ModelParams, EquilibriumSolution)> {
    let mp = cfg.model_params(delta, b, v)?;
    let sol = solve_equilibrium(&mp, &cfg.solver)?;
    Ok((mp, sol))
}

fn run_solve(cfg: &RunConfig, st: &mut Staging) -> Result<()> {
    let p = cfg.required_params()?;
    let delta = RunConfig::param(p.delta, "delta")?;
    let (mp, sol) = solve_for(cfg, delta, p.b, p.v.unwrap_or(1.0))?;
    sol.write_csv(st.create("equilibrium.csv")?, 50)?;
    st.write_json(
        "solution.json",
        &SolveSummary {
            params: mp,
            x_star: sol.x_star,
            x_star2: sol.x_star2,
            iterations: sol.iterations,
            final_residual: sol.final_residual,
        },
    )
}

fn run_simulate(cfg: &RunConfig, st: &mut Staging) -> Result<()> {
    let p = cfg.required_params()?;
    let kind = cfg.models[0];
    let seed = child_seed(cfg.seed, Stream::Simulation, 0);
    let prices = match kind {
        ModelKind::Lgll => {
            let lp = LgllParams::new(p.b, RunConfig::param(p.v, "v")?)?;
            simulate_lgll(&lp, cfg.t_len, seed)?
        }
        ModelKind::StorageSsm => {
            let delta = RunConfig::param(p.delta, "delta")?;
            let (mp, sol) = solve_for(cfg, delta, p.b, RunConfig::param(p.v, "v")?)?;
            let path = simulate(&mp, &sol, cfg.t_len, cfg.sim_burn_in, seed)?;
            path.write_csv(st.create("simulated.csv")?, &sol)?;
            path.to_price_series("simulated")?
        }
        _ => {
            let spec = kind.trend_spec().expect("deterministic trend");
            let delta = RunConfig::param(p.delta, "delta")?;
            let (_, sol) = solve_for(cfg, delta, p.b, 1.0)?;
            let dp = DetTrendParams {
                delta,
                b: p.b,
                trend_coefficients: p.trend_coefficients.clone(),
            };
            let path = simulate_det_trend(&dp, &spec, &sol, cfg.t_len, cfg.sim_burn_in, seed)?;
            path.write_csv(st.create("simulated.csv")?, &sol)?;
            path.to_price_series("simulated")?
        }
    };
    write_price_csv(st.create("prices.csv")?, &prices)
}

/// A fitted model with what later stages need.
pub struct FittedModel {
    pub kind: ModelKind,
    pub chain: Chain,
    pub summary: Vec<ParamSummary>,
    /// Posterior means of the original parameters.
    pub posterior_mean: Vec<f64>,
    pub seed: u64,
}

/// Per-model seed; keyed by the model so a model's results do not depend on
/// which other models run alongside it.
pub fn model_seed(seed: u64, kind: ModelKind) -> u64 {
    child_seed(seed, Stream::Experiment, kind as u64)
}

fn storage_target<'a>(cfg: &RunConfig, prices: &'a PriceSeries, seed: u64) -> StorageTarget<'a> {
    StorageTarget {
        prices,
        solver: cfg.solver,
        n_particles: cfg.n_particles,
        capacity: cfg.capacity,
        r: monthly_rate(cfg.annual_rate),
        seed,
    }
}

fn det_target<'a>(cfg: &RunConfig, prices: &'a PriceSeries, spec: TrendSpec) -> Result<DetTrendTarget<'a>> {
    let mut t = DetTrendTarget::new(prices, spec)?;
    t.solver = cfg.solver;
    t.capacity = cfg.capacity;
    t.r = monthly_rate(cfg.annual_rate);
    Ok(t)
}

pub fn fit_model(cfg: &RunConfig, kind: ModelKind, prices: &PriceSeries) -> Result<FittedModel> {
    let seed = model_seed(cfg.seed, kind);
    let chain = match kind {
        ModelKind::StorageSsm => pmmh(&storage_target(cfg, prices, seed), &cfg.prior, &cfg.mcmc, seed)?,
        ModelKind::Lgll => mh_exact(&LgllTarget { prices }, &cfg.prior, &cfg.mcmc, seed)?,
        _ => {
            let t = det_target(cfg, prices, kind.trend_spec().expect("deterministic trend"))?;
            mh_exact(&t, &cfg.prior, &cfg.mcmc, seed)?
        }
    };
    let summary = posterior_summary(&chain);
    let posterior_mean = summary.iter().map(|s| s.mean).collect();
    Ok(FittedModel {
        kind,
        chain,
        summary,
        posterior_mean,
        seed,
    })
}

/// Chain-level summary file.
#[derive(Debug, Clone, Serialize)]
struct FitSummary<'a> {
    model: &'static str,
    iterations: usize,
    burn_in: usize,
    acceptance_rate: f64,
    failed_candidates: usize,
    parameters: &'a [ParamSummary],
}

fn fit_summary(f: &FittedModel) -> FitSummary<'_> {
    FitSummary {
        model: f.kind.name(),
        iterations: f.chain.len(),
        burn_in: f.chain.burn_in,
        acceptance_rate: f.chain.acceptance_rate(),
        failed_candidates: f.chain.failed_candidates,
        parameters: &f.summary,
    }
}

/// Residuals and mean filtered supply at the posterior mean.
pub struct Evaluation {
    pub pearson: Vec<f64>,
    pub pit: Vec<f64>,
    /// `x̄`, the average filtered supply; storage models only.
    pub mean_state: Option<f64>,
}

/// Evaluates `f` at its posterior mean and optionally writes the filtered
/// trend table.
fn evaluate(cfg: &RunConfig, f: &FittedModel, prices: &PriceSeries, table: Option<&mut Staging>) -> Result<Evaluation> {
    let pm = &f.posterior_mean;
    match f.kind {
        ModelKind::StorageSsm => {
            let (mp, sol) = solve_for(cfg, pm[1], pm[2], pm[0])?;
            let model = StorageSsm::new(mp, sol)?;
            let mut fc = FilterConfig::full(cfg.n_particles);
            fc.store_history = false;
            let out = bpf(&model, prices, &fc, child_seed(f.seed, Stream::FilterSeed, u64::MAX), &[])?;
            if let Some(st) = table {
                out.write_csv(st.create("filtered.csv")?, prices)?;
            }
            let x_bar = out.filtered_state.iter().sum::<f64>() / out.filtered_state.len() as f64;
            Ok(Evaluation {
                pearson: out.pearson,
                pit: out.pit,
                mean_state: Some(x_bar),
            })
        }
        ModelKind::Lgll => {
            let lp = LgllParams::new(pm[1], pm[0])?;
            if let Some(st) = table {
                let kf = kalman_filter(&lp, prices)?;
                write_trend_csv(st.create("filtered.csv")?, prices, &kf.filtered_mean)?;
            }
            let r = lgll_residuals(&lp, prices)?;
            Ok(Evaluation {
                pearson: r.pearson,
                pit: r.pit,
                mean_state: None,
            })
        }
        _ => {
            let spec = f.kind.trend_spec().expect("deterministic trend");
            let (_, sol) = solve_for(cfg, pm[0], pm[1], 1.0)?;
            let dp = DetTrendTarget::det_params(pm);
            let fit = det_trend_loglik(&dp, &spec, &sol, prices, Jacobian::Include)?;
            if let Some(st) = table {
                let basis = trend_basis(&spec, prices.len())?;
                write_trend_csv(st.create("filtered.csv")?, prices, &trend_values(&basis, &dp.trend_coefficients)?)?;
            }
            let r = det_trend_residuals(
                &dp,
                &spec,
                &sol,
                prices,
                cfg.residual_mc,
                child_seed(f.seed, Stream::ResidualMc, 0),
            )?;
            let x_bar = fit.states.iter().sum::<f64>() / fit.states.len() as f64;
            Ok(Evaluation {
                pearson: r.pearson,
                pit: r.pit,
                mean_state: Some(x_bar),
            })
        }
    }
}

fn load_data(cfg: &RunConfig) -> Result<PriceSeries> {
    let path = cfg.data.as_ref().expect("validated");
    Ok(load_price_csv(path).map_err(|e| e.in_stage("load data"))?.series)
}

fn run_fit(cfg: &RunConfig, st: &mut Staging) -> Result<()> {
    let prices = load_data(cfg)?;
    let kind = cfg.models[0];
    let f = fit_model(cfg, kind, &prices).map_err(|e| e.in_stage("fit"))?;
    f.chain.write_csv(st.create("chain.csv")?)?;
    st.write_json("summary.json", &fit_summary(&f))?;
    evaluate(cfg, &f, &prices, Some(st)).map_err(|e| e.in_stage("filter"))?;
    Ok(())
}

/// Posterior means of `δ` and `b` for storage models.
fn delta_b(f: &FittedModel) -> Option<(f64, f64)> {
    match f.kind {
        ModelKind::StorageSsm => Some((f.posterior_mean[1], f.posterior_mean[2])),
        ModelKind::Lgll => None,
        _ => Some((f.posterior_mean[0], f.posterior_mean[1])),
    }
}

fn run_compare(cfg: &RunConfig, st: &mut Staging, marginals: bool) -> Result<()> {
    let prices = load_data(cfg)?;
    let mut reports = Vec::with_capacity(cfg.models.len());
    for &kind in &cfg.models {
        let stage = kind.name();
        let f = fit_model(cfg, kind, &prices).map_err(|e| e.in_stage(stage))?;
        f.chain.write_csv(st.create(&format!("chain_{}.csv", kind.name()))?)?;
        let mut report = ModelReport::new(kind.name());
        report.posterior = f.summary.clone();
        if marginals {
            let cj = CjConfig {
                l: cfg.cj_draws,
                numerator: cfg.cj_numerator,
            };
            let cj_seed = child_seed(f.seed, Stream::ChibJeliazkov, 0);
            let ml = match kind {
                ModelKind::StorageSsm => {
                    chib_jeliazkov(&f.chain, &storage_target(cfg, &prices, f.seed), &cfg.prior, &cj, cj_seed)
                }
                ModelKind::Lgll => chib_jeliazkov(&f.chain, &LgllTarget { prices: &prices }, &cfg.prior, &cj, cj_seed),
                _ => {
                    let t = det_target(cfg, &prices, kind.trend_spec().expect("deterministic trend"))?;
                    chib_jeliazkov(&f.chain, &t, &cfg.prior, &cj, cj_seed)
                }
            }
            .map_err(|e| e.in_stage(stage))?;
            report = report.with_marginal(ml);
        }
        let ev = evaluate(cfg, &f, &prices, None).map_err(|e| e.in_stage(stage))?;
        report = report.with_residuals(&ev.pit, &ev.pearson).map_err(|e| e.in_stage(stage))?;
        if let Some((delta, b)) = delta_b(&f) {
            report.storage_cost_pct = Some(storage_cost_annual(delta));
            report.elasticity = ev.mean_state.map(|x| price_elasticity(b, x));
        }
        reports.push(report);
    }
    let report = ComparisonReport::new(reports)?;
    let stem = if marginals { "comparison" } else { "diagnostics" };
    report.write_csv(st.create(&format!("{stem}.csv"))?)?;
    st.write_json(&format!("{stem}.json"), &report)
}
