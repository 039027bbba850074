//! Storage models with a deterministic trend.
//!
//! With `k_t` a known function of time the model becomes a nonlinear
//! autoregression in the log price. Each price inverts to a unique stock
//! level through the strictly decreasing `f`, so the likelihood is exact:
//! `z_t = f⁻¹(exp(p_t − k_t)) − (1 − δ) σ(x_{t−1})` is standard normal, and
//! the density of `p_t` carries the change-of-variables factor `|dz_t/dp_t|`.

use std::io::Write;

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::equilibrium::EquilibriumSolution;
use crate::error::{Error, Result};
use crate::rng::{stream_rng, Stream};
use crate::ssm::{PriceSeries, SimulatedPath, INITIAL_STATE_HEADROOM, INITIAL_STATE_LOW};
use crate::stats::{normal_log_pdf, std_normal_cdf, std_normal_quantile, LN_SQRT_2PI};

/// Weight of the quadratic penalty on stock levels clamped to the solver domain.
pub const CLAMP_PENALTY: f64 = 1e4;

/// Smallest `|d log f / dx|` used in the Jacobian, relative to `b`.
const MIN_SLOPE_REL: f64 = 1e-12;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum TrendKind {
    Stochastic,
    Linear,
    Rcs,
}

/// Trend specification. `knot_locations` are quantiles of the time index for
/// the interior knots of a restricted (natural) cubic spline.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrendSpec {
    pub kind: TrendKind,
    #[serde(default)]
    pub knot_locations: Vec<f64>,
}

impl TrendSpec {
    pub fn stochastic() -> Self {
        TrendSpec {
            kind: TrendKind::Stochastic,
            knot_locations: Vec::new(),
        }
    }

    pub fn linear() -> Self {
        TrendSpec {
            kind: TrendKind::Linear,
            knot_locations: Vec::new(),
        }
    }

    /// `knots` interior knots at the quantiles `i / (knots + 1)`: quartiles
    /// for 3 knots, eighths for 7.
    pub fn rcs(knots: usize) -> Result<Self> {
        let q = (1..=knots).map(|i| i as f64 / (knots + 1) as f64).collect();
        Self::rcs_at(q)
    }

    pub fn rcs_at(knot_locations: Vec<f64>) -> Result<Self> {
        let spec = TrendSpec {
            kind: TrendKind::Rcs,
            knot_locations,
        };
        spec.validate()?;
        Ok(spec)
    }

    /// Parses `stochastic`, `linear` or `rcsK`.
    pub fn parse(name: &str) -> Result<Self> {
        match name {
            "stochastic" => Ok(Self::stochastic()),
            "linear" => Ok(Self::linear()),
            s if s.starts_with("rcs") => {
                let k: usize = s[3..]
                    .parse()
                    .map_err(|_| Error::InvalidConfig(format!("bad trend name '{name}'")))?;
                Self::rcs(k)
            }
            _ => Err(Error::InvalidConfig(format!(
                "unknown trend '{name}', expected stochastic, linear or rcsK"
            ))),
        }
    }

    pub fn name(&self) -> String {
        match self.kind {
            TrendKind::Stochastic => "stochastic".into(),
            TrendKind::Linear => "linear".into(),
            TrendKind::Rcs => format!("rcs{}", self.knot_locations.len()),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.kind == TrendKind::Rcs {
            if self.knot_locations.is_empty() {
                return Err(Error::InvalidConfig("a spline trend needs at least one knot".into()));
            }
            let ok_range = self.knot_locations.iter().all(|&q| q > 0.0 && q < 1.0);
            let increasing = self.knot_locations.windows(2).all(|w| w[0] < w[1]);
            if !ok_range || !increasing {
                return Err(Error::InvalidConfig(
                    "knot locations must be strictly increasing inside (0, 1)".into(),
                ));
            }
        }
        Ok(())
    }

    /// Number of trend coefficients.
    pub fn n_coefficients(&self) -> usize {
        match self.kind {
            TrendKind::Stochastic => 0,
            TrendKind::Linear => 2,
            TrendKind::Rcs => self.knot_locations.len() + 2,
        }
    }

    pub fn is_deterministic(&self) -> bool {
        self.kind != TrendKind::Stochastic
    }

    /// All spline knots on the time index `1..=T`: boundary knots 1 and `T`
    /// plus the nearest-rank quantiles `⌈q T⌉`.
    pub fn knot_times(&self, t_len: usize) -> Result<Vec<f64>> {
        let mut knots = vec![1.0];
        for &q in &self.knot_locations {
            knots.push(((q * t_len as f64).ceil()).clamp(1.0, t_len as f64));
        }
        knots.push(t_len as f64);
        if knots.windows(2).any(|w| w[0] >= w[1]) {
            return Err(Error::InvalidParameter(format!(
                "{} knots are not distinct on a series of length {t_len}",
                self.knot_locations.len()
            )));
        }
        Ok(knots)
    }
}

/// Design matrix of the trend, one row per period `t = 1..=T`.
///
/// Linear: `(1, t)`. Spline: natural cubic spline basis with intercept,
/// `(1, u, d_1(u) − d_{K−1}(u), …)` in `u = t / T`, where
/// `d_j(u) = [(u − ξ_j)_+³ − (u − ξ_K)_+³] / (ξ_K − ξ_j)` and `ξ` are all `K`
/// knots. Beyond the boundary knots every column is linear.
pub fn trend_basis(spec: &TrendSpec, t_len: usize) -> Result<DMatrix<f64>> {
    spec.validate()?;
    match spec.kind {
        TrendKind::Stochastic => Err(Error::InvalidConfig("a stochastic trend has no basis".into())),
        TrendKind::Linear => Ok(DMatrix::from_fn(t_len, 2, |i, j| if j == 0 { 1.0 } else { (i + 1) as f64 })),
        TrendKind::Rcs => {
            let scale = t_len as f64;
            let knots: Vec<f64> = spec.knot_times(t_len)?.iter().map(|k| k / scale).collect();
            Ok(DMatrix::from_fn(t_len, knots.len(), |i, j| {
                natural_spline_column(&knots, j, (i + 1) as f64 / scale)
            }))
        }
    }
}

fn natural_spline_column(knots: &[f64], j: usize, u: f64) -> f64 {
    let k = knots.len();
    let d = |m: usize| {
        let pos = |a: f64| a.max(0.0).powi(3);
        (pos(u - knots[m]) - pos(u - knots[k - 1])) / (knots[k - 1] - knots[m])
    };
    match j {
        0 => 1.0,
        1 => u,
        _ => d(j - 2) - d(k - 2),
    }
}

/// Trend values `k_t = Σ_g γ_g B_g(t)`.
pub fn trend_values(basis: &DMatrix<f64>, coefficients: &[f64]) -> Result<Vec<f64>> {
    if coefficients.len() != basis.ncols() {
        return Err(Error::InvalidParameter(format!(
            "expected {} trend coefficients, got {}",
            basis.ncols(),
            coefficients.len()
        )));
    }
    let g = DVector::from_column_slice(coefficients);
    Ok((basis * g).iter().copied().collect())
}

/// Least-squares fit of the log prices on the trend basis.
pub fn ols_trend(spec: &TrendSpec, prices: &PriceSeries) -> Result<Vec<f64>> {
    let x = trend_basis(spec, prices.len())?;
    let y = DVector::from_column_slice(&prices.log_prices);
    let fit = x
        .clone()
        .svd(true, true)
        .solve(&y, 1e-12)
        .map_err(|e| Error::Numerical(format!("trend least squares failed: {e}")))?;
    Ok(fit.iter().copied().collect())
}

/// Structural parameters and trend coefficients.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DetTrendParams {
    pub delta: f64,
    pub b: f64,
    pub trend_coefficients: Vec<f64>,
}

/// Whether the likelihood includes `log |dz_t / dp_t|`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Jacobian {
    #[default]
    Include,
    /// `Σ log φ(z_t)` alone.
    Omit,
}

/// Likelihood of one series and the quantities it is built from.
#[derive(Debug, Clone, PartialEq)]
pub struct DetTrendFit {
    pub log_lik: f64,
    /// Trend `k_t`, `t = 1..T`.
    pub trend: Vec<f64>,
    /// Inverted stock levels `x_t`, `t = 1..T`.
    pub states: Vec<f64>,
    /// Implied supply shocks `z_t`, `t = 2..T`.
    pub shocks: Vec<f64>,
    /// Periods whose stock level was clamped to the solver domain.
    pub clamped: usize,
}

fn check_solution(params: &DetTrendParams, sol: &EquilibriumSolution) -> Result<()> {
    if sol.params.delta != params.delta || sol.params.b != params.b {
        return Err(Error::InvalidParameter(
            "equilibrium was solved for different structural parameters".into(),
        ));
    }
    Ok(())
}

/// Exact log-likelihood of `p_{2:T}` given `p_1`.
pub fn det_trend_loglik(
    params: &DetTrendParams,
    spec: &TrendSpec,
    sol: &EquilibriumSolution,
    prices: &PriceSeries,
    jacobian: Jacobian,
) -> Result<DetTrendFit> {
    let basis = trend_basis(spec, prices.len())?;
    det_trend_loglik_with_basis(params, &basis, sol, prices, jacobian)
}

/// [`det_trend_loglik`] with a precomputed design matrix.
pub fn det_trend_loglik_with_basis(
    params: &DetTrendParams,
    basis: &DMatrix<f64>,
    sol: &EquilibriumSolution,
    prices: &PriceSeries,
    jacobian: Jacobian,
) -> Result<DetTrendFit> {
    check_solution(params, sol)?;
    let trend = trend_values(basis, &params.trend_coefficients)?;
    let p = &prices.log_prices;
    let one_minus_delta = 1.0 - params.delta;
    let min_slope = MIN_SLOPE_REL * params.b;

    let mut log_lik = 0.0;
    let mut clamped = 0;
    let mut states = Vec::with_capacity(p.len());
    for (pt, kt) in p.iter().zip(&trend) {
        let inv = sol.inverse_price((pt - kt).exp());
        if inv.clamped() {
            clamped += 1;
            log_lik -= 0.5 * CLAMP_PENALTY * inv.clamp_distance.powi(2);
        }
        states.push(inv.x);
    }
    let mut shocks = Vec::with_capacity(p.len().saturating_sub(1));
    for t in 1..p.len() {
        let z = states[t] - one_minus_delta * sol.storage_policy(states[t - 1]);
        log_lik += normal_log_pdf(z, 0.0, 1.0);
        if jacobian == Jacobian::Include {
            // dz/dp = 1 / (d log f / dx)
            log_lik -= sol.log_price_slope(states[t]).abs().max(min_slope).ln();
        }
        shocks.push(z);
    }
    Ok(DetTrendFit {
        log_lik,
        trend,
        states,
        shocks,
        clamped,
    })
}

/// Pearson and PIT residuals for `t = 2..T`.
#[derive(Debug, Clone, PartialEq)]
pub struct DetTrendResiduals {
    pub pearson: Vec<f64>,
    /// Exactly the implied shocks `z_t`.
    pub pit: Vec<f64>,
}

/// Residuals of the deterministic-trend model.
///
/// The PIT residual is the implied shock itself, because the predictive
/// distribution of `p_t` is a monotone transform of `z_t`. The Pearson
/// residual standardizes `p_t` by the mean and standard deviation of
/// `k_t + log f((1 − δ) σ(x_{t−1}) + Z)`. The stock-out and full-capacity
/// parts of those moments are exact and the rest uses `n_mc` stratified
/// Monte Carlo draws.
pub fn det_trend_residuals(
    params: &DetTrendParams,
    spec: &TrendSpec,
    sol: &EquilibriumSolution,
    prices: &PriceSeries,
    n_mc: usize,
    seed: u64,
) -> Result<DetTrendResiduals> {
    if n_mc < 2 {
        return Err(Error::InvalidParameter("need at least 2 Monte Carlo draws".into()));
    }
    let fit = det_trend_loglik(params, spec, sol, prices, Jacobian::Include)?;
    let p = &prices.log_prices;
    let mut pearson = Vec::with_capacity(p.len() - 1);
    for t in 1..p.len() {
        let m = (1.0 - params.delta) * sol.storage_policy(fit.states[t - 1]);
        let offset: f64 = stream_rng(seed, Stream::ResidualMc, t as u64, 0).random();
        let (mean, sd) = predictive_moments(sol, fit.trend[t], m, n_mc, offset);
        pearson.push((p[t] - mean) / sd);
    }
    Ok(DetTrendResiduals {
        pearson,
        pit: fit.shocks,
    })
}

/// `(E[g 1_A], E[g² 1_A])` for `g = a + c Z` over `A = {Z < lo}` or `{Z > hi}`.
fn linear_tail_moments(a: f64, c: f64, bound: f64, upper: bool) -> (f64, f64) {
    let pdf = (-0.5 * bound * bound - LN_SQRT_2PI).exp();
    // P(A), E[Z 1_A], E[Z² 1_A]
    let (p0, p1, p2) = if upper {
        let tail = std_normal_cdf(-bound);
        (tail, pdf, tail + bound * pdf)
    } else {
        let tail = std_normal_cdf(bound);
        (tail, -pdf, tail - bound * pdf)
    };
    (a * p0 + c * p1, a * a * p0 + 2.0 * a * c * p1 + c * c * p2)
}

/// Mean and standard deviation of `g(Z) = k + log f(m + Z)`.
///
/// Below `x*` and above `x**` the log price is linear in `Z`, so those parts
/// are exact truncated-normal moments. The middle is integrated by `n`
/// stratified draws `Φ⁻¹(Φ(lo) + (j + v)(Φ(hi) − Φ(lo)) / S)`, `S = ⌈n/2⌉`,
/// with `v ∈ {u, 1 − u}` for one uniform `u`. The antithetic pair cancels the
/// first-order error of the shifted rule.
fn predictive_moments(sol: &EquilibriumSolution, k: f64, m: f64, n: usize, u: f64) -> (f64, f64) {
    let pr = &sol.params;
    let base = k + pr.demand_scale.ln();
    let (lo, hi) = (sol.x_star - m, sol.x_star2 - m);
    let (l1, l2) = linear_tail_moments(base - pr.b * m, -pr.b, lo, false);
    let (u1, u2) = linear_tail_moments(base - pr.b * (m - pr.capacity), -pr.b, hi, true);
    let (c_lo, c_hi) = (std_normal_cdf(lo), std_normal_cdf(hi));
    let width = c_hi - c_lo;
    let strata = n.div_ceil(2);
    let (mut s1, mut s2) = (0.0, 0.0);
    for j in 0..strata {
        for v in [u, 1.0 - u] {
            let q = c_lo + (j as f64 + v) / strata as f64 * width;
            let z = std_normal_quantile(q).clamp(lo, hi);
            let g = k + sol.log_price_fn(m + z);
            s1 += g;
            s2 += g * g;
        }
    }
    let draws = (2 * strata) as f64;
    let mean = l1 + u1 + width * s1 / draws;
    let second = l2 + u2 + width * s2 / draws;
    (mean, (second - mean * mean).max(0.0).sqrt())
}

/// Simulates `T` periods after `burn_in`, with `k_t` from the trend basis.
/// The stock process starts from `x_0 ~ U(−2, C + 2)`.
pub fn simulate_det_trend(
    params: &DetTrendParams,
    spec: &TrendSpec,
    sol: &EquilibriumSolution,
    t_len: usize,
    burn_in: usize,
    seed: u64,
) -> Result<SimulatedPath> {
    check_solution(params, sol)?;
    let basis = trend_basis(spec, t_len)?;
    let trend = trend_values(&basis, &params.trend_coefficients)?;
    let mut rng = stream_rng(seed, Stream::Simulation, 2, 0);
    let mut x = rng.random_range(INITIAL_STATE_LOW..sol.params.capacity + INITIAL_STATE_HEADROOM);
    let mut out = SimulatedPath {
        log_prices: Vec::with_capacity(t_len),
        states: Vec::with_capacity(t_len),
        trend: trend.clone(),
        trend_shocks: vec![0.0; t_len],
        supply_shocks: Vec::with_capacity(t_len),
        seed,
    };
    for i in 0..burn_in + t_len {
        let z: f64 = rng.sample(StandardNormal);
        x = (1.0 - params.delta) * sol.storage_policy(x) + z;
        if i >= burn_in {
            let t = i - burn_in;
            out.states.push(x);
            out.supply_shocks.push(z);
            out.log_prices.push(trend[t] + sol.log_price_fn(x));
        }
    }
    Ok(out)
}

/// Writes `t,date,log_price,trend`.
pub fn write_trend_csv<W: Write>(out: W, prices: &PriceSeries, trend: &[f64]) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(["t", "date", "log_price", "trend"])?;
    for (t, (p, k)) in prices.log_prices.iter().zip(trend).enumerate() {
        w.write_record([
            (t + 1).to_string(),
            prices.dates[t].to_string(),
            p.to_string(),
            k.to_string(),
        ])?;
    }
    w.flush()?;
    Ok(())
}
