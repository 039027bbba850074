//! The stochastic-trend storage model as a state-space model.
//!
//! ```text
//! p_t = k_t + log f(x_t)            k_t = k_{t−1} + ε_t,  ε_t ~ N(0, v²)
//! x_t = (1−δ) σ(x_{t−1}) + z_t      z_t ~ N(0, 1)
//! ```
//!
//! Eliminating the trend gives the measurement density
//! `p_t | p_{t−1}, x_{t−1:t} ~ N(p_{t−1} + log f(x_t) − log f(x_{t−1}), v²)`.

use std::fmt;
use std::io::Write;
use std::str::FromStr;

use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::equilibrium::{EquilibriumSolution, ModelParams};
use crate::error::{Error, Result};
use crate::rng::{stream_rng, Stream};
use crate::stats::normal_log_pdf;

/// Periods discarded before a simulated path is recorded.
pub const DEFAULT_BURN_IN: usize = 500;

/// A calendar month.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct YearMonth {
    pub year: i32,
    pub month: u32,
}

impl YearMonth {
    pub fn new(year: i32, month: u32) -> Result<Self> {
        if !(1..=12).contains(&month) {
            return Err(Error::InvalidParameter(format!("month {month} out of range")));
        }
        Ok(YearMonth { year, month })
    }

    /// Months since year 0, so consecutive months differ by one.
    pub fn index(self) -> i64 {
        self.year as i64 * 12 + (self.month as i64 - 1)
    }

    pub fn from_index(i: i64) -> Self {
        YearMonth {
            year: i.div_euclid(12) as i32,
            month: (i.rem_euclid(12) + 1) as u32,
        }
    }

    pub fn succ(self) -> Self {
        Self::from_index(self.index() + 1)
    }
}

impl fmt::Display for YearMonth {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{:04}-{:02}", self.year, self.month)
    }
}

impl FromStr for YearMonth {
    type Err = String;

    /// Accepts `YYYY-MM`, and `YYYY-MM-DD` with the day ignored.
    fn from_str(s: &str) -> std::result::Result<Self, String> {
        let mut parts = s.trim().split('-');
        let year = parts.next().and_then(|y| y.parse::<i32>().ok());
        let month = parts.next().and_then(|m| m.parse::<u32>().ok());
        let day_ok = match parts.next() {
            None => true,
            Some(d) => d.parse::<u32>().is_ok_and(|d| (1..=31).contains(&d)),
        };
        match (year, month) {
            (Some(year), Some(month)) if day_ok && parts.next().is_none() && (1..=12).contains(&month) => {
                Ok(YearMonth { year, month })
            }
            _ => Err(format!("expected a YYYY-MM date, got {s:?}")),
        }
    }
}

/// Monthly log prices of one commodity.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PriceSeries {
    pub dates: Vec<YearMonth>,
    pub log_prices: Vec<f64>,
    pub label: String,
}

/// A missing stretch of months between two consecutive observations.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub struct MonthGap {
    /// Position of the observation after the gap.
    pub position: usize,
    pub before: YearMonth,
    pub after: YearMonth,
}

impl PriceSeries {
    /// Validated series: at least two finite observations on strictly
    /// increasing months. Gaps are allowed and reported by [`Self::gaps`].
    pub fn new(dates: Vec<YearMonth>, log_prices: Vec<f64>, label: impl Into<String>) -> Result<Self> {
        if dates.len() != log_prices.len() {
            return Err(Error::InvalidParameter(format!(
                "{} dates for {} prices",
                dates.len(),
                log_prices.len()
            )));
        }
        if log_prices.len() < 2 {
            return Err(Error::InvalidParameter("a price series needs at least two observations".into()));
        }
        if let Some(i) = log_prices.iter().position(|p| !p.is_finite()) {
            return Err(Error::InvalidParameter(format!("log price {i} is not finite")));
        }
        if let Some(i) = dates.windows(2).position(|w| w[1] <= w[0]) {
            return Err(Error::InvalidParameter(format!(
                "dates not strictly increasing at position {}",
                i + 1
            )));
        }
        Ok(PriceSeries {
            dates,
            log_prices,
            label: label.into(),
        })
    }

    /// Series on consecutive months starting January 2000, for simulated data.
    pub fn from_log_prices(log_prices: Vec<f64>, label: impl Into<String>) -> Result<Self> {
        let start = YearMonth { year: 2000, month: 1 }.index();
        let dates = (0..log_prices.len() as i64).map(|i| YearMonth::from_index(start + i)).collect();
        Self::new(dates, log_prices, label)
    }

    pub fn len(&self) -> usize {
        self.log_prices.len()
    }

    pub fn is_empty(&self) -> bool {
        self.log_prices.is_empty()
    }

    pub fn gaps(&self) -> Vec<MonthGap> {
        self.dates
            .windows(2)
            .enumerate()
            .filter(|(_, w)| w[1].index() - w[0].index() > 1)
            .map(|(i, w)| MonthGap {
                position: i + 1,
                before: w[0],
                after: w[1],
            })
            .collect()
    }
}

/// A scalar-state model with a random-walk trend in the log price, as
/// consumed by the particle filter.
///
/// The measurement density is fixed by the trend structure:
/// `p_t | p_{t−1}, x_{t−1:t} ~ N(p_{t−1} + h(x_t) − h(x_{t−1}), v²)` with
/// `h` = [`Self::log_price_component`] and `v` = [`Self::trend_sd`].
pub trait StateSpaceModel: Sync {
    /// Draws `x_1` from the initial distribution.
    fn sample_initial<R: Rng + ?Sized>(&self, rng: &mut R) -> f64;

    /// Mean of `x_t` given `x_{t−1}`; the transition noise is standard normal.
    fn transition_mean(&self, x_prev: f64) -> f64;

    /// State-dependent part of the log price, `log f(x)` for the storage model.
    fn log_price_component(&self, x: f64) -> f64;

    /// Standard deviation `v` of the trend innovations.
    fn trend_sd(&self) -> f64;

    fn sample_transition<R: Rng + ?Sized>(&self, x_prev: f64, rng: &mut R) -> f64 {
        let z: f64 = rng.sample(StandardNormal);
        self.transition_mean(x_prev) + z
    }

    fn transition_log_density(&self, x: f64, x_prev: f64) -> f64 {
        normal_log_pdf(x, self.transition_mean(x_prev), 1.0)
    }

    fn transition_density(&self, x: f64, x_prev: f64) -> f64 {
        self.transition_log_density(x, x_prev).exp()
    }

    /// Measurement log density given precomputed `h(x_t)` and `h(x_{t−1})`.
    #[inline]
    fn measurement_log_density_h(&self, p: f64, p_prev: f64, h: f64, h_prev: f64) -> f64 {
        normal_log_pdf(p, p_prev + h - h_prev, self.trend_sd())
    }

    fn measurement_log_density(&self, p: f64, p_prev: f64, x: f64, x_prev: f64) -> f64 {
        self.measurement_log_density_h(p, p_prev, self.log_price_component(x), self.log_price_component(x_prev))
    }

    fn measurement_density(&self, p: f64, p_prev: f64, x: f64, x_prev: f64) -> f64 {
        self.measurement_log_density(p, p_prev, x, x_prev).exp()
    }
}

/// Lower end of the uniform initial-state support; the upper end is `C + 2`.
pub const INITIAL_STATE_LOW: f64 = -2.0;
/// Width beyond the capacity of the uniform initial-state support.
pub const INITIAL_STATE_HEADROOM: f64 = 2.0;

/// The storage model with stochastic trend for given parameters and their
/// solved equilibrium.
#[derive(Debug, Clone)]
pub struct StorageSsm {
    pub params: ModelParams,
    pub solution: EquilibriumSolution,
}

impl StorageSsm {
    /// Pairs the trend scale `v` in `params` with an equilibrium solved for
    /// the same structural parameters.
    pub fn new(params: ModelParams, solution: EquilibriumSolution) -> Result<Self> {
        params.validate()?;
        let s = &solution.params;
        if s.delta != params.delta
            || s.b != params.b
            || s.capacity != params.capacity
            || s.r != params.r
            || s.demand_scale != params.demand_scale
        {
            return Err(Error::InvalidParameter(
                "equilibrium was solved for different structural parameters".into(),
            ));
        }
        Ok(StorageSsm { params, solution })
    }

    /// Initial-state support `(−2, C + 2)`.
    pub fn initial_support(&self) -> (f64, f64) {
        (INITIAL_STATE_LOW, self.params.capacity + INITIAL_STATE_HEADROOM)
    }
}

impl StateSpaceModel for StorageSsm {
    fn sample_initial<R: Rng + ?Sized>(&self, rng: &mut R) -> f64 {
        let (lo, hi) = self.initial_support();
        rng.random_range(lo..hi)
    }

    #[inline]
    fn transition_mean(&self, x_prev: f64) -> f64 {
        (1.0 - self.params.delta) * self.solution.storage_policy(x_prev)
    }

    #[inline]
    fn log_price_component(&self, x: f64) -> f64 {
        self.solution.log_price_fn(x)
    }

    fn trend_sd(&self) -> f64 {
        self.params.v
    }
}

/// A simulated realization of the storage model.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimulatedPath {
    pub log_prices: Vec<f64>,
    /// Available stocks `x_t`.
    pub states: Vec<f64>,
    /// Trend `k_t`.
    pub trend: Vec<f64>,
    /// Trend innovations `ε_t`.
    pub trend_shocks: Vec<f64>,
    /// Supply shocks `z_t`.
    pub supply_shocks: Vec<f64>,
    pub seed: u64,
}

/// Simulates `burn_in + t_len` periods from `x_0 ~ U(−2, C + 2)` and
/// `k_0 = 0`, keeping the last `t_len`.
///
/// `v = 0` is accepted and gives a constant trend.
pub fn simulate(
    params: &ModelParams,
    sol: &EquilibriumSolution,
    t_len: usize,
    burn_in: usize,
    seed: u64,
) -> Result<SimulatedPath> {
    params.validate_structural()?;
    if !(params.v >= 0.0 && params.v.is_finite()) {
        return Err(Error::InvalidParameter("v must be nonnegative".into()));
    }
    if t_len == 0 {
        return Err(Error::InvalidParameter("path length must be positive".into()));
    }
    let mut rng = stream_rng(seed, Stream::Simulation, 0, 0);
    let mut x = rng.random_range(INITIAL_STATE_LOW..params.capacity + INITIAL_STATE_HEADROOM);
    let mut k = 0.0;
    let mut path = SimulatedPath {
        log_prices: Vec::with_capacity(t_len),
        states: Vec::with_capacity(t_len),
        trend: Vec::with_capacity(t_len),
        trend_shocks: Vec::with_capacity(t_len),
        supply_shocks: Vec::with_capacity(t_len),
        seed,
    };
    for step in 0..burn_in + t_len {
        let eps = params.v * rng.sample::<f64, _>(StandardNormal);
        let z: f64 = rng.sample(StandardNormal);
        k += eps;
        x = (1.0 - params.delta) * sol.storage_policy(x) + z;
        if step >= burn_in {
            path.log_prices.push(k + sol.log_price_fn(x));
            path.states.push(x);
            path.trend.push(k);
            path.trend_shocks.push(eps);
            path.supply_shocks.push(z);
        }
    }
    Ok(path)
}

impl SimulatedPath {
    pub fn len(&self) -> usize {
        self.log_prices.len()
    }

    pub fn is_empty(&self) -> bool {
        self.log_prices.is_empty()
    }

    pub fn to_price_series(&self, label: impl Into<String>) -> Result<PriceSeries> {
        PriceSeries::from_log_prices(self.log_prices.clone(), label)
    }

    /// Writes `t,log_price,k,x,regime` rows with `t` starting at 1.
    pub fn write_csv<W: Write>(&self, out: W, sol: &EquilibriumSolution) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        w.write_record(["t", "log_price", "k", "x", "regime"])?;
        for t in 0..self.len() {
            w.write_record([
                (t + 1).to_string(),
                self.log_prices[t].to_string(),
                self.trend[t].to_string(),
                self.states[t].to_string(),
                sol.regime(self.states[t]).label().to_string(),
            ])?;
        }
        w.flush()?;
        Ok(())
    }
}
