//! Oracles shared by the integration and acceptance tests. They are written
//! independently of the library's own quadrature and likelihood code.

#![allow(dead_code)]

use statrs::distribution::{ContinuousCDF, Normal};
use storage_ssm::equilibrium::EquilibriumSolution;
use storage_ssm::kalman::{kalman_loglik, LgllParams};
use storage_ssm::samplers::{log_prior, ParamLayout, PriorSpec};
use storage_ssm::ssm::PriceSeries;

/// `β E[f((1 − δ) s + z)]` over the solver's shock interval: the exponential
/// regimes in closed form through statrs' normal cdf, the band between the
/// kinks by composite Simpson with `n` subintervals.
pub fn expected_price(s: &EquilibriumSolution, carried: f64, n: usize) -> f64 {
    let (lo, hi) = s.config.quad_range;
    let p = &s.params;
    let b = p.b;
    let nd = Normal::new(0.0, 1.0).unwrap();
    let tail = |l: f64, u: f64, shift: f64| {
        let mass = if l + b > 0.0 {
            nd.sf(l + b) - nd.sf(u + b)
        } else {
            nd.cdf(u + b) - nd.cdf(l + b)
        };
        p.demand_scale * (0.5 * b * b - b * (carried - shift)).exp() * mass
    };
    let k1 = (s.x_star - carried).clamp(lo, hi);
    let k2 = (s.x_star2 - carried).clamp(lo, hi);
    let mut acc = tail(lo, k1, 0.0) + tail(k2, hi, p.capacity);
    let n = n.max(2).next_multiple_of(2);
    let h = (k2 - k1) / n as f64;
    let big = |z: f64| (-0.5 * z * z).exp() / (2.0 * std::f64::consts::PI).sqrt() * s.price_fn(carried + z);
    if h > 0.0 {
        for i in 0..=n {
            let w = if i == 0 || i == n {
                1.0
            } else if i % 2 == 1 {
                4.0
            } else {
                2.0
            };
            acc += w * h / 3.0 * big(k1 + h * i as f64);
        }
    }
    p.beta() * acc
}

/// Largest violation over the grid of the storage condition
/// `P(x − s) = β E f((1 − δ) s + z)`, written as `s = x + log(g/K)/b`.
pub fn max_grid_residual(s: &EquilibriumSolution) -> f64 {
    let p = &s.params;
    s.grid
        .iter()
        .zip(&s.s_values)
        .map(|(&x, &sv)| {
            let g = expected_price(s, (1.0 - p.delta) * sv, s.config.quad_nodes);
            (sv - (x + (g / p.demand_scale).ln() / p.b)).abs()
        })
        .fold(0.0, f64::max)
}

/// Largest `|f − f̄|` on a fine grid strictly inside `(x*, x**)`.
pub fn max_arbitrage_gap(s: &EquilibriumSolution) -> f64 {
    (1..1000)
        .map(|i| {
            let x = s.x_star + (s.x_star2 - s.x_star) * i as f64 / 1000.0;
            (s.price_fn(x) - s.expected_next_price(x)).abs()
        })
        .fold(0.0, f64::max)
}

/// Largest `|f − f̄| / f` on the same grid.
pub fn max_relative_arbitrage_gap(s: &EquilibriumSolution) -> f64 {
    (1..1000)
        .map(|i| {
            let x = s.x_star + (s.x_star2 - s.x_star) * i as f64 / 1000.0;
            let f = s.price_fn(x);
            (f - s.expected_next_price(x)).abs() / f
        })
        .fold(0.0, f64::max)
}

/// Local-level log marginal likelihood by the trapezoid rule on an `n × n`
/// grid over `(log v, log b)`, centred at `centre` with half-widths `half`.
pub fn lgll_log_marginal_quadrature(
    prices: &PriceSeries,
    prior: &PriorSpec,
    centre: [f64; 2],
    half: [f64; 2],
    n: usize,
) -> f64 {
    let h = [2.0 * half[0] / (n - 1) as f64, 2.0 * half[1] / (n - 1) as f64];
    let mut logs = Vec::with_capacity(n * n);
    for i in 0..n {
        for j in 0..n {
            let th = [centre[0] - half[0] + i as f64 * h[0], centre[1] - half[1] + j as f64 * h[1]];
            let ll = kalman_loglik(&LgllParams::new(th[1].exp(), th[0].exp()).unwrap(), prices).unwrap();
            let edge = |k: usize| if k == 0 || k == n - 1 { 0.5f64 } else { 1.0 };
            logs.push(ll + log_prior(ParamLayout::Lgll, &th, prior) + (edge(i) * edge(j)).ln());
        }
    }
    let m = logs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    m + logs.iter().map(|v| (v - m).exp()).sum::<f64>().ln() + (h[0] * h[1]).ln()
}

pub fn mean_sd(x: &[f64]) -> (f64, f64) {
    let n = x.len() as f64;
    let m = x.iter().sum::<f64>() / n;
    (m, (x.iter().map(|v| (v - m).powi(2)).sum::<f64>() / (n - 1.0)).sqrt())
}
