//! Rational-expectations equilibrium of the bounded-capacity storage model.
//!
//! The equilibrium is represented by the storage policy `σ(x)`: zero below the
//! left kink `x*`, the capacity `C` above the right kink `x**`, and an
//! interpolant `s(x)` on a uniform grid in between. The price function
//! follows as `f(x) = P(x − σ(x))` with inverse demand `P(x) = K·exp(−b·x)`.
//!
//! The solver iterates on the policy: given the current policy it updates both
//! kink points, re-lays the grid on `[x*, x**]` and solves
//! `s = x − D(β ∫ f((1−δ)s + z) φ(z) dz)` at every interior grid point with
//! Brent's method. Shock integrals use the trapezoid rule over a truncated range.
//! Between grid points the policy is a monotone cubic Hermite interpolant whose
//! nodal slopes come from differentiating the equilibrium condition.

use std::io::Write;

use serde::{Deserialize, Serialize};

use crate::anderson::Anderson;
use crate::error::{Error, Result};
use crate::roots::{brent_with_values, RootError};

/// Storage capacity used throughout the empirical work.
pub const DEFAULT_CAPACITY: f64 = 10.0;
/// Annual interest rate used to derive the monthly rate.
pub const DEFAULT_ANNUAL_RATE: f64 = 0.05;

/// Monthly rate equivalent to a compounded annual rate.
pub fn monthly_rate(annual: f64) -> f64 {
    (1.0 + annual).powf(1.0 / 12.0) - 1.0
}

/// Structural and trend parameters of the storage model.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ModelParams {
    /// Monthly depreciation rate of stocks.
    pub delta: f64,
    /// Semi-elasticity of the inverse demand `P(x) = K exp(−b x)`.
    pub b: f64,
    /// Storage capacity `C`.
    pub capacity: f64,
    /// Monthly interest rate.
    pub r: f64,
    /// Standard deviation of the trend innovations (not used by the solver).
    pub v: f64,
    /// Multiplicative scale `K` of the inverse demand.
    pub demand_scale: f64,
}

impl ModelParams {
    /// Parameters with `C = 10`, a 5% annual rate and `K = 1`.
    pub fn new(delta: f64, b: f64, v: f64) -> Result<Self> {
        let p = ModelParams {
            delta,
            b,
            capacity: DEFAULT_CAPACITY,
            r: monthly_rate(DEFAULT_ANNUAL_RATE),
            v,
            demand_scale: 1.0,
        };
        p.validate()?;
        Ok(p)
    }

    pub fn with_capacity(mut self, capacity: f64) -> Self {
        self.capacity = capacity;
        self
    }

    pub fn with_rate(mut self, r: f64) -> Self {
        self.r = r;
        self
    }

    pub fn with_demand_scale(mut self, k: f64) -> Self {
        self.demand_scale = k;
        self
    }

    /// Discount factor net of depreciation, `(1 − δ)/(1 + r)`.
    pub fn beta(&self) -> f64 {
        (1.0 - self.delta) / (1.0 + self.r)
    }

    /// Checks the invariants the equilibrium solver relies on.
    pub fn validate_structural(&self) -> Result<()> {
        let ok = |c: bool, msg: &str| {
            if c {
                Ok(())
            } else {
                Err(Error::InvalidParameter(msg.to_string()))
            }
        };
        ok(self.delta > 0.0 && self.delta < 1.0, "delta must lie in (0, 1)")?;
        ok(self.b > 0.0 && self.b.is_finite(), "b must be positive")?;
        ok(
            self.capacity > 0.0 && self.capacity.is_finite(),
            "capacity must be positive",
        )?;
        ok(self.r > 0.0 && self.r.is_finite(), "r must be positive")?;
        ok(
            self.demand_scale > 0.0 && self.demand_scale.is_finite(),
            "demand_scale must be positive",
        )
    }

    /// Full validation including the trend innovation scale.
    pub fn validate(&self) -> Result<()> {
        self.validate_structural()?;
        if !(self.v > 0.0 && self.v.is_finite()) {
            return Err(Error::InvalidParameter("v must be positive".into()));
        }
        Ok(())
    }
}

/// Interpolation of the storage policy between grid points.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Interpolation {
    Linear,
    /// Monotone cubic Hermite with slopes implied by the equilibrium condition.
    #[default]
    Hermite,
}

/// Numerical settings of the equilibrium solver.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SolverConfig {
    /// Grid points on `[x*, x**]`, including both kinks.
    pub grid_size: usize,
    /// Trapezoid subintervals for shock integrals.
    pub quad_nodes: usize,
    /// Integration interval for the standard normal shock.
    pub quad_range: (f64, f64),
    /// Sup-norm change of the policy (and kinks) that ends the iteration.
    pub policy_tol: f64,
    pub max_iters: usize,
    /// Absolute tolerance of the grid-point root finder.
    pub root_tol: f64,
    /// Width beyond the kinks inside which `inverse_price` inverts without clamping.
    pub domain_margin: f64,
    pub interpolation: Interpolation,
    /// Integrate the exponential regimes of the price function exactly and
    /// the storage band between its kinks by Simpson's rule.
    pub split_kinks: bool,
    /// Past iterates mixed by Anderson acceleration; 0 gives plain iteration.
    pub anderson_depth: usize,
}

impl Default for SolverConfig {
    fn default() -> Self {
        SolverConfig {
            grid_size: 200,
            quad_nodes: 128,
            quad_range: (-4.0, 4.0),
            policy_tol: 1e-10,
            max_iters: 500,
            root_tol: 1e-10,
            domain_margin: 10.0,
            interpolation: Interpolation::Hermite,
            split_kinks: true,
            anderson_depth: 5,
        }
    }
}

impl SolverConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::InvalidConfig(m.to_string()));
        if self.grid_size < 3 {
            return bad("grid_size must be at least 3");
        }
        if self.quad_nodes < 2 {
            return bad("quad_nodes must be at least 2");
        }
        if !(self.quad_range.0 < self.quad_range.1) {
            return bad("quad_range must be an increasing interval");
        }
        if !(self.policy_tol > 0.0) {
            return bad("policy_tol must be positive");
        }
        if self.max_iters < 1 {
            return bad("max_iters must be at least 1");
        }
        if !(self.root_tol > 0.0) {
            return bad("root_tol must be positive");
        }
        if !(self.domain_margin > 0.0) {
            return bad("domain_margin must be positive");
        }
        Ok(())
    }
}

/// Inverse demand `P(x) = K exp(−b x)`.
#[inline]
pub fn inverse_demand(params: &ModelParams, x: f64) -> f64 {
    params.demand_scale * (-params.b * x).exp()
}

/// Demand `D(p) = −log(p/K)/b`, the inverse of [`inverse_demand`].
pub fn demand(params: &ModelParams, p: f64) -> Result<f64> {
    if !(p > 0.0) {
        return Err(Error::Domain(format!("demand needs a positive price, got {p}")));
    }
    Ok(-(p / params.demand_scale).ln() / params.b)
}

#[inline]
fn std_normal_pdf(z: f64) -> f64 {
    const INV_SQRT_2PI: f64 = 0.398_942_280_401_432_7;
    INV_SQRT_2PI * (-0.5 * z * z).exp()
}

/// Uniform trapezoid nodes over the shock range. `weights` fold in the
/// normal density; `pdf` keeps it separately for the boundary terms.
#[derive(Debug, Clone)]
pub(crate) struct ShockQuadrature {
    pub nodes: Vec<f64>,
    pub weights: Vec<f64>,
    pub pdf: Vec<f64>,
}

impl ShockQuadrature {
    pub fn new(subintervals: usize, range: (f64, f64)) -> Self {
        let (lo, hi) = range;
        let h = (hi - lo) / subintervals as f64;
        let mut nodes = Vec::with_capacity(subintervals + 1);
        let mut weights = Vec::with_capacity(subintervals + 1);
        let mut pdf = Vec::with_capacity(subintervals + 1);
        for i in 0..=subintervals {
            let z = if i == subintervals { hi } else { lo + i as f64 * h };
            let end = i == 0 || i == subintervals;
            let w = if end { 0.5 * h } else { h };
            let d = std_normal_pdf(z);
            nodes.push(z);
            pdf.push(d);
            weights.push(w * d);
        }
        ShockQuadrature { nodes, weights, pdf }
    }
}

#[inline]
fn grid_point(lo: f64, hi: f64, n: usize, j: usize) -> f64 {
    if j + 1 == n {
        hi
    } else {
        lo + (hi - lo) * j as f64 / (n - 1) as f64
    }
}

/// Borrowed view of a policy on a uniform grid over `[x_lo, x_hi]`.
#[derive(Clone, Copy)]
struct Curve<'a> {
    x_lo: f64,
    x_hi: f64,
    inv_step: f64,
    s: &'a [f64],
    slopes: &'a [f64],
    capacity: f64,
    hermite: bool,
}

impl Curve<'_> {
    #[inline]
    fn locate(&self, x: f64) -> (usize, f64) {
        let u = (x - self.x_lo) * self.inv_step;
        let j = (u as usize).min(self.s.len() - 2);
        (j, u - j as f64)
    }

    #[inline]
    fn sigma(&self, x: f64) -> f64 {
        if x < self.x_lo {
            return 0.0;
        }
        if x >= self.x_hi {
            return self.capacity;
        }
        let (j, t) = self.locate(x);
        let (s0, s1) = (self.s[j], self.s[j + 1]);
        if !self.hermite {
            return s0 + t * (s1 - s0);
        }
        let h = 1.0 / self.inv_step;
        let t2 = t * t;
        let t3 = t2 * t;
        let h00 = 2.0 * t3 - 3.0 * t2 + 1.0;
        let h10 = t3 - 2.0 * t2 + t;
        let h01 = -2.0 * t3 + 3.0 * t2;
        let h11 = t3 - t2;
        h00 * s0 + h10 * h * self.slopes[j] + h01 * s1 + h11 * h * self.slopes[j + 1]
    }

    #[inline]
    fn sigma_slope(&self, x: f64) -> f64 {
        if x < self.x_lo || x > self.x_hi {
            return 0.0;
        }
        let (j, t) = self.locate(x);
        let secant = (self.s[j + 1] - self.s[j]) * self.inv_step;
        if !self.hermite {
            return secant;
        }
        let t2 = t * t;
        let (m0, m1) = (self.slopes[j], self.slopes[j + 1]);
        // derivative of the Hermite basis, scaled back to x units
        6.0 * (t - t2) * secant + (3.0 * t2 - 4.0 * t + 1.0) * m0 + (3.0 * t2 - 2.0 * t) * m1
    }

    /// `f(y) = P(y − σ(y))` without `K`.
    #[inline]
    fn unit_price(&self, b: f64, y: f64) -> f64 {
        (-b * (y - self.sigma(y))).exp()
    }
}

/// `Φ(u) − Φ(l)` without cancellation in either tail.
fn normal_mass(l: f64, u: f64) -> f64 {
    let c = std::f64::consts::FRAC_1_SQRT_2;
    if l >= 0.0 {
        0.5 * (libm::erfc(l * c) - libm::erfc(u * c))
    } else if u <= 0.0 {
        0.5 * (libm::erfc(-u * c) - libm::erfc(-l * c))
    } else {
        1.0 - 0.5 * (libm::erfc(u * c) + libm::erfc(-l * c))
    }
}

/// `∫_l^u e^{−bz} φ(z) dz` and `∫_l^u z e^{−bz} φ(z) dz` in closed form.
///
/// `e^{−bz} φ(z) = e^{b²/2} φ(z + b)`, so the first is a shifted normal mass
/// and the second follows from `z φ(z + b) = −φ'(z + b) − b φ(z + b)`.
fn exp_normal_moments(b: f64, l: f64, u: f64) -> (f64, f64) {
    let i0 = (0.5 * b * b).exp() * normal_mass(l + b, u + b);
    let i1 = std_normal_pdf(l) * (-b * l).exp() - std_normal_pdf(u) * (-b * u).exp() - b * i0;
    (i0, i1)
}

/// `g(s) = β ∫ f((1−δ)s + z) φ(z) dz` over the truncated shock range and its
/// derivative in `s`.
///
/// Integration by parts gives `g'(s) = β (1−δ) (∫ f z φ dz + [f φ])` with the
/// bracket taken at the range ends, which avoids differentiating `f` and holds
/// across its kinks. With `split` the two regimes where `f` is an exact
/// exponential (below `x*` and above `x**`) are integrated in closed form and
/// the storage band between them by composite Simpson on nodes that move
/// with `s`, so `g` is smooth in `s`. Without it, the uniform trapezoid rule
/// runs over the whole range.
fn storage_moments(
    params: &ModelParams,
    curve: &Curve,
    quad: &ShockQuadrature,
    split: bool,
    s: f64,
) -> (f64, f64) {
    let b = params.b;
    let a = (1.0 - params.delta) * s;
    let (z_lo, z_hi) = (quad.nodes[0], quad.nodes[quad.nodes.len() - 1]);
    let (mut m0, mut m1) = (0.0, 0.0);
    if split {
        let k1 = (curve.x_lo - a).clamp(z_lo, z_hi);
        let k2 = (curve.x_hi - a).clamp(z_lo, z_hi);
        if k1 > z_lo {
            // stock-out: f(a + z) = e^{−b(a + z)}
            let (i0, i1) = exp_normal_moments(b, z_lo, k1);
            let c = (-b * a).exp();
            m0 += c * i0;
            m1 += c * i1;
        }
        if k2 < z_hi {
            // full capacity: f(a + z) = e^{−b(a + z − C)}
            let (i0, i1) = exp_normal_moments(b, k2, z_hi);
            let c = (-b * (a - curve.capacity)).exp();
            m0 += c * i0;
            m1 += c * i1;
        }
        if k2 > k1 {
            let n = (quad.nodes.len() - 1).max(2).next_multiple_of(2);
            let h = (k2 - k1) / n as f64;
            for i in 0..=n {
                let z = if i == n { k2 } else { k1 + i as f64 * h };
                let w = if i == 0 || i == n {
                    1.0
                } else if i % 2 == 1 {
                    4.0
                } else {
                    2.0
                };
                let f = w * h / 3.0 * std_normal_pdf(z) * curve.unit_price(b, a + z);
                m0 += f;
                m1 += f * z;
            }
        }
    } else {
        for (z, w) in quad.nodes.iter().zip(&quad.weights) {
            let f = w * curve.unit_price(b, a + z);
            m0 += f;
            m1 += f * z;
        }
    }
    // boundary terms from integrating by parts over the truncated range
    let last = quad.pdf.len() - 1;
    m1 += quad.pdf[last] * curve.unit_price(b, a + z_hi) - quad.pdf[0] * curve.unit_price(b, a + z_lo);
    let scale = params.beta() * params.demand_scale;
    (scale * m0, scale * (1.0 - params.delta) * m1)
}

/// Policy slope at a solved grid point from implicit differentiation of
/// `P(x − s) = g(s)`.
#[inline]
fn implied_slope(b: f64, g: f64, dg: f64) -> f64 {
    b * g / (b * g - dg)
}

/// Restricts Hermite slopes so that both `s(x)` and `x − s(x)` stay
/// nondecreasing on every cell.
fn limit_slopes(s: &[f64], h: f64, slopes: &mut [f64]) {
    let n = s.len();
    let secant = |j: usize| (s[j + 1] - s[j]) / h;
    for j in 0..n {
        let (mut lo, mut hi) = (0.0f64, 1.0f64);
        for c in [j.checked_sub(1), (j + 1 < n).then_some(j)].into_iter().flatten() {
            let d = secant(c);
            hi = hi.min(3.0 * d);
            lo = lo.max(1.0 - 3.0 * (1.0 - d));
        }
        let m = slopes[j];
        slopes[j] = if lo <= hi && m.is_finite() {
            m.clamp(lo, hi)
        } else {
            0.5 * (lo + hi).clamp(0.0, 2.0)
        };
    }
}

/// Converged equilibrium: kink points and the policy on its grid.
#[derive(Debug, Clone, PartialEq)]
pub struct EquilibriumSolution {
    pub x_star: f64,
    pub x_star2: f64,
    pub grid: Vec<f64>,
    pub s_values: Vec<f64>,
    /// `dσ/dx` at each grid point after monotonicity limiting.
    pub slopes: Vec<f64>,
    pub params: ModelParams,
    pub config: SolverConfig,
    pub iterations: usize,
    pub final_residual: f64,
    inv_step: f64,
}

/// Pricing regime of a stock level.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Regime {
    /// `x < x*`: nothing is stored and `f(x) = P(x)`.
    StockOut,
    /// `x* ≤ x ≤ x**`: interior storage and `f(x) = f̄(x)`.
    NoArbitrage,
    /// `x > x**`: storage at capacity and `f(x) = P(x − C)`.
    FullCapacity,
}

impl Regime {
    pub fn label(self) -> &'static str {
        match self {
            Regime::StockOut => "stock-out",
            Regime::NoArbitrage => "no-arbitrage",
            Regime::FullCapacity => "full-capacity",
        }
    }
}

/// Result of [`EquilibriumSolution::inverse_price`].
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct InversePrice {
    /// Stock level with `f(x) = p`, clamped to the operational domain.
    pub x: f64,
    /// Distance between the unclamped inverse and the returned value.
    pub clamp_distance: f64,
}

impl InversePrice {
    pub fn clamped(&self) -> bool {
        self.clamp_distance > 0.0
    }
}

struct Iterate {
    x_lo: f64,
    x_hi: f64,
    s: Vec<f64>,
    slopes: Vec<f64>,
}

impl Iterate {
    /// Flattens to `[x_lo, x_hi, s.., slopes..]`.
    fn to_vec(&self) -> Vec<f64> {
        let mut v = Vec::with_capacity(2 + 2 * self.s.len());
        v.push(self.x_lo);
        v.push(self.x_hi);
        v.extend_from_slice(&self.s);
        v.extend_from_slice(&self.slopes);
        v
    }

    /// Inverse of [`Self::to_vec`]. Returns `None` when the mixed vector is
    /// not an admissible policy: the kinks must be ordered and both `s` and
    /// `x − s` nondecreasing between the pinned end values.
    fn from_vec(v: &[f64], cap: f64, hermite: bool) -> Option<Self> {
        let n = (v.len() - 2) / 2;
        let (x_lo, x_hi) = (v[0], v[1]);
        if !(x_lo.is_finite() && x_hi.is_finite() && x_lo < x_hi) {
            return None;
        }
        let h = (x_hi - x_lo) / (n - 1) as f64;
        let mut s = v[2..2 + n].to_vec();
        s[0] = 0.0;
        s[n - 1] = cap;
        for w in s.windows(2) {
            let d = w[1] - w[0];
            if !(d >= 0.0 && d <= h) {
                return None;
            }
        }
        let mut slopes = v[2 + n..].to_vec();
        if hermite {
            limit_slopes(&s, h, &mut slopes);
        }
        Some(Iterate {
            x_lo,
            x_hi,
            s,
            slopes,
        })
    }

    fn curve(&self, capacity: f64, hermite: bool) -> Curve<'_> {
        Curve {
            x_lo: self.x_lo,
            x_hi: self.x_hi,
            inv_step: (self.s.len() - 1) as f64 / (self.x_hi - self.x_lo),
            s: &self.s,
            slopes: &self.slopes,
            capacity,
            hermite,
        }
    }
}

/// Solves the storage model's functional equation for the equilibrium policy.
pub fn solve_equilibrium(params: &ModelParams, cfg: &SolverConfig) -> Result<EquilibriumSolution> {
    params.validate_structural()?;
    cfg.validate()?;

    let n = cfg.grid_size;
    let cap = params.capacity;
    let hermite = cfg.interpolation == Interpolation::Hermite;
    let quad = ShockQuadrature::new(cfg.quad_nodes, cfg.quad_range);

    // s_1(x) = x on [0, C]
    let mut policy = Iterate {
        x_lo: 0.0,
        x_hi: cap,
        s: (0..n).map(|j| grid_point(0.0, cap, n, j)).collect(),
        slopes: vec![1.0; n],
    };
    let mut residual = f64::INFINITY;
    let mut accel = Anderson::new(cfg.anderson_depth);

    for iter in 1..=cfg.max_iters {
        // Tight root tolerances only matter once the policy has settled.
        let tol = (1e-3 * residual).clamp(cfg.root_tol, 1e-4);
        let curve = policy.curve(cap, hermite);
        let next = policy_update(params, cfg, &quad, &curve, tol, iter)?;

        let mut change = (next.x_lo - policy.x_lo).abs().max((next.x_hi - policy.x_hi).abs());
        for j in 0..n {
            let x = grid_point(next.x_lo, next.x_hi, n, j);
            change = change.max((next.s[j] - curve.sigma(x)).abs());
        }
        if !change.is_finite() {
            return Err(Error::Numerical(format!("policy update not finite at iteration {iter}")));
        }
        if change < cfg.policy_tol {
            return Ok(EquilibriumSolution::from_iterate(next, *params, *cfg, iter, change));
        }

        // Extrapolate only near the fixed point; far from it the kinks move
        // too much for the map to look linear.
        let accelerate = cfg.anderson_depth > 0 && change < ANDERSON_START;
        if accelerate && change > 2.0 * residual {
            accel.reset();
        }
        policy = if accelerate {
            let mixed = accel.step(&policy.to_vec(), &next.to_vec());
            Iterate::from_vec(&mixed, cap, hermite).unwrap_or_else(|| {
                accel.reset();
                next
            })
        } else {
            next
        };
        residual = change;
    }
    Err(Error::NonConvergence {
        iterations: cfg.max_iters,
        final_residual: residual,
    })
}

/// Sup-norm change below which Anderson mixing is switched on.
const ANDERSON_START: f64 = 1e-2;

/// One application of the policy operator: new kinks, new grid, new policy.
fn policy_update(
    params: &ModelParams,
    cfg: &SolverConfig,
    quad: &ShockQuadrature,
    curve: &Curve,
    tol: f64,
    iter: usize,
) -> Result<Iterate> {
    let n = cfg.grid_size;
    let cap = params.capacity;
    let b = params.b;
    let ln_k = params.demand_scale.ln();
    let hermite = curve.hermite;
    let moments = |s: f64| storage_moments(params, curve, quad, cfg.split_kinks, s);
    let g = |s: f64| moments(s).0;

    let (g_lo, dg_lo) = moments(0.0);
    let (g_hi, dg_hi) = moments(cap);
    let x_lo = -(g_lo.ln() - ln_k) / b;
    let x_hi = -(g_hi.ln() - ln_k) / b + cap;
    if !(x_lo.is_finite() && x_hi.is_finite() && x_lo < x_hi) {
        return Err(Error::Numerical(format!(
            "kink points degenerate at iteration {iter}: x* = {x_lo}, x** = {x_hi}"
        )));
    }

    let mut s_new = vec![0.0; n];
    let mut m_new = vec![0.0; n];
    s_new[n - 1] = cap;
    m_new[0] = implied_slope(b, g_lo, dg_lo);
    m_new[n - 1] = implied_slope(b, g_hi, dg_hi);
    for j in 1..n - 1 {
        let x = grid_point(x_lo, x_hi, n, j);
        // F(s) = s − x + D(g(s)) is increasing with F(0) = x* − x < 0 and F(C) = x** − x > 0.
        let mut f = |s: f64| s - x - (g(s).ln() - ln_k) / b;
        let s = solve_grid_point(&mut f, curve.sigma(x), x_lo - x, x_hi - x, cap, tol)
            .map_err(|_| Error::RootFinder { index: j, x })?;
        s_new[j] = s;
        if hermite {
            let (gs, dgs) = moments(s);
            m_new[j] = implied_slope(b, gs, dgs);
        }
    }
    if hermite {
        limit_slopes(&s_new, (x_hi - x_lo) / (n - 1) as f64, &mut m_new);
    }
    Ok(Iterate {
        x_lo,
        x_hi,
        s: s_new,
        slopes: m_new,
    })
}

/// Root of an increasing `f` on `[0, cap]` given the known end values and a
/// starting guess. The slope of `f` lies in `[1, 2)` for a monotone policy,
/// which yields a narrow bracket around the guess; otherwise the full interval
/// is used.
fn solve_grid_point<F: FnMut(f64) -> f64>(
    f: &mut F,
    guess: f64,
    f_lo: f64,
    f_hi: f64,
    cap: f64,
    tol: f64,
) -> std::result::Result<f64, RootError> {
    const MAX_ITER: usize = 200;
    let s0 = guess.clamp(0.0, cap);
    let r0 = f(s0);
    if r0 == 0.0 {
        return Ok(s0);
    }
    let (a, b, fa, fb) = if r0 > 0.0 {
        let a = (s0 - 2.0 * r0).max(0.0);
        let fa = if a == 0.0 { f_lo } else { f(a) };
        (a, s0, fa, r0)
    } else {
        let b = (s0 - 2.0 * r0).min(cap);
        let fb = if b == cap { f_hi } else { f(b) };
        (s0, b, r0, fb)
    };
    match brent_with_values(&mut *f, a, b, fa, fb, tol, MAX_ITER) {
        Err(RootError::NotBracketed) => brent_with_values(f, 0.0, cap, f_lo, f_hi, tol, MAX_ITER),
        other => other,
    }
}

impl EquilibriumSolution {
    fn from_iterate(
        it: Iterate,
        params: ModelParams,
        config: SolverConfig,
        iterations: usize,
        final_residual: f64,
    ) -> Self {
        let n = it.s.len();
        let grid = (0..n).map(|j| grid_point(it.x_lo, it.x_hi, n, j)).collect();
        let mut slopes = it.slopes;
        if config.interpolation == Interpolation::Linear {
            // report the one-sided secants so the field is meaningful either way
            for j in 0..n {
                let c = j.min(n - 2);
                slopes[j] = (it.s[c + 1] - it.s[c]) * (n - 1) as f64 / (it.x_hi - it.x_lo);
            }
        }
        EquilibriumSolution {
            x_star: it.x_lo,
            x_star2: it.x_hi,
            grid,
            s_values: it.s,
            slopes,
            params,
            config,
            iterations,
            final_residual,
            inv_step: (n - 1) as f64 / (it.x_hi - it.x_lo),
        }
    }

    #[inline]
    fn curve(&self) -> Curve<'_> {
        Curve {
            x_lo: self.x_star,
            x_hi: self.x_star2,
            inv_step: self.inv_step,
            s: &self.s_values,
            slopes: &self.slopes,
            capacity: self.params.capacity,
            hermite: self.config.interpolation == Interpolation::Hermite,
        }
    }

    /// Storage policy `σ(x)`.
    #[inline]
    pub fn storage_policy(&self, x: f64) -> f64 {
        self.curve().sigma(x)
    }

    /// `log f(x) = log K − b (x − σ(x))`.
    #[inline]
    pub fn log_price_fn(&self, x: f64) -> f64 {
        self.params.demand_scale.ln() - self.params.b * (x - self.storage_policy(x))
    }

    /// Equilibrium price `f(x) = P(x − σ(x))`.
    #[inline]
    pub fn price_fn(&self, x: f64) -> f64 {
        inverse_demand(&self.params, x - self.storage_policy(x))
    }

    /// Derivative of `log f` at `x`, `−b (1 − σ'(x))`.
    pub fn log_price_slope(&self, x: f64) -> f64 {
        -self.params.b * (1.0 - self.curve().sigma_slope(x))
    }

    /// Discounted expected next-period price `β ∫ f((1−δ)σ(x) + z) φ(z) dz`
    /// with the solver's quadrature.
    pub fn expected_next_price(&self, x: f64) -> f64 {
        self.expected_next_price_nodes(x, self.config.quad_nodes)
    }

    /// Same as [`Self::expected_next_price`] with a different number of
    /// trapezoid subintervals.
    pub fn expected_next_price_nodes(&self, x: f64, quad_nodes: usize) -> f64 {
        let quad = ShockQuadrature::new(quad_nodes, self.config.quad_range);
        let curve = self.curve();
        storage_moments(&self.params, &curve, &quad, self.config.split_kinks, curve.sigma(x)).0
    }

    pub fn regime(&self, x: f64) -> Regime {
        if x < self.x_star {
            Regime::StockOut
        } else if x > self.x_star2 {
            Regime::FullCapacity
        } else {
            Regime::NoArbitrage
        }
    }

    /// Lower and upper ends of the domain inside which prices are inverted exactly.
    pub fn operational_domain(&self) -> (f64, f64) {
        let m = self.config.domain_margin;
        (self.x_star - m, self.x_star2 + m)
    }

    /// Stock level `x` with `f(x) = p`.
    ///
    /// The two outer regimes invert in closed form. Inside `[x*, x**]` the
    /// consumed quantity `x − σ(x)` is nondecreasing, so the bracketing cell is
    /// found by bisection over the grid and the inverse solved within it.
    /// Prices implying a stock outside [`Self::operational_domain`] are clamped
    /// to the domain boundary and the clamp distance is reported.
    pub fn inverse_price(&self, p: f64) -> InversePrice {
        let b = self.params.b;
        let ln_k = self.params.demand_scale.ln();
        let u = if p > 0.0 { -(p.ln() - ln_k) / b } else { f64::INFINITY };
        let u_lo = self.x_star;
        let u_hi = self.x_star2 - self.params.capacity;

        let x = if u <= u_lo {
            u
        } else if u >= u_hi {
            u + self.params.capacity
        } else {
            self.invert_consumption(u)
        };

        let (d_lo, d_hi) = self.operational_domain();
        if x < d_lo {
            InversePrice {
                x: d_lo,
                clamp_distance: d_lo - x,
            }
        } else if x > d_hi {
            InversePrice {
                x: d_hi,
                clamp_distance: x - d_hi,
            }
        } else {
            InversePrice {
                x,
                clamp_distance: 0.0,
            }
        }
    }

    /// `x` in `[x*, x**]` with `x − σ(x) = u`.
    fn invert_consumption(&self, u: f64) -> f64 {
        let consumed = |j: usize| self.grid[j] - self.s_values[j];
        let (mut lo, mut hi) = (0usize, self.grid.len() - 1);
        while hi - lo > 1 {
            let mid = (lo + hi) / 2;
            if consumed(mid) <= u {
                lo = mid;
            } else {
                hi = mid;
            }
        }
        let (c0, c1) = (consumed(lo), consumed(hi));
        let (x0, x1) = (self.grid[lo], self.grid[hi]);
        if c1 <= c0 {
            return x0;
        }
        if self.config.interpolation == Interpolation::Linear {
            let frac = ((u - c0) / (c1 - c0)).clamp(0.0, 1.0);
            return x0 + frac * (x1 - x0);
        }
        let curve = self.curve();
        let f = |x: f64| x - curve.sigma(x) - u;
        brent_with_values(f, x0, x1, c0 - u, c1 - u, 1e-14, 200).unwrap_or(x0)
    }

    /// Writes `x, sigma, f` rows: the solver grid plus `tail_points` evenly
    /// spaced points on each side over a width of three shock units.
    pub fn write_csv<W: Write>(&self, mut out: W, tail_points: usize) -> Result<()> {
        writeln!(out, "x,sigma,f")?;
        let mut xs = Vec::with_capacity(self.grid.len() + 2 * tail_points);
        for i in 0..tail_points {
            xs.push(self.x_star - 3.0 + 3.0 * i as f64 / tail_points as f64);
        }
        xs.extend_from_slice(&self.grid);
        for i in 1..=tail_points {
            xs.push(self.x_star2 + 3.0 * i as f64 / tail_points as f64);
        }
        for x in xs {
            writeln!(out, "{},{},{}", x, self.storage_policy(x), self.price_fn(x))?;
        }
        Ok(())
    }
}
