//! Local-level Gaussian baseline: `p_t = k_t − b z_t`, `k_t = k_{t−1} + v ε_t`.
//!
//! The storage model reduces to this when the price function is log-linear
//! and stocks never carry over. Filtering is exact with a scalar Kalman
//! filter. `k_1` starts at `N(p_1, 10⁶ b²)` and the likelihood is summed from
//! `t = 2`, so it conditions on `p_1` like the particle filter does.

use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::particle_filter::pit_transform;
use crate::rng::{stream_rng, Stream};
use crate::ssm::{PriceSeries, StateSpaceModel};
use crate::stats::LN_SQRT_2PI;

/// Prior variance of `k_1` in units of `b²`.
pub const DIFFUSE_SCALE: f64 = 1e6;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LgllParams {
    /// Measurement loading; the measurement standard deviation.
    pub b: f64,
    /// Trend innovation standard deviation.
    pub v: f64,
}

impl LgllParams {
    pub fn new(b: f64, v: f64) -> Result<Self> {
        let p = LgllParams { b, v };
        p.validate()?;
        Ok(p)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.b > 0.0 && self.b.is_finite() && self.v > 0.0 && self.v.is_finite()) {
            return Err(Error::InvalidParameter(format!(
                "local-level parameters must be positive, got b = {}, v = {}",
                self.b, self.v
            )));
        }
        Ok(())
    }
}

/// Kalman filter recursions over a series.
#[derive(Debug, Clone, PartialEq)]
pub struct KalmanOutput {
    /// `Σ_{t=2}^T log N(p_t; a_t, F_t)`.
    pub log_lik: f64,
    /// Predicted trend `a_t = E(k_t | p_{1:t−1})` for `t = 2..T`, at index `t − 2`.
    pub predicted_mean: Vec<f64>,
    /// Predicted trend variance `P_t|t−1` for `t = 2..T`.
    pub predicted_var: Vec<f64>,
    /// Prediction-error variance `F_t = P_t|t−1 + b²` for `t = 2..T`.
    pub innovation_var: Vec<f64>,
    /// Kalman gain for `t = 1..T`.
    pub gain: Vec<f64>,
    /// `E(k_t | p_{1:t})` for `t = 1..T`.
    pub filtered_mean: Vec<f64>,
    /// `Var(k_t | p_{1:t})` for `t = 1..T`.
    pub filtered_var: Vec<f64>,
}

/// Runs the filter. Needs `T ≥ 2`.
pub fn kalman_filter(params: &LgllParams, prices: &PriceSeries) -> Result<KalmanOutput> {
    params.validate()?;
    let p = &prices.log_prices;
    if p.len() < 2 {
        return Err(Error::InvalidParameter("the local-level likelihood needs at least 2 observations".into()));
    }
    let (b2, v2) = (params.b * params.b, params.v * params.v);
    let t_len = p.len();
    let mut out = KalmanOutput {
        log_lik: 0.0,
        predicted_mean: Vec::with_capacity(t_len - 1),
        predicted_var: Vec::with_capacity(t_len - 1),
        innovation_var: Vec::with_capacity(t_len - 1),
        gain: Vec::with_capacity(t_len),
        filtered_mean: Vec::with_capacity(t_len),
        filtered_var: Vec::with_capacity(t_len),
    };

    let p1 = DIFFUSE_SCALE * b2;
    let g = p1 / (p1 + b2);
    out.gain.push(g);
    out.filtered_mean.push(p[0]);
    let mut var = b2 * g;
    out.filtered_var.push(var);
    let mut mean = p[0];

    for &pt in &p[1..] {
        let pred_var = var + v2;
        let f = pred_var + b2;
        let e = pt - mean;
        out.log_lik += -LN_SQRT_2PI - 0.5 * f.ln() - 0.5 * e * e / f;
        out.predicted_mean.push(mean);
        out.predicted_var.push(pred_var);
        out.innovation_var.push(f);
        let g = pred_var / f;
        mean += g * e;
        // Joseph-free form is fine for a scalar with 0 < g < 1
        var = pred_var * b2 / f;
        out.gain.push(g);
        out.filtered_mean.push(mean);
        out.filtered_var.push(var);
    }
    Ok(out)
}

/// Exact log-likelihood of `p_{2:T}` given `p_1`.
pub fn kalman_loglik(params: &LgllParams, prices: &PriceSeries) -> Result<f64> {
    Ok(kalman_filter(params, prices)?.log_lik)
}

/// Standardized one-step prediction errors and their normal PIT transform,
/// for `t = 2..T`.
#[derive(Debug, Clone, PartialEq)]
pub struct LgllResiduals {
    pub pearson: Vec<f64>,
    pub pit: Vec<f64>,
}

pub fn lgll_residuals(params: &LgllParams, prices: &PriceSeries) -> Result<LgllResiduals> {
    let kf = kalman_filter(params, prices)?;
    let pearson: Vec<f64> = prices.log_prices[1..]
        .iter()
        .zip(&kf.predicted_mean)
        .zip(&kf.innovation_var)
        .map(|((p, a), f)| (p - a) / f.sqrt())
        .collect();
    let pit = pearson
        .iter()
        .map(|&e| pit_transform(crate::stats::std_normal_cdf(e)).0)
        .collect();
    Ok(LgllResiduals { pearson, pit })
}

/// Fixed-interval smoothed trend `E(k_t | p_{1:T})` and its variance.
pub fn kalman_smoother(params: &LgllParams, prices: &PriceSeries) -> Result<(Vec<f64>, Vec<f64>)> {
    let kf = kalman_filter(params, prices)?;
    let t_len = prices.len();
    let mut mean = kf.filtered_mean.clone();
    let mut var = kf.filtered_var.clone();
    for t in (0..t_len - 1).rev() {
        let pred_var = kf.predicted_var[t];
        let j = kf.filtered_var[t] / pred_var;
        mean[t] = kf.filtered_mean[t] + j * (mean[t + 1] - kf.filtered_mean[t]);
        var[t] = kf.filtered_var[t] + j * j * (var[t + 1] - pred_var);
    }
    Ok((mean, var))
}

/// The local-level model written as a state-space model with `x_t ~ N(0, 1)`
/// iid and `log f(x) = −b x`, so the particle filter can run on it.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LgllSsm {
    pub params: LgllParams,
}

impl StateSpaceModel for LgllSsm {
    fn sample_initial<R: Rng + ?Sized>(&self, rng: &mut R) -> f64 {
        rng.sample(StandardNormal)
    }
    fn transition_mean(&self, _x_prev: f64) -> f64 {
        0.0
    }
    fn log_price_component(&self, x: f64) -> f64 {
        -self.params.b * x
    }
    fn trend_sd(&self) -> f64 {
        self.params.v
    }
}

/// Simulates `T` log prices from `k_1 = 0`.
pub fn simulate_lgll(params: &LgllParams, t_len: usize, seed: u64) -> Result<PriceSeries> {
    params.validate()?;
    let mut rng = stream_rng(seed, Stream::Simulation, 1, 0);
    let mut k = 0.0;
    let mut p = Vec::with_capacity(t_len);
    for t in 0..t_len {
        if t > 0 {
            k += params.v * rng.sample::<f64, _>(StandardNormal);
        }
        p.push(k - params.b * rng.sample::<f64, _>(StandardNormal));
    }
    PriceSeries::from_log_prices(p, "simulated local level")
}

#[cfg(test)]
mod tests {
    use super::*;
    use nalgebra::{DMatrix, DVector};

    fn series(p: &[f64]) -> PriceSeries {
        PriceSeries::from_log_prices(p.to_vec(), "test").unwrap()
    }

    /// `log N(p_{1:T}) − log N(p_1)` from the full covariance matrix, with
    /// `k_1 ~ N(p_1, P0)`.
    fn dense_oracle(params: &LgllParams, p: &[f64]) -> f64 {
        let n = p.len();
        let (b2, v2) = (params.b.powi(2), params.v.powi(2));
        let p0 = DIFFUSE_SCALE * b2;
        let cov = DMatrix::from_fn(n, n, |i, j| p0 + v2 * i.min(j) as f64 + if i == j { b2 } else { 0.0 });
        let d = DVector::from_iterator(n, p.iter().map(|x| x - p[0]));
        let chol = cov.cholesky().unwrap();
        let logdet: f64 = 2.0 * chol.l().diagonal().iter().map(|x| x.ln()).sum::<f64>();
        let quad = d.dot(&chol.solve(&d));
        let joint = -(n as f64) * LN_SQRT_2PI - 0.5 * logdet - 0.5 * quad;
        let first = -LN_SQRT_2PI - 0.5 * (p0 + b2).ln();
        joint - first
    }

    const FIXED: [f64; 5] = [0.3, -0.4, 1.1, 0.2, 0.9];

    #[test]
    fn matches_dense_covariance() {
        let par = LgllParams::new(1.0, 1.0).unwrap();
        let got = kalman_loglik(&par, &series(&FIXED)).unwrap();
        assert!((got - dense_oracle(&par, &FIXED)).abs() < 1e-10);
    }

    #[test]
    fn small_v_limit() {
        let par = LgllParams::new(0.5, 1e-8).unwrap();
        let p = [0.1, 0.2, -0.3, 0.5, 0.0, 0.4, -0.1, 0.3, 0.2, 0.6];
        let got = kalman_loglik(&par, &series(&p)).unwrap();
        assert!((got - dense_oracle(&par, &p)).abs() < 1e-8);
    }

    #[test]
    fn not_exchangeable() {
        let par = LgllParams::new(0.3, 0.2).unwrap();
        let mut q = FIXED;
        q.swap(1, 3);
        let a = kalman_loglik(&par, &series(&FIXED)).unwrap();
        let b = kalman_loglik(&par, &series(&q)).unwrap();
        assert!((a - b).abs() > 1e-6);
    }

    #[test]
    fn gain_reaches_steady_state() {
        let par = LgllParams::new(0.4, 0.1).unwrap();
        let s = simulate_lgll(&par, 200, 3).unwrap();
        let kf = kalman_filter(&par, &s).unwrap();
        // fixed point of P = (P + v²) b² / (P + v² + b²)
        let (b2, v2): (f64, f64) = (0.16, 0.01);
        let pbar = 0.5 * (-v2 + (v2 * v2 + 4.0 * v2 * b2).sqrt());
        assert!((kf.filtered_var[199] - pbar).abs() < 1e-12);
        for w in kf.filtered_var[1..].windows(2) {
            assert!(w[1] <= w[0] + 1e-15);
        }
    }

    #[test]
    fn residual_identities() {
        let par = LgllParams::new(0.5, 0.2).unwrap();
        let r = lgll_residuals(&par, &series(&[0.0, 0.0, 0.5])).unwrap();
        assert_eq!(r.pearson[0], 0.0);
        assert_eq!(r.pit[0], 0.0);
        let s = simulate_lgll(&par, 100, 4).unwrap();
        let r = lgll_residuals(&par, &s).unwrap();
        for (e, x) in r.pearson.iter().zip(&r.pit) {
            assert!((e - x).abs() < 1e-8);
        }
    }

    #[test]
    fn smoother_ends_at_filter_and_matches_dense_posterior() {
        let par = LgllParams::new(0.7, 0.4).unwrap();
        let (m, _) = kalman_smoother(&par, &series(&FIXED)).unwrap();
        let kf = kalman_filter(&par, &series(&FIXED)).unwrap();
        assert_eq!(m[4], kf.filtered_mean[4]);
        // dense posterior mean of k given p: Σ_kp Σ_pp⁻¹ (p − p_1) + p_1
        let n = 5;
        let (b2, v2) = (0.49, 0.16);
        let p0 = DIFFUSE_SCALE * b2;
        let ck = DMatrix::from_fn(n, n, |i, j| p0 + v2 * i.min(j) as f64);
        let cp = &ck + DMatrix::identity(n, n) * b2;
        let d = DVector::from_iterator(n, FIXED.iter().map(|x| x - FIXED[0]));
        let post = &ck * cp.cholesky().unwrap().solve(&d);
        for t in 0..n {
            assert!((m[t] - (post[t] + FIXED[0])).abs() < 1e-9, "{t}");
        }
    }

    #[test]
    fn invalid_params_rejected() {
        assert!(LgllParams::new(0.0, 1.0).is_err());
        assert!(LgllParams::new(1.0, -1.0).is_err());
    }
}
