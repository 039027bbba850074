//! Marginal likelihoods, residual diagnostics and economic summaries.
//!
//! The marginal likelihood follows from the basic marginal likelihood
//! identity evaluated at the posterior mean `θ̄`:
//! `log π(p) = ℓ(θ̄) + log π(θ̄) − log π(θ̄ | p)`, where the posterior
//! ordinate is estimated from the MH chain as the ratio of
//! `E_post[α(θ, θ̄) Q(θ̄ | θ)]` to `E_Q(·|θ̄)[α(θ̄, θ)]`. All densities live in
//! the transformed space, so the Jacobian cancels between prior and ordinate.

use std::io::Write;

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use statrs::distribution::{ChiSquared, ContinuousCDF};

use crate::error::{Error, Result};
use crate::rng::{derive_key, stream_rng, Stream};
use crate::samplers::{log_acceptance, log_prior, Chain, ParamSummary, PriorSpec, Target};
use crate::stats::LN_SQRT_2PI;

/// Where the numerator's likelihoods at the posterior draws come from.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum NumeratorLikelihood {
    /// The values stored with the chain; for the particle filter these are
    /// the estimates the chain itself used.
    #[default]
    Reuse,
    /// A fresh evaluation at every posterior draw.
    Recompute,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MarginalLikResult {
    pub log_marginal: f64,
    pub log_lik: f64,
    pub log_prior: f64,
    pub log_ordinate: f64,
    /// `log` of the averaged numerator and denominator terms.
    pub log_numerator: f64,
    pub log_denominator: f64,
    /// Posterior draws used in the numerator.
    pub m: usize,
    /// Proposal draws used in the denominator.
    pub l: usize,
    /// `θ̄` in the transformed space.
    pub theta_bar: Vec<f64>,
    /// `θ̄` mapped back to the original parameters.
    pub params_bar: Vec<f64>,
}

/// `ℓ + log π − log ordinate`.
pub fn assemble_marginal(log_lik: f64, log_prior: f64, log_ordinate: f64) -> f64 {
    log_lik + log_prior - log_ordinate
}

/// `log((1/n) Σ eˣ)`; `−∞` when every term is `−∞`.
pub fn log_mean_exp(x: &[f64]) -> f64 {
    let m = x.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if m == f64::NEG_INFINITY {
        return m;
    }
    m + (x.iter().map(|v| (v - m).exp()).sum::<f64>() / x.len() as f64).ln()
}

/// Multivariate normal log density with covariance `L Lᵀ`.
fn mvn_log_pdf(x: &[f64], mean: &[f64], chol: &DMatrix<f64>) -> f64 {
    let d = DVector::from_iterator(x.len(), x.iter().zip(mean).map(|(a, b)| a - b));
    let z = chol.solve_lower_triangular(&d).expect("nonsingular factor");
    let log_det: f64 = chol.diagonal().iter().map(|v| v.ln()).sum();
    -0.5 * z.norm_squared() - log_det - x.len() as f64 * LN_SQRT_2PI
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct CjConfig {
    /// Proposal draws for the denominator; the number of kept posterior
    /// draws when absent.
    pub l: Option<usize>,
    pub numerator: NumeratorLikelihood,
}

impl Default for CjConfig {
    fn default() -> Self {
        CjConfig {
            l: None,
            numerator: NumeratorLikelihood::Reuse,
        }
    }
}

/// Likelihood of a candidate; failures count as zero likelihood.
fn try_log_lik<T: Target>(target: &T, params: &[f64], key: u64) -> Result<f64> {
    match target.log_lik(params, key) {
        Ok(v) if !v.is_nan() => Ok(v),
        Ok(_) => Ok(f64::NEG_INFINITY),
        Err(e @ (Error::Io(_) | Error::InvalidConfig(_) | Error::Data { .. })) => Err(e),
        Err(e) => {
            log::warn!("marginal likelihood: evaluation at {params:?} failed: {e}");
            Ok(f64::NEG_INFINITY)
        }
    }
}

/// Posterior-ordinate estimate of the marginal likelihood from an MH chain.
///
/// `Q` is the chain's frozen proposal covariance centred at the current
/// point. The likelihood at `θ̄` is evaluated once and shared by all terms.
pub fn chib_jeliazkov<T: Target>(
    chain: &Chain,
    target: &T,
    prior: &PriorSpec,
    cfg: &CjConfig,
    seed: u64,
) -> Result<MarginalLikResult> {
    let layout = chain.layout;
    if target.layout() != layout {
        return Err(Error::InvalidConfig("chain and target parameter layouts differ".into()));
    }
    let kept = chain.kept_transformed();
    let m = kept.len();
    if m == 0 {
        return Err(Error::InvalidConfig("chain has no post-burn-in draws".into()));
    }
    let l = cfg.l.unwrap_or(m);
    if l == 0 {
        return Err(Error::InvalidConfig("L must be positive".into()));
    }
    let dim = layout.dim();
    let chol = chain
        .final_proposal
        .clone()
        .cholesky()
        .ok_or_else(|| Error::Numerical("proposal covariance is not positive definite".into()))?
        .l();

    let theta_bar: Vec<f64> = (0..dim)
        .map(|j| kept.iter().map(|t| t[j]).sum::<f64>() / m as f64)
        .collect();
    let params_bar = layout.untransform(&theta_bar)?;
    let lp_bar = log_prior(layout, &theta_bar, prior);
    let ll_bar = try_log_lik(target, &params_bar, derive_key(seed, Stream::ChibJeliazkov, 0, 2))?;
    if !ll_bar.is_finite() {
        return Err(Error::Numerical("likelihood at the posterior mean is not finite".into()));
    }

    let q_bar = |from: &[f64]| mvn_log_pdf(&theta_bar, from, &chol);
    let numerator: Vec<f64> = match cfg.numerator {
        NumeratorLikelihood::Reuse => (0..m)
            .map(|i| {
                let k = chain.burn_in + i;
                log_acceptance(ll_bar, lp_bar, chain.log_lik[k], chain.log_prior[k]) + q_bar(&kept[i])
            })
            .collect(),
        NumeratorLikelihood::Recompute => (0..m)
            .into_par_iter()
            .map(|i| {
                let k = chain.burn_in + i;
                let key = derive_key(seed, Stream::ChibJeliazkov, i as u64, 3);
                let ll = try_log_lik(target, &chain.draws[k], key)?;
                Ok(log_acceptance(ll_bar, lp_bar, ll, chain.log_prior[k]) + q_bar(&kept[i]))
            })
            .collect::<Result<_>>()?,
    };

    let denominator: Vec<f64> = (0..l)
        .into_par_iter()
        .map(|j| {
            let mut rng = stream_rng(seed, Stream::ChibJeliazkov, j as u64, 0);
            let e = DVector::from_fn(dim, |_, _| rng.sample::<f64, _>(StandardNormal));
            let step = &chol * e;
            let cand: Vec<f64> = theta_bar.iter().zip(step.iter()).map(|(a, s)| a + s).collect();
            let lp = log_prior(layout, &cand, prior);
            if !lp.is_finite() {
                return Ok(f64::NEG_INFINITY);
            }
            let key = derive_key(seed, Stream::ChibJeliazkov, j as u64, 1);
            let ll = try_log_lik(target, &layout.untransform(&cand)?, key)?;
            Ok(log_acceptance(ll, lp, ll_bar, lp_bar))
        })
        .collect::<Result<_>>()?;

    let log_numerator = log_mean_exp(&numerator);
    let log_denominator = log_mean_exp(&denominator);
    if log_denominator == f64::NEG_INFINITY {
        return Err(Error::Numerical(format!(
            "no proposal draw from the posterior mean was accepted; increase L (currently {l})"
        )));
    }
    let log_ordinate = log_numerator - log_denominator;
    Ok(MarginalLikResult {
        log_marginal: assemble_marginal(ll_bar, lp_bar, log_ordinate),
        log_lik: ll_bar,
        log_prior: lp_bar,
        log_ordinate,
        log_numerator,
        log_denominator,
        m,
        l,
        theta_bar,
        params_bar,
    })
}

/// `log π(p | a) − log π(p | b)`.
pub fn log_bayes_factor(a: &MarginalLikResult, b: &MarginalLikResult) -> f64 {
    a.log_marginal - b.log_marginal
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct JarqueBera {
    pub skewness: f64,
    pub kurtosis: f64,
    pub statistic: f64,
    pub p_value: f64,
}

/// Central sample moments `(mean, m2, m3, m4)` with divisor `n`.
fn central_moments(x: &[f64]) -> (f64, f64, f64, f64) {
    let n = x.len() as f64;
    let mean = x.iter().sum::<f64>() / n;
    let (mut m2, mut m3, mut m4) = (0.0, 0.0, 0.0);
    for v in x {
        let d = v - mean;
        let d2 = d * d;
        m2 += d2;
        m3 += d2 * d;
        m4 += d2 * d2;
    }
    (mean, m2 / n, m3 / n, m4 / n)
}

/// Below this size the χ² reference distribution is a poor approximation.
pub const JB_MIN_RECOMMENDED: usize = 20;

/// `JB = n (S²/6 + (K − 3)²/24)` against `χ²(2)`.
pub fn jarque_bera(x: &[f64]) -> Result<JarqueBera> {
    if x.len() < 3 {
        return Err(Error::InvalidParameter("Jarque–Bera needs at least 3 observations".into()));
    }
    if x.len() < JB_MIN_RECOMMENDED {
        log::warn!("Jarque–Bera on {} observations; the p-value is unreliable", x.len());
    }
    let (_, m2, m3, m4) = central_moments(x);
    if !(m2 > 0.0) {
        return Err(Error::Numerical("Jarque–Bera: zero variance".into()));
    }
    let skewness = m3 / m2.powf(1.5);
    let kurtosis = m4 / (m2 * m2);
    let n = x.len() as f64;
    let statistic = n * (skewness * skewness / 6.0 + (kurtosis - 3.0).powi(2) / 24.0);
    Ok(JarqueBera {
        skewness,
        kurtosis,
        statistic,
        p_value: chi2_sf(statistic, 2.0),
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LjungBox {
    pub rho1: f64,
    pub statistic: f64,
    pub p_value: f64,
    pub lags: usize,
}

pub const DEFAULT_LB_LAGS: usize = 12;

/// Sample autocorrelation at lag `k` (both sums about the full-sample mean).
pub fn autocorrelation(x: &[f64], k: usize) -> f64 {
    let n = x.len();
    let mean = x.iter().sum::<f64>() / n as f64;
    let denom: f64 = x.iter().map(|v| (v - mean).powi(2)).sum();
    let num: f64 = (0..n - k).map(|t| (x[t] - mean) * (x[t + k] - mean)).sum();
    num / denom
}

/// `Q = n (n + 2) Σ_{k ≤ lags} ρ̂_k² / (n − k)` against `χ²(lags)`.
pub fn ljung_box(x: &[f64], lags: usize) -> Result<LjungBox> {
    let n = x.len();
    if lags == 0 || n <= lags {
        return Err(Error::InvalidParameter(format!(
            "Ljung–Box needs more than {lags} observations and at least one lag"
        )));
    }
    let (_, m2, _, _) = central_moments(x);
    if !(m2 > 0.0) {
        return Err(Error::Numerical("Ljung–Box: zero variance".into()));
    }
    let nf = n as f64;
    let rho: Vec<f64> = (1..=lags).map(|k| autocorrelation(x, k)).collect();
    let statistic = nf * (nf + 2.0) * rho.iter().enumerate().map(|(i, r)| r * r / (nf - (i + 1) as f64)).sum::<f64>();
    Ok(LjungBox {
        rho1: rho[0],
        statistic,
        p_value: chi2_sf(statistic, lags as f64),
        lags,
    })
}

fn chi2_sf(x: f64, df: f64) -> f64 {
    ChiSquared::new(df).expect("positive degrees of freedom").sf(x)
}

/// Annual storage cost as a percentage of the price: `−100 [(1 − δ)¹² − 1]`.
pub fn storage_cost_annual(delta: f64) -> f64 {
    -100.0 * ((1.0 - delta).powi(12) - 1.0)
}

/// Price elasticity of demand at mean supply: `−1 / (b x̄)`.
pub fn price_elasticity(b: f64, x_bar: f64) -> f64 {
    -1.0 / (b * x_bar)
}

/// One model's row in a comparison.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelReport {
    pub model: String,
    pub log_marginal: Option<f64>,
    /// Log Bayes factor of the reference model against this one.
    pub log_bf_reference: Option<f64>,
    pub jarque_bera: Option<JarqueBera>,
    pub ljung_box: Option<LjungBox>,
    /// Percent per year; storage models only.
    pub storage_cost_pct: Option<f64>,
    pub elasticity: Option<f64>,
    pub posterior: Vec<ParamSummary>,
    pub marginal: Option<MarginalLikResult>,
}

impl ModelReport {
    pub fn new(model: impl Into<String>) -> Self {
        ModelReport {
            model: model.into(),
            log_marginal: None,
            log_bf_reference: None,
            jarque_bera: None,
            ljung_box: None,
            storage_cost_pct: None,
            elasticity: None,
            posterior: Vec::new(),
            marginal: None,
        }
    }

    pub fn with_marginal(mut self, m: MarginalLikResult) -> Self {
        self.log_marginal = Some(m.log_marginal);
        self.marginal = Some(m);
        self
    }

    /// Jarque–Bera on the PIT residuals, Ljung–Box on the Pearson residuals.
    pub fn with_residuals(mut self, pit: &[f64], pearson: &[f64]) -> Result<Self> {
        self.jarque_bera = Some(jarque_bera(pit)?);
        self.ljung_box = Some(ljung_box(pearson, DEFAULT_LB_LAGS)?);
        Ok(self)
    }
}

/// Models side by side; Bayes factors are relative to the first model.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ComparisonReport {
    pub reference: String,
    pub models: Vec<ModelReport>,
}

impl ComparisonReport {
    pub fn new(mut models: Vec<ModelReport>) -> Result<Self> {
        let first = models
            .first()
            .ok_or_else(|| Error::InvalidConfig("comparison needs at least one model".into()))?;
        let (reference, ref_ml) = (first.model.clone(), first.log_marginal);
        for m in models.iter_mut().skip(1) {
            m.log_bf_reference = ref_ml.zip(m.log_marginal).map(|(a, b)| a - b);
        }
        Ok(ComparisonReport { reference, models })
    }

    pub fn write_csv<W: Write>(&self, out: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        w.write_record([
            "model",
            "log_marginal",
            "log_bf_reference",
            "pit_skewness",
            "pit_kurtosis",
            "jb_pvalue",
            "rho1",
            "lb_pvalue",
            "storage_cost_pct",
            "elasticity",
        ])?;
        let f = |v: Option<f64>| v.map(|x| x.to_string()).unwrap_or_default();
        for m in &self.models {
            let jb = m.jarque_bera.as_ref();
            let lb = m.ljung_box.as_ref();
            w.write_record([
                m.model.clone(),
                f(m.log_marginal),
                f(m.log_bf_reference),
                f(jb.map(|j| j.skewness)),
                f(jb.map(|j| j.kurtosis)),
                f(jb.map(|j| j.p_value)),
                f(lb.map(|l| l.rho1)),
                f(lb.map(|l| l.p_value)),
                f(m.storage_cost_pct),
                f(m.elasticity),
            ])?;
        }
        w.flush()?;
        Ok(())
    }
}
