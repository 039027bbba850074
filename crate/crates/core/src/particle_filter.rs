//! Bootstrap particle filter, residuals and backward-sampling smoother.
//!
//! Particles are propagated with the transition density and reweighted by the
//! measurement density. The likelihood is conditioned on the first
//! observation. Weights live in log space. Resampling is systematic and
//! happens only when the effective sample size drops below a fraction of `N`.
//!
//! Every draw comes from a counter-based stream keyed by `(seed, period,
//! particle)`. Per-particle work runs in parallel and every reduction is a
//! sequential sum, so results are bit-identical for any thread count.

use std::io::Write;

use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::{stream_rng, Stream};
use crate::ssm::{PriceSeries, StateSpaceModel};
use crate::stats::{normal_log_pdf, std_normal_cdf, std_normal_quantile, weighted_quantile};

/// Bounds applied to PIT probabilities before the normal quantile transform.
pub const PIT_CLAMP: f64 = 1e-10;

const PAR_CHUNK: usize = 512;

/// Filter settings.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct FilterConfig {
    pub n_particles: usize,
    /// Resample when `ESS < resample_threshold · N`; 0 never resamples.
    pub resample_threshold: f64,
    /// Keep every period's particles and weights for the smoother.
    pub store_history: bool,
    /// Compute Pearson and PIT residuals.
    pub residuals: bool,
    /// Compute 2.5% / 97.5% weighted quantiles of `log f(x_t)`.
    pub bands: bool,
}

impl Default for FilterConfig {
    fn default() -> Self {
        FilterConfig {
            n_particles: 10_000,
            resample_threshold: 0.5,
            store_history: false,
            residuals: false,
            bands: false,
        }
    }
}

impl FilterConfig {
    /// Likelihood only.
    pub fn likelihood(n_particles: usize) -> Self {
        FilterConfig {
            n_particles,
            ..Self::default()
        }
    }

    /// Everything the diagnostics and plots need.
    pub fn full(n_particles: usize) -> Self {
        FilterConfig {
            n_particles,
            store_history: true,
            residuals: true,
            bands: true,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.n_particles < 2 {
            return Err(Error::InvalidConfig("the particle filter needs at least 2 particles".into()));
        }
        if !(0.0..=1.0).contains(&self.resample_threshold) {
            return Err(Error::InvalidConfig("resample_threshold must lie in [0, 1]".into()));
        }
        Ok(())
    }
}

/// A weighted particle approximation of the filtering distribution at one period.
#[derive(Debug, Clone, PartialEq)]
pub struct ParticleSystem {
    pub particles: Vec<f64>,
    /// Normalized weights.
    pub weights: Vec<f64>,
    /// Running log-likelihood up to this period.
    pub log_lik: f64,
    pub ess_history: Vec<f64>,
    pub resampled_flags: Vec<bool>,
}

impl ParticleSystem {
    /// A system with the given particles and weights, normalized here.
    pub fn from_weights(particles: Vec<f64>, weights: Vec<f64>) -> Result<Self> {
        if particles.len() != weights.len() || particles.is_empty() {
            return Err(Error::InvalidParameter("particles and weights must match and be nonempty".into()));
        }
        let total: f64 = weights.iter().sum();
        if !(total > 0.0) || weights.iter().any(|w| !(*w >= 0.0)) {
            return Err(Error::InvalidParameter("weights must be nonnegative with a positive sum".into()));
        }
        let weights: Vec<f64> = weights.iter().map(|w| w / total).collect();
        let ess = effective_sample_size(&weights);
        Ok(ParticleSystem {
            particles,
            weights,
            log_lik: 0.0,
            ess_history: vec![ess],
            resampled_flags: vec![false],
        })
    }

    pub fn ess(&self) -> f64 {
        effective_sample_size(&self.weights)
    }

    /// `Σ_k h(x_t^k, x_{t+1}^k) W_t^k`, where `propagated[k]` was drawn from
    /// the transition density given `particles[k]`.
    pub fn filtered_functional<H: Fn(f64, f64) -> f64>(&self, propagated: &[f64], h: H) -> f64 {
        weighted_functional(&self.particles, propagated, &self.weights, h)
    }
}

/// `Σ_k h(x[k], next[k]) w[k]`, summed in index order.
pub fn weighted_functional<H: Fn(f64, f64) -> f64>(x: &[f64], next: &[f64], w: &[f64], h: H) -> f64 {
    x.iter().zip(next).zip(w).map(|((&a, &b), &wk)| wk * h(a, b)).sum()
}

/// `[Σ W²]⁻¹` for normalized weights.
pub fn effective_sample_size(weights: &[f64]) -> f64 {
    1.0 / weights.iter().map(|w| w * w).sum::<f64>()
}

/// Systematic resampling: one uniform offset, `N` evenly spaced pointers.
/// Index `k` appears `⌊N W_k⌋` or `⌈N W_k⌉` times.
pub fn systematic_resample<R: Rng + ?Sized>(weights: &[f64], rng: &mut R) -> Vec<usize> {
    systematic_resample_with(weights, rng.random::<f64>())
}

/// [`systematic_resample`] with the offset `u ∈ [0, 1)` given explicitly.
pub fn systematic_resample_with(weights: &[f64], u: f64) -> Vec<usize> {
    let n = weights.len();
    let mut out = Vec::with_capacity(n);
    let mut cum = weights[0];
    let mut k = 0;
    for i in 0..n {
        let pointer = (i as f64 + u) / n as f64;
        while pointer > cum && k + 1 < n {
            k += 1;
            cum += weights[k];
        }
        out.push(k);
    }
    out
}

/// A functional `h(x_t, x_{t+1})` whose filtered mean is reported per period.
pub type Functional<'a> = &'a (dyn Fn(f64, f64) -> f64 + Sync);

/// Per-period particles and weights, stored before resampling.
#[derive(Debug, Clone, PartialEq)]
pub struct ParticleHistory {
    pub particles: Vec<Vec<f64>>,
    pub weights: Vec<Vec<f64>>,
}

/// Results of one filter pass over `T` observations.
#[derive(Debug, Clone, PartialEq)]
pub struct FilterOutput {
    /// `Σ_{t=2}^T log π̂(p_t | p_{1:t−1})`.
    pub log_lik: f64,
    /// Per-period terms of `log_lik`; zero at `t = 1`.
    pub loglik_terms: Vec<f64>,
    pub ess: Vec<f64>,
    pub resampled: Vec<bool>,
    /// `E(log f(x_t) | p_{1:t})`.
    pub filtered_log_f: Vec<f64>,
    /// `E(k_t | p_{1:t}) = p_t − E(log f(x_t) | p_{1:t})`.
    pub filtered_trend: Vec<f64>,
    /// `E(x_t | p_{1:t})`.
    pub filtered_state: Vec<f64>,
    /// 2.5% and 97.5% weighted quantiles of `log f(x_t)`; empty unless requested.
    pub log_f_band: Vec<(f64, f64)>,
    /// Filtered means of the requested functionals, one vector per functional.
    pub functionals: Vec<Vec<f64>>,
    /// Pearson residuals `η_t` for `t = 2..T`; empty unless requested.
    pub pearson: Vec<f64>,
    /// PIT residuals `ξ_t` for `t = 2..T`; empty unless requested.
    pub pit: Vec<f64>,
    /// Number of PIT probabilities clamped to `[1e−10, 1 − 1e−10]`.
    pub pit_clamped: usize,
    /// Filtering approximation at `T` before any resampling.
    pub final_system: ParticleSystem,
    pub history: Option<ParticleHistory>,
}

/// Runs the bootstrap particle filter over `prices`.
pub fn bpf<M: StateSpaceModel>(
    model: &M,
    prices: &PriceSeries,
    cfg: &FilterConfig,
    seed: u64,
    functionals: &[Functional],
) -> Result<FilterOutput> {
    cfg.validate()?;
    let p = &prices.log_prices;
    let t_len = p.len();
    let n = cfg.n_particles;
    let v = model.trend_sd();
    if !(v > 0.0 && v.is_finite()) {
        return Err(Error::InvalidParameter("trend standard deviation must be positive".into()));
    }
    let ln_n = (n as f64).ln();

    // Current (post-resampling) particles, their log f and log weights.
    let mut x = vec![0.0; n];
    let mut h = vec![0.0; n];
    x.par_iter_mut()
        .zip(h.par_iter_mut())
        .enumerate()
        .with_min_len(PAR_CHUNK)
        .for_each(|(k, (xk, hk))| {
            let mut rng = stream_rng(seed, Stream::Initial, 0, k as u64);
            *xk = model.sample_initial(&mut rng);
            *hk = model.log_price_component(*xk);
        });
    let mut log_w = vec![-ln_n; n];
    let mut w = vec![1.0 / n as f64; n];

    let mut out = FilterOutput {
        log_lik: 0.0,
        loglik_terms: Vec::with_capacity(t_len),
        ess: Vec::with_capacity(t_len),
        resampled: Vec::with_capacity(t_len),
        filtered_log_f: Vec::with_capacity(t_len),
        filtered_trend: Vec::with_capacity(t_len),
        filtered_state: Vec::with_capacity(t_len),
        log_f_band: Vec::new(),
        functionals: vec![Vec::with_capacity(t_len); functionals.len()],
        pearson: Vec::new(),
        pit: Vec::new(),
        pit_clamped: 0,
        final_system: ParticleSystem {
            particles: Vec::new(),
            weights: Vec::new(),
            log_lik: 0.0,
            ess_history: Vec::new(),
            resampled_flags: Vec::new(),
        },
        history: cfg.store_history.then(|| ParticleHistory {
            particles: Vec::with_capacity(t_len),
            weights: Vec::with_capacity(t_len),
        }),
    };

    // period 1: uniform weights, no likelihood term
    out.loglik_terms.push(0.0);
    out.ess.push(effective_sample_size(&w));
    out.resampled.push(false);
    record_filtered(&mut out, cfg, p[0], &x, &h, &w);
    if let Some(hist) = out.history.as_mut() {
        hist.particles.push(x.clone());
        hist.weights.push(w.clone());
    }

    let mut x_new = vec![0.0; n];
    let mut h_new = vec![0.0; n];
    let mut lw_new = vec![0.0; n];
    let mut scratch = vec![0.0; n];

    for t in 1..t_len {
        let (pt, pp) = (p[t], p[t - 1]);
        x_new
            .par_iter_mut()
            .zip(h_new.par_iter_mut())
            .zip(lw_new.par_iter_mut())
            .enumerate()
            .with_min_len(PAR_CHUNK)
            .for_each(|(k, ((xn, hn), lwn))| {
                let mut rng = stream_rng(seed, Stream::Propagate, t as u64, k as u64);
                *xn = model.sample_transition(x[k], &mut rng);
                *hn = model.log_price_component(*xn);
                *lwn = log_w[k] + model.measurement_log_density_h(pt, pp, *hn, h[k]);
            });

        // predictive quantities for period t use the weights of t − 1
        for (j, f) in functionals.iter().enumerate() {
            out.functionals[j].push(weighted_functional(&x, &x_new, &w, f));
        }
        if cfg.residuals {
            let (eta, xi, clamped) = residuals_at(&h, &h_new, &w, pt - pp, v, &mut scratch);
            out.pearson.push(eta);
            out.pit.push(xi);
            out.pit_clamped += clamped as usize;
        }

        let max = lw_new.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        if !max.is_finite() {
            return Err(Error::FilterDegeneracy { period: t + 1 });
        }
        let total: f64 = lw_new.iter().map(|l| (l - max).exp()).sum();
        let term = max + total.ln();
        out.log_lik += term;
        out.loglik_terms.push(term);
        let ln_total = total.ln();
        for k in 0..n {
            log_w[k] = lw_new[k] - max - ln_total;
            w[k] = log_w[k].exp();
        }
        let ess = effective_sample_size(&w);
        out.ess.push(ess);
        record_filtered(&mut out, cfg, pt, &x_new, &h_new, &w);
        if let Some(hist) = out.history.as_mut() {
            hist.particles.push(x_new.clone());
            hist.weights.push(w.clone());
        }

        if t + 1 == t_len {
            out.final_system = ParticleSystem {
                particles: x_new.clone(),
                weights: w.clone(),
                log_lik: out.log_lik,
                ess_history: Vec::new(),
                resampled_flags: Vec::new(),
            };
        }

        let resample = ess < cfg.resample_threshold * n as f64;
        out.resampled.push(resample);
        if resample {
            let mut rng = stream_rng(seed, Stream::Resample, t as u64, 0);
            let idx = systematic_resample(&w, &mut rng);
            for (k, &a) in idx.iter().enumerate() {
                x[k] = x_new[a];
                h[k] = h_new[a];
            }
            log_w.fill(-ln_n);
            w.fill(1.0 / n as f64);
        } else {
            std::mem::swap(&mut x, &mut x_new);
            std::mem::swap(&mut h, &mut h_new);
        }
    }

    if t_len == 1 {
        out.final_system = ParticleSystem {
            particles: x.clone(),
            weights: w.clone(),
            log_lik: 0.0,
            ess_history: Vec::new(),
            resampled_flags: Vec::new(),
        };
    }
    out.final_system.ess_history = out.ess.clone();
    out.final_system.resampled_flags = out.resampled.clone();

    if !functionals.is_empty() {
        // one more propagation so the functionals at T see x_{T+1}
        let next: Vec<f64> = (0..n)
            .into_par_iter()
            .with_min_len(PAR_CHUNK)
            .map(|k| {
                let mut rng = stream_rng(seed, Stream::Propagate, t_len as u64, k as u64);
                model.sample_transition(x[k], &mut rng)
            })
            .collect();
        for (j, f) in functionals.iter().enumerate() {
            out.functionals[j].push(weighted_functional(&x, &next, &w, f));
        }
    }
    Ok(out)
}

/// Log-likelihood estimate only.
pub fn bpf_loglik<M: StateSpaceModel>(model: &M, prices: &PriceSeries, n_particles: usize, seed: u64) -> Result<f64> {
    Ok(bpf(model, prices, &FilterConfig::likelihood(n_particles), seed, &[])?.log_lik)
}

fn record_filtered(out: &mut FilterOutput, cfg: &FilterConfig, p: f64, x: &[f64], h: &[f64], w: &[f64]) {
    let mean_h: f64 = h.iter().zip(w).map(|(a, b)| a * b).sum();
    let mean_x: f64 = x.iter().zip(w).map(|(a, b)| a * b).sum();
    out.filtered_log_f.push(mean_h);
    out.filtered_trend.push(p - mean_h);
    out.filtered_state.push(mean_x);
    if cfg.bands {
        out.log_f_band
            .push((weighted_quantile(h, w, 0.025), weighted_quantile(h, w, 0.975)));
    }
}

/// Pearson and PIT residuals for one period from the predictive particle
/// cloud: `d_k = log f(x_{t+1}^k) − log f(x_t^k)` with weights `W_t^k`, and
/// the observed log-price change `dp`.
fn residuals_at(h: &[f64], h_next: &[f64], w: &[f64], dp: f64, v: f64, d: &mut [f64]) -> (f64, f64, bool) {
    d.par_iter_mut()
        .enumerate()
        .with_min_len(PAR_CHUNK)
        .for_each(|(k, dk)| *dk = h_next[k] - h[k]);
    let mean: f64 = d.iter().zip(w).map(|(a, b)| a * b).sum();
    let var: f64 = d.iter().zip(w).map(|(a, b)| b * (a - mean).powi(2)).sum::<f64>() + v * v;
    assert!(var > 0.0, "predictive variance must be positive");
    let eta = (dp - mean) / var.sqrt();

    let mut cdf = vec![0.0; d.len()];
    cdf.par_iter_mut()
        .enumerate()
        .with_min_len(PAR_CHUNK)
        .for_each(|(k, c)| *c = std_normal_cdf((dp - d[k]) / v));
    let u: f64 = cdf.iter().zip(w).map(|(a, b)| a * b).sum();
    let (xi, clamped) = pit_transform(u);
    (eta, xi, clamped)
}

/// `Φ⁻¹(u)` with `u` clamped to `[1e−10, 1 − 1e−10]`; the flag reports a clamp.
pub fn pit_transform(u: f64) -> (f64, bool) {
    let c = u.clamp(PIT_CLAMP, 1.0 - PIT_CLAMP);
    (std_normal_quantile(c), c != u)
}

/// Trajectories drawn from the joint smoothing distribution.
#[derive(Debug, Clone, PartialEq)]
pub struct SmootherOutput {
    /// `draws[j][t]` is `x_t` on trajectory `j`.
    pub draws: Vec<Vec<f64>>,
    /// `E(log f(x_t) | p_{1:T})`, Rao–Blackwellized over the backward weights.
    pub smoothed_log_f: Vec<f64>,
    /// `E(k_t | p_{1:T}) = p_t − E(log f(x_t) | p_{1:T})`.
    pub smoothed_trend: Vec<f64>,
}

/// Backward-sampling smoother over a filter run with stored history.
///
/// Going back from `T`, a trajectory's `x_t` is drawn from the stored
/// particles with weights `W_t^k π(x_{t+1} | x_t^k) π(p_{t+1} | p_t, x_t^k, x_{t+1})`.
/// The measurement term is needed because the price change depends on both
/// states. At each `t` the smoothed mean averages `log f(x_t^k)` under these
/// weights rather than the sampled value alone, so at `t = T` it equals the
/// filtered mean.
pub fn particle_smoother<M: StateSpaceModel>(
    model: &M,
    prices: &PriceSeries,
    filter: &FilterOutput,
    n_draws: usize,
    seed: u64,
) -> Result<SmootherOutput> {
    let hist = filter.history.as_ref().ok_or(Error::MissingHistory)?;
    let p = &prices.log_prices;
    let t_len = hist.particles.len();
    if t_len != p.len() {
        return Err(Error::InvalidParameter("filter history does not match the price series".into()));
    }
    if n_draws == 0 {
        return Err(Error::InvalidParameter("need at least one smoothing draw".into()));
    }

    // per-period log f and transition means of the stored particles
    let lf: Vec<Vec<f64>> = hist
        .particles
        .iter()
        .map(|xs| xs.par_iter().with_min_len(PAR_CHUNK).map(|&x| model.log_price_component(x)).collect())
        .collect();
    let means: Vec<Vec<f64>> = hist
        .particles
        .iter()
        .map(|xs| xs.par_iter().with_min_len(PAR_CHUNK).map(|&x| model.transition_mean(x)).collect())
        .collect();
    let log_w: Vec<Vec<f64>> = hist.weights.iter().map(|ws| ws.iter().map(|w| w.ln()).collect()).collect();
    let v = model.trend_sd();

    type Trajectory = (Vec<f64>, Vec<f64>);
    let results: Vec<Result<Trajectory>> = (0..n_draws)
        .into_par_iter()
        .map(|j| {
            let mut path = vec![0.0; t_len];
            let mut rb = vec![0.0; t_len];
            let last = t_len - 1;
            let mut rng = stream_rng(seed, Stream::Smoother, j as u64, last as u64);
            let mut idx = draw_index(&hist.weights[last], rng.random::<f64>());
            path[last] = hist.particles[last][idx];
            rb[last] = hist.weights[last].iter().zip(&lf[last]).map(|(a, b)| a * b).sum();
            let mut bw = vec![0.0; hist.weights[0].len()];
            for t in (0..last).rev() {
                let x_next = path[t + 1];
                let h_next = lf[t + 1][idx];
                let dp = p[t + 1] - p[t];
                let mut max = f64::NEG_INFINITY;
                for k in 0..bw.len() {
                    let l = log_w[t][k]
                        + normal_log_pdf(x_next, means[t][k], 1.0)
                        + normal_log_pdf(dp, h_next - lf[t][k], v);
                    bw[k] = l;
                    max = max.max(l);
                }
                if !max.is_finite() {
                    return Err(Error::Numerical(format!("backward weights vanished at period {}", t + 1)));
                }
                let mut total = 0.0;
                for b in bw.iter_mut() {
                    *b = (*b - max).exp();
                    total += *b;
                }
                let mut acc = 0.0;
                for (b, l) in bw.iter_mut().zip(&lf[t]) {
                    *b /= total;
                    acc += *b * l;
                }
                rb[t] = acc;
                let mut rng = stream_rng(seed, Stream::Smoother, j as u64, t as u64);
                idx = draw_index(&bw, rng.random::<f64>());
                path[t] = hist.particles[t][idx];
            }
            Ok((path, rb))
        })
        .collect();

    let mut draws = Vec::with_capacity(n_draws);
    let mut sum = vec![0.0; t_len];
    for r in results {
        let (path, rb) = r?;
        for (s, v) in sum.iter_mut().zip(&rb) {
            *s += v;
        }
        draws.push(path);
    }
    let smoothed_log_f: Vec<f64> = sum.iter().map(|s| s / n_draws as f64).collect();
    let smoothed_trend = p.iter().zip(&smoothed_log_f).map(|(a, b)| a - b).collect();
    Ok(SmootherOutput {
        draws,
        smoothed_log_f,
        smoothed_trend,
    })
}

/// Index `k` with cumulative weight first exceeding `u`.
fn draw_index(weights: &[f64], u: f64) -> usize {
    let mut cum = 0.0;
    for (k, w) in weights.iter().enumerate() {
        cum += w;
        if u < cum {
            return k;
        }
    }
    weights.iter().rposition(|&w| w > 0.0).unwrap_or(weights.len() - 1)
}

impl FilterOutput {
    /// Writes one row per period:
    /// `t,date,log_price,loglik_term,trend_mean,log_f_mean,trend_lo,trend_hi,state_mean,ess,resampled,pearson,pit`.
    /// Band and residual columns are empty when not computed.
    pub fn write_csv<W: Write>(&self, out: W, prices: &PriceSeries) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        w.write_record([
            "t",
            "date",
            "log_price",
            "loglik_term",
            "trend_mean",
            "log_f_mean",
            "trend_lo",
            "trend_hi",
            "state_mean",
            "ess",
            "resampled",
            "pearson",
            "pit",
        ])?;
        let opt = |v: Option<&f64>| v.map(|x| x.to_string()).unwrap_or_default();
        for t in 0..prices.len() {
            let p = prices.log_prices[t];
            let band = self.log_f_band.get(t);
            let res = t.checked_sub(1);
            w.write_record([
                (t + 1).to_string(),
                prices.dates[t].to_string(),
                p.to_string(),
                self.loglik_terms[t].to_string(),
                self.filtered_trend[t].to_string(),
                self.filtered_log_f[t].to_string(),
                band.map(|b| (p - b.1).to_string()).unwrap_or_default(),
                band.map(|b| (p - b.0).to_string()).unwrap_or_default(),
                self.filtered_state[t].to_string(),
                self.ess[t].to_string(),
                (self.resampled[t] as u8).to_string(),
                opt(res.and_then(|i| self.pearson.get(i))),
                opt(res.and_then(|i| self.pit.get(i))),
            ])?;
        }
        w.flush()?;
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::Stream;

    /// `x_t ~ N(0, 1)` iid, `log f(x) = −b x`.
    struct Iid {
        b: f64,
        v: f64,
    }

    impl StateSpaceModel for Iid {
        fn sample_initial<R: Rng + ?Sized>(&self, rng: &mut R) -> f64 {
            rng.sample(rand_distr::StandardNormal)
        }
        fn transition_mean(&self, _x_prev: f64) -> f64 {
            0.0
        }
        fn log_price_component(&self, x: f64) -> f64 {
            -self.b * x
        }
        fn trend_sd(&self) -> f64 {
            self.v
        }
    }

    fn series(p: Vec<f64>) -> PriceSeries {
        PriceSeries::from_log_prices(p, "test").unwrap()
    }

    #[test]
    fn systematic_resample_examples() {
        assert_eq!(systematic_resample_with(&[1.0, 0.0, 0.0, 0.0], 0.7), vec![0, 0, 0, 0]);
        assert_eq!(systematic_resample_with(&[0.25; 4], 0.3), vec![0, 1, 2, 3]);
        assert_eq!(systematic_resample_with(&[0.0, 0.0, 1.0], 0.99), vec![2, 2, 2]);
    }

    #[test]
    fn systematic_counts_are_floor_or_ceil() {
        let mut rng = stream_rng(4, Stream::Experiment, 0, 0);
        for _ in 0..200 {
            let n = rng.random_range(2..40);
            let raw: Vec<f64> = (0..n).map(|_| rng.random::<f64>().powi(3)).collect();
            let s: f64 = raw.iter().sum();
            let w: Vec<f64> = raw.iter().map(|x| x / s).collect();
            let idx = systematic_resample(&w, &mut rng);
            assert_eq!(idx.len(), n);
            for k in 0..n {
                let c = idx.iter().filter(|&&i| i == k).count() as f64;
                let e = n as f64 * w[k];
                assert!(c >= e.floor() - 1e-9 && c <= e.ceil() + 1e-9, "count {c} vs {e}");
            }
        }
    }

    #[test]
    fn ess_of_uniform_weights_is_n() {
        let w = vec![0.001; 1000];
        assert!((effective_sample_size(&w) - 1000.0).abs() < 1e-9);
    }

    #[test]
    fn functional_examples() {
        let sys = ParticleSystem::from_weights(vec![-1.0, 0.5, 2.0], vec![0.2, 0.3, 0.5]).unwrap();
        let next = [0.0; 3];
        assert!((sys.filtered_functional(&next, |_, _| 1.0) - 1.0).abs() < 1e-15);
        let b = 0.4;
        let got = sys.filtered_functional(&next, |x, _| -b * x);
        let oracle = 0.2 * 0.4 + 0.3 * -0.2 + 0.5 * -0.8;
        assert!((got - oracle).abs() < 1e-15);
        let eq = ParticleSystem::from_weights(vec![3.0, 1.0, 4.0, 2.0], vec![1.0; 4]).unwrap();
        let frac = eq.filtered_functional(&[0.0; 4], |x, _| (x <= 2.5) as u8 as f64);
        assert_eq!(frac, 0.5);
    }

    #[test]
    fn pit_transform_examples() {
        assert_eq!(pit_transform(0.5), (0.0, false));
        let (xi, c) = pit_transform(std_normal_cdf(1.96));
        assert!((xi - 1.96).abs() < 1e-9 && !c);
        let (lo, c) = pit_transform(0.0);
        assert!(c && lo.is_finite() && lo < -6.0);
    }

    #[test]
    fn no_storage_effect_gives_scaled_trend_shocks() {
        let m = Iid { b: 0.0, v: 0.1 };
        let p = vec![0.0, 0.05, -0.02, 0.1];
        let cfg = FilterConfig {
            residuals: true,
            ..FilterConfig::likelihood(50)
        };
        let out = bpf(&m, &series(p.clone()), &cfg, 1, &[]).unwrap();
        for t in 1..p.len() {
            assert!((out.pearson[t - 1] - (p[t] - p[t - 1]) / 0.1).abs() < 1e-12);
            assert!((out.pit[t - 1] - (p[t] - p[t - 1]) / 0.1).abs() < 1e-9);
        }
        // zero-variance predictive: every term is the same normal density
        let oracle: f64 = (1..p.len()).map(|t| normal_log_pdf(p[t], p[t - 1], 0.1)).sum();
        assert!((out.log_lik - oracle).abs() < 1e-10);
        assert!(out.ess.iter().all(|&e| (e - 50.0).abs() < 1e-9));
        assert!(out.resampled.iter().all(|&r| !r));
    }

    #[test]
    fn weights_normalized_and_lengths() {
        let m = Iid { b: 0.8, v: 0.05 };
        let p: Vec<f64> = (0..30).map(|t| (t as f64 * 0.7).sin() * 0.5).collect();
        let out = bpf(&m, &series(p), &FilterConfig::full(500), 3, &[]).unwrap();
        assert_eq!(out.pearson.len(), 29);
        assert_eq!(out.pit.len(), 29);
        assert_eq!(out.loglik_terms.len(), 30);
        assert_eq!(out.loglik_terms[0], 0.0);
        assert!((out.loglik_terms.iter().sum::<f64>() - out.log_lik).abs() < 1e-9);
        let hist = out.history.as_ref().unwrap();
        for w in &hist.weights {
            assert!((w.iter().sum::<f64>() - 1.0).abs() < 1e-12);
            assert!(w.iter().all(|&x| x >= 0.0));
        }
        assert!(out.ess.iter().all(|&e| e > 0.0 && e <= 500.0 + 1e-9));
        assert!(out.resampled.iter().any(|&r| r));
        assert_eq!(out.final_system.weights, hist.weights[29]);
    }

    /// Sequential importance sampling written out directly.
    fn direct_sis(m: &Iid, p: &[f64], n: usize, seed: u64) -> f64 {
        let mut x: Vec<f64> = (0..n)
            .map(|k| m.sample_initial(&mut stream_rng(seed, Stream::Initial, 0, k as u64)))
            .collect();
        let mut log_w = vec![-(n as f64).ln(); n];
        let mut ll = 0.0;
        for t in 1..p.len() {
            let mut lw = vec![0.0; n];
            for k in 0..n {
                let xn = m.sample_transition(x[k], &mut stream_rng(seed, Stream::Propagate, t as u64, k as u64));
                lw[k] = log_w[k] + m.measurement_log_density(p[t], p[t - 1], xn, x[k]);
                x[k] = xn;
            }
            let max = lw.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let s: f64 = lw.iter().map(|l| (l - max).exp()).sum();
            ll += max + s.ln();
            for k in 0..n {
                log_w[k] = lw[k] - max - s.ln();
            }
        }
        ll
    }

    #[test]
    fn zero_threshold_is_sequential_importance_sampling() {
        let m = Iid { b: 0.5, v: 0.2 };
        let p = vec![0.0, 0.3, -0.1, 0.4, 0.2];
        let cfg = FilterConfig {
            resample_threshold: 0.0,
            ..FilterConfig::likelihood(64)
        };
        let out = bpf(&m, &series(p.clone()), &cfg, 11, &[]).unwrap();
        assert!(out.resampled.iter().all(|&r| !r));
        assert_eq!(out.log_lik, direct_sis(&m, &p, 64, 11));
    }

    #[test]
    fn thread_count_does_not_change_results() {
        let m = Iid { b: 0.6, v: 0.05 };
        let p: Vec<f64> = (0..40).map(|t| (t as f64 * 0.3).cos() * 0.4).collect();
        let s = series(p);
        let run = |threads: usize| {
            rayon::ThreadPoolBuilder::new()
                .num_threads(threads)
                .build()
                .unwrap()
                .install(|| bpf(&m, &s, &FilterConfig::full(3000), 5, &[]).unwrap())
        };
        let (a, b) = (run(1), run(4));
        assert_eq!(a.log_lik.to_bits(), b.log_lik.to_bits());
        assert_eq!(a.pearson, b.pearson);
        assert_eq!(a.history, b.history);
    }

    #[test]
    fn degeneracy_names_the_period() {
        let m = Iid { b: 0.1, v: 1e-3 };
        // the squared standardized jump overflows, so every log weight is -inf
        let p = vec![0.0, 0.0, 1e200];
        match bpf(&m, &series(p), &FilterConfig::likelihood(10), 1, &[]) {
            Err(Error::FilterDegeneracy { period }) => assert_eq!(period, 3),
            other => panic!("expected degeneracy, got {other:?}"),
        }
    }

    #[test]
    fn functionals_include_the_last_period() {
        let m = Iid { b: 0.5, v: 0.1 };
        let p = vec![0.0, 0.1, 0.2];
        let one: Functional = &|_, _| 1.0;
        let out = bpf(&m, &series(p), &FilterConfig::likelihood(100), 2, &[one]).unwrap();
        assert_eq!(out.functionals[0].len(), 3);
        assert!(out.functionals[0].iter().all(|&x| (x - 1.0).abs() < 1e-12));
    }

    /// Exact two-period smoothing marginal of `x_1` by enumeration.
    #[test]
    fn smoother_two_period_marginal() {
        let m = Iid { b: 0.7, v: 0.3 };
        let p = vec![0.0, 0.4];
        let cfg = FilterConfig {
            store_history: true,
            resample_threshold: 0.0,
            ..FilterConfig::likelihood(4)
        };
        let out = bpf(&m, &series(p.clone()), &cfg, 8, &[]).unwrap();
        let hist = out.history.clone().unwrap();
        let (x1, x2, w2) = (&hist.particles[0], &hist.particles[1], &hist.weights[1]);
        // joint over (x_1 = x1[i], x_2 = x2[j]): W_2^j chooses j; given x_2^j
        // the backward kernel weights i by W_1^i π(x2|x1^i) π(p2|p1, x1^i, x2^j)
        let mut marginal = [0.0; 4];
        for j in 0..4 {
            let mut bw = [0.0; 4];
            for i in 0..4 {
                bw[i] = 0.25 * m.transition_density(x2[j], x1[i]) * m.measurement_density(p[1], p[0], x2[j], x1[i]);
            }
            let s: f64 = bw.iter().sum();
            for i in 0..4 {
                marginal[i] += w2[j] * bw[i] / s;
            }
        }
        let oracle_mean: f64 = (0..4).map(|i| marginal[i] * -0.7 * x1[i]).sum();
        let sm = particle_smoother(&m, &series(p.clone()), &out, 20_000, 3).unwrap();
        // Rao–Blackwellized mean: MC error only from the draw of x_2
        assert!((sm.smoothed_log_f[0] - oracle_mean).abs() < 0.02, "{} vs {oracle_mean}", sm.smoothed_log_f[0]);
        let mut counts = [0.0; 4];
        for d in &sm.draws {
            let i = x1.iter().position(|&x| x == d[0]).unwrap();
            counts[i] += 1.0 / 20_000.0;
        }
        for i in 0..4 {
            let se = (marginal[i] * (1.0 - marginal[i]) / 20_000.0).sqrt();
            assert!((counts[i] - marginal[i]).abs() < 4.0 * se + 1e-12, "{i}: {} vs {}", counts[i], marginal[i]);
        }
        assert!((sm.smoothed_log_f[1] - out.filtered_log_f[1]).abs() < 1e-12);
    }

    #[test]
    fn smoother_requires_history() {
        let m = Iid { b: 0.7, v: 0.3 };
        let s = series(vec![0.0, 0.1]);
        let out = bpf(&m, &s, &FilterConfig::likelihood(10), 1, &[]).unwrap();
        assert!(matches!(particle_smoother(&m, &s, &out, 5, 1), Err(Error::MissingHistory)));
    }

    #[test]
    fn csv_rows() {
        let m = Iid { b: 0.7, v: 0.3 };
        let s = series(vec![0.0, 0.1, 0.05]);
        let out = bpf(&m, &s, &FilterConfig::full(20), 1, &[]).unwrap();
        let mut buf = Vec::new();
        out.write_csv(&mut buf, &s).unwrap();
        let text = String::from_utf8(buf).unwrap();
        let lines: Vec<&str> = text.lines().collect();
        assert_eq!(lines.len(), 4);
        assert!(lines[1].ends_with(",,"));
        assert!(!lines[2].ends_with(','));
    }
}
