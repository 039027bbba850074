//! Invariants checked over generated inputs.

use std::sync::OnceLock;

use proptest::prelude::*;

use storage_ssm::equilibrium::{solve_equilibrium, EquilibriumSolution, ModelParams, SolverConfig};
use storage_ssm::io::{read_price_csv, write_price_csv};
use storage_ssm::kalman::{kalman_loglik, LgllParams};
use storage_ssm::model_eval::{jarque_bera, log_bayes_factor, storage_cost_annual, MarginalLikResult};
use storage_ssm::particle_filter::{effective_sample_size, systematic_resample_with};
use storage_ssm::samplers::{log_prior, ParamLayout, PriorSpec};
use storage_ssm::ssm::PriceSeries;

fn solution() -> &'static EquilibriumSolution {
    static SOL: OnceLock<EquilibriumSolution> = OnceLock::new();
    SOL.get_or_init(|| solve_equilibrium(&ModelParams::new(0.011, 0.42, 0.097).unwrap(), &SolverConfig::default()).unwrap())
}

fn normalized(raw: &[f64]) -> Vec<f64> {
    let s: f64 = raw.iter().sum();
    raw.iter().map(|w| w / s).collect()
}

fn marginal(log_marginal: f64) -> MarginalLikResult {
    MarginalLikResult {
        log_marginal,
        log_lik: 0.0,
        log_prior: 0.0,
        log_ordinate: 0.0,
        log_numerator: 0.0,
        log_denominator: 0.0,
        m: 1,
        l: 1,
        theta_bar: Vec::new(),
        params_bar: Vec::new(),
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(128))]

    #[test]
    fn transform_round_trip(v in 1e-3f64..5.0, delta in 1e-3f64..0.999, b in 1e-2f64..20.0) {
        let layout = ParamLayout::Storage;
        let params = [v, delta, b];
        let back = layout.untransform(&layout.transform(&params).unwrap()).unwrap();
        for (x, y) in params.iter().zip(&back) {
            prop_assert!((x - y).abs() <= 1e-9 * x.abs());
        }
    }

    #[test]
    fn log_prior_is_finite(t in prop::collection::vec(-8.0f64..8.0, 3)) {
        prop_assert!(log_prior(ParamLayout::Storage, &t, &PriorSpec::default()).is_finite());
    }

    #[test]
    fn systematic_counts_are_floor_or_ceil(
        raw in prop::collection::vec(1e-6f64..1.0, 1..200),
        u in 0.0f64..1.0,
    ) {
        let w = normalized(&raw);
        let n = w.len();
        let idx = systematic_resample_with(&w, u);
        prop_assert_eq!(idx.len(), n);
        let mut counts = vec![0usize; n];
        for i in idx {
            counts[i] += 1;
        }
        for (c, wk) in counts.iter().zip(&w) {
            let e = n as f64 * wk;
            // floor or ceil, with slack for rounding in the cumulative sum
            prop_assert!((*c as f64 - e).abs() < 1.0 + 1e-9, "{} vs {}", c, e);
        }
    }

    #[test]
    fn ess_lies_between_one_and_n(raw in prop::collection::vec(1e-9f64..1.0, 1..300)) {
        let w = normalized(&raw);
        let ess = effective_sample_size(&w);
        prop_assert!(ess >= 1.0 - 1e-9 && ess <= w.len() as f64 + 1e-9);
    }

    #[test]
    fn price_function_is_nonincreasing(x in -4.0f64..16.0, dx in 1e-4f64..2.0) {
        let s = solution();
        prop_assert!(s.price_fn(x + dx) <= s.price_fn(x) * (1.0 + 1e-12));
    }

    #[test]
    fn inverse_price_round_trip(x in -1.5f64..12.0) {
        let s = solution();
        let inv = s.inverse_price(s.price_fn(x));
        prop_assert!(!inv.clamped());
        prop_assert!((s.price_fn(inv.x) / s.price_fn(x) - 1.0).abs() < 1e-8);
    }

    #[test]
    fn bayes_factor_is_antisymmetric(a in -1e4f64..1e4, b in -1e4f64..1e4) {
        let (ma, mb) = (marginal(a), marginal(b));
        prop_assert_eq!(log_bayes_factor(&ma, &mb), -log_bayes_factor(&mb, &ma));
    }

    #[test]
    fn jarque_bera_ignores_order(mut x in prop::collection::vec(-10.0f64..10.0, 20..80), seed in any::<u64>()) {
        let a = jarque_bera(&x).unwrap();
        let n = x.len();
        let r = (seed % n as u64) as usize;
        x.rotate_left(r);
        x.reverse();
        let b = jarque_bera(&x).unwrap();
        prop_assert!((a.statistic - b.statistic).abs() <= 1e-8 * (1.0 + a.statistic));
    }

    #[test]
    fn storage_cost_is_monotone_percentage(d1 in 0.0f64..1.0, d2 in 0.0f64..1.0) {
        let (lo, hi) = if d1 <= d2 { (d1, d2) } else { (d2, d1) };
        let (c_lo, c_hi) = (storage_cost_annual(lo), storage_cost_annual(hi));
        prop_assert!((0.0..=100.0).contains(&c_lo) && (0.0..=100.0).contains(&c_hi));
        prop_assert!(c_lo <= c_hi);
    }

    #[test]
    fn kalman_likelihood_ignores_price_level(
        p in prop::collection::vec(-2.0f64..2.0, 3..60),
        shift in -5.0f64..5.0,
        b in 0.05f64..2.0,
        v in 0.01f64..1.0,
    ) {
        let params = LgllParams::new(b, v).unwrap();
        let base = PriceSeries::from_log_prices(p.clone(), "x").unwrap();
        let moved = PriceSeries::from_log_prices(p.iter().map(|x| x + shift).collect(), "x").unwrap();
        let (l0, l1) = (kalman_loglik(&params, &base).unwrap(), kalman_loglik(&params, &moved).unwrap());
        prop_assert!((l0 - l1).abs() <= 1e-8 * (1.0 + l0.abs()));
    }

    #[test]
    fn price_csv_round_trip(p in prop::collection::vec(-20.0f64..20.0, 2..50)) {
        let s = PriceSeries::from_log_prices(p, "x").unwrap();
        let mut buf = Vec::new();
        write_price_csv(&mut buf, &s).unwrap();
        let back = read_price_csv(buf.as_slice(), "x").unwrap().series;
        prop_assert_eq!(&back.dates, &s.dates);
        for (a, b) in back.log_prices.iter().zip(&s.log_prices) {
            prop_assert!((a - b).abs() < 1e-12);
        }
    }
}
