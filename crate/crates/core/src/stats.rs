//! Scalar distribution helpers shared by the filters and diagnostics.

pub const LN_SQRT_2PI: f64 = 0.918_938_533_204_672_8;

/// Log density of `N(mean, sd²)` at `x`.
#[inline]
pub fn normal_log_pdf(x: f64, mean: f64, sd: f64) -> f64 {
    let z = (x - mean) / sd;
    -0.5 * z * z - LN_SQRT_2PI - sd.ln()
}

/// Standard normal CDF.
#[inline]
pub fn std_normal_cdf(z: f64) -> f64 {
    0.5 * libm::erfc(-z / std::f64::consts::SQRT_2)
}

/// Standard normal quantile function, polished by one Newton step on the CDF.
pub fn std_normal_quantile(u: f64) -> f64 {
    let z = -std::f64::consts::SQRT_2 * statrs::function::erf::erfc_inv(2.0 * u);
    if !z.is_finite() {
        return z;
    }
    let pdf = (-0.5 * z * z - LN_SQRT_2PI).exp();
    if pdf > 0.0 {
        z - (std_normal_cdf(z) - u) / pdf
    } else {
        z
    }
}

/// Weighted quantile of `values` with weights summing to one: the smallest
/// value whose cumulative weight reaches `q`.
pub fn weighted_quantile(values: &[f64], weights: &[f64], q: f64) -> f64 {
    let mut idx: Vec<usize> = (0..values.len()).collect();
    idx.sort_by(|&a, &b| values[a].total_cmp(&values[b]));
    let mut cum = 0.0;
    for &i in &idx {
        cum += weights[i];
        if cum >= q {
            return values[i];
        }
    }
    values[*idx.last().expect("nonempty sample")]
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn normal_helpers() {
        assert!((normal_log_pdf(0.0, 0.0, 1.0) + LN_SQRT_2PI).abs() < 1e-15);
        let c = std_normal_cdf(1.96);
        assert!((c - 0.975_002_104_851_779_5).abs() < 1e-15, "{c:e}");
        assert!((std_normal_quantile(0.5)).abs() < 1e-15);
        assert!((std_normal_quantile(std_normal_cdf(1.96)) - 1.96).abs() < 1e-12);
        assert!((std_normal_quantile(1e-10) + 6.361_340_902_404_056).abs() < 1e-9);
    }

    #[test]
    fn weighted_quantile_counts_mass() {
        let v = [3.0, 1.0, 2.0, 4.0];
        let w = [0.25; 4];
        assert_eq!(weighted_quantile(&v, &w, 0.5), 2.0);
        assert_eq!(weighted_quantile(&v, &w, 0.51), 3.0);
        assert_eq!(weighted_quantile(&v, &[0.0, 0.0, 0.0, 1.0], 0.025), 4.0);
    }
}
