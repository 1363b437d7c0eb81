//! Normal-distribution helpers and yes/no detection indices.

use statrs::distribution::{ContinuousCDF, Normal};
use statrs::function::erf::erfc;

pub fn normal_cdf(x: f64) -> f64 {
    0.5 * erfc(-x / std::f64::consts::SQRT_2)
}

/// `ln Phi(x)`, finite far into the lower tail.
pub fn ln_normal_cdf(x: f64) -> f64 {
    if x > -35.0 {
        normal_cdf(x).max(f64::MIN_POSITIVE).ln()
    } else {
        // Mills-ratio asymptote for the deep tail.
        let x2 = x * x;
        -0.5 * x2 - (-x).ln() - 0.5 * (2.0 * std::f64::consts::PI).ln() + (1.0 - 1.0 / x2 + 3.0 / (x2 * x2)).ln()
    }
}

pub fn normal_quantile(p: f64) -> f64 {
    Normal::new(0.0, 1.0).expect("standard normal").inverse_cdf(p)
}

/// Rate clamped to `[1/(2n), 1 - 1/(2n)]`.
pub fn clamp_rate(count: u64, n: u64) -> f64 {
    let n = n as f64;
    let lo = 0.5 / n;
    (count as f64 / n).clamp(lo, 1.0 - lo)
}

/// `z(HR) - z(FAR)` with both rates clamped.
pub fn dprime_from_counts(hits: u64, n_present: u64, false_alarms: u64, n_absent: u64) -> f64 {
    normal_quantile(clamp_rate(hits, n_present)) - normal_quantile(clamp_rate(false_alarms, n_absent))
}

/// Binomial standard error of a proportion.
pub fn proportion_se(p: f64, n: usize) -> f64 {
    if n < 2 {
        return f64::NAN;
    }
    (p * (1.0 - p) / n as f64).sqrt().max(0.5 / n as f64)
}

/// Upper-tail probability `P(X >= k)` for `X ~ Binomial(n, p)`.
pub fn binomial_upper_p(k: u64, n: u64, p: f64) -> f64 {
    use statrs::distribution::{Binomial, DiscreteCDF};
    if k == 0 {
        return 1.0;
    }
    let b = Binomial::new(p, n).expect("valid binomial");
    1.0 - b.cdf(k - 1)
}
