//! Descriptive statistics and the Kolmogorov–Smirnov test.

use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, Normal};

use crate::numerics::NeumaierSum;

pub fn mean(x: &[f64]) -> f64 {
    x.iter().copied().collect::<NeumaierSum>().value() / x.len() as f64
}

/// Unbiased sample variance.
pub fn variance(x: &[f64]) -> f64 {
    let m = mean(x);
    x.iter().map(|v| (v - m).powi(2)).collect::<NeumaierSum>().value() / (x.len() as f64 - 1.0)
}

/// Standard error of the mean.
pub fn std_error(x: &[f64]) -> f64 {
    (variance(x) / x.len() as f64).sqrt()
}

pub fn correlation(x: &[f64], y: &[f64]) -> f64 {
    let (mx, my) = (mean(x), mean(y));
    let mut sxy = NeumaierSum::new();
    let mut sxx = NeumaierSum::new();
    let mut syy = NeumaierSum::new();
    for (a, b) in x.iter().zip(y) {
        sxy.add((a - mx) * (b - my));
        sxx.add((a - mx).powi(2));
        syy.add((b - my).powi(2));
    }
    sxy.value() / (sxx.value() * syy.value()).sqrt()
}

/// Sample-size-based standard error of a correlation near zero.
pub fn correlation_std_error(n: usize) -> f64 {
    1.0 / (n as f64 - 1.0).sqrt()
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct KsResult {
    pub statistic: f64,
    pub p_value: f64,
    pub n: usize,
}

/// `D = sup |F_n - F|` evaluated at the jumps of the empirical CDF.
pub fn ks_statistic(sample: &[f64], cdf: impl Fn(f64) -> f64) -> f64 {
    let mut xs = sample.to_vec();
    xs.sort_by(f64::total_cmp);
    let n = xs.len() as f64;
    xs.iter().enumerate().fold(0.0f64, |d, (i, &x)| {
        let f = cdf(x);
        d.max(f - i as f64 / n).max((i + 1) as f64 / n - f)
    })
}

/// `P(K > λ) = 2 Σ_{k>=1} (-1)^{k-1} e^{-2k²λ²}`.
pub fn kolmogorov_survival(lambda: f64) -> f64 {
    if lambda < 0.2 {
        return 1.0;
    }
    let mut sum = 0.0;
    for k in 1..=100 {
        let k = k as f64;
        let term = (-2.0 * k * k * lambda * lambda).exp();
        sum += if k as u64 % 2 == 1 { term } else { -term };
        if term < 1e-17 {
            break;
        }
    }
    (2.0 * sum).clamp(0.0, 1.0)
}

/// One-sample KS test with the asymptotic p-value at
/// `λ = (√n + 0.12 + 0.11/√n) D`.
pub fn ks_test(sample: &[f64], cdf: impl Fn(f64) -> f64) -> KsResult {
    let d = ks_statistic(sample, cdf);
    let rn = (sample.len() as f64).sqrt();
    KsResult {
        statistic: d,
        p_value: kolmogorov_survival((rn + 0.12 + 0.11 / rn) * d),
        n: sample.len(),
    }
}

pub fn ks_test_normal(sample: &[f64]) -> KsResult {
    let z = Normal::standard();
    ks_test(sample, |x| z.cdf(x))
}
