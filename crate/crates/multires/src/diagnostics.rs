//! Chain diagnostics: autocorrelation-aware effective sample size, Geweke
//! z-scores, and Kolmogorov-Smirnov distances used by the test batteries.

use crate::numeric::{mean, variance};

/// Lag-`k` sample autocovariance (biased, denominator `n`).
pub fn autocovariance(x: &[f64], lag: usize) -> f64 {
    let n = x.len();
    if lag >= n {
        return 0.0;
    }
    let m = mean(x);
    x.iter()
        .take(n - lag)
        .zip(x.iter().skip(lag))
        .map(|(a, b)| (a - m) * (b - m))
        .sum::<f64>()
        / n as f64
}

/// Effective sample size via Geyer's initial positive sequence: lag pairs
/// `rho_{2k} + rho_{2k+1}` are accumulated while positive.
pub fn effective_sample_size(x: &[f64]) -> f64 {
    let n = x.len();
    if n < 4 {
        return n as f64;
    }
    let c0 = autocovariance(x, 0);
    if c0 <= 0.0 {
        // Constant chain: no information beyond one draw.
        return 1.0;
    }
    let mut sum_pairs = 0.0;
    let mut k = 1;
    while k + 1 < n {
        let pair = (autocovariance(x, k) + autocovariance(x, k + 1)) / c0;
        if pair <= 0.0 {
            break;
        }
        sum_pairs += pair;
        k += 2;
    }
    let ess = n as f64 / (1.0 + 2.0 * sum_pairs);
    ess.clamp(1.0, n as f64)
}

/// Standard error of the chain mean, adjusted for autocorrelation.
pub fn mcmc_se(x: &[f64]) -> f64 {
    (variance(x) / effective_sample_size(x)).sqrt()
}

/// Geweke convergence z-score: compare the mean of the first `10%` of the
/// chain with the mean of the last `50%`, each with autocorrelation-adjusted
/// standard errors.
pub fn geweke_z(chain: &[f64]) -> f64 {
    let n = chain.len();
    let first = &chain[..(n / 10).max(2)];
    let last = &chain[n - n / 2..];
    let v = mcmc_se(first).powi(2) + mcmc_se(last).powi(2);
    if v <= 0.0 {
        return 0.0;
    }
    (mean(first) - mean(last)) / v.sqrt()
}

/// z-score for the difference in means between an iid sample and a
/// (possibly autocorrelated) chain targeting the same distribution.
pub fn z_score_iid_vs_chain(iid: &[f64], chain: &[f64]) -> f64 {
    let v = variance(iid) / iid.len() as f64 + mcmc_se(chain).powi(2);
    if v <= 0.0 {
        return 0.0;
    }
    (mean(iid) - mean(chain)) / v.sqrt()
}

/// One-sample Kolmogorov-Smirnov statistic against a reference CDF.
pub fn ks_statistic<F: Fn(f64) -> f64>(sample: &[f64], cdf: F) -> f64 {
    let mut sorted = sample.to_vec();
    sorted.sort_by(|a, b| a.partial_cmp(b).expect("non-finite sample value"));
    let n = sorted.len() as f64;
    let mut d: f64 = 0.0;
    for (i, &x) in sorted.iter().enumerate() {
        let f = cdf(x);
        let lo = i as f64 / n;
        let hi = (i + 1) as f64 / n;
        d = d.max((f - lo).abs()).max((hi - f).abs());
    }
    d
}

/// Asymptotic Kolmogorov-Smirnov critical value at level `alpha`:
/// `sqrt(-ln(alpha/2) / (2n))`, e.g. `1.63 / sqrt(n)` at the 1% level.
pub fn ks_critical(n: usize, alpha: f64) -> f64 {
    (-(alpha / 2.0).ln() / (2.0 * n as f64)).sqrt()
}
