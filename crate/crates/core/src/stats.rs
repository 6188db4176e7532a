//! Goodness-of-fit tests, clustering agreement and resampling standard errors
//! used by the oracle suites.

use statrs::distribution::{ChiSquared, ContinuousCDF};

/// Result of a hypothesis test.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TestResult {
    pub statistic: f64,
    pub p_value: f64,
}

/// Asymptotic Kolmogorov survival function P(K > lambda).
pub fn kolmogorov_sf(lambda: f64) -> f64 {
    if lambda < 0.2 {
        return 1.0;
    }
    let mut sum = 0.0;
    for j in 1..=100 {
        let j = j as f64;
        let term = (-2.0 * j * j * lambda * lambda).exp();
        sum += if j as i64 % 2 == 1 { term } else { -term };
        if term < 1e-16 {
            break;
        }
    }
    (2.0 * sum).clamp(0.0, 1.0)
}

/// One-sample Kolmogorov-Smirnov test against a continuous CDF.
pub fn ks_one_sample<F: Fn(f64) -> f64>(samples: &[f64], cdf: F) -> TestResult {
    let mut xs = samples.to_vec();
    xs.sort_by(f64::total_cmp);
    let n = xs.len() as f64;
    let mut d: f64 = 0.0;
    for (i, &x) in xs.iter().enumerate() {
        let f = cdf(x);
        d = d.max((i as f64 + 1.0) / n - f).max(f - i as f64 / n);
    }
    let en = n.sqrt();
    TestResult {
        statistic: d,
        p_value: kolmogorov_sf((en + 0.12 + 0.11 / en) * d),
    }
}

/// Two-sample Kolmogorov-Smirnov test.
pub fn ks_two_sample(x: &[f64], y: &[f64]) -> TestResult {
    let mut a = x.to_vec();
    let mut b = y.to_vec();
    a.sort_by(f64::total_cmp);
    b.sort_by(f64::total_cmp);
    let (n, m) = (a.len() as f64, b.len() as f64);
    let (mut i, mut j) = (0, 0);
    let mut d: f64 = 0.0;
    while i < a.len() && j < b.len() {
        let v = a[i].min(b[j]);
        while i < a.len() && a[i] <= v {
            i += 1;
        }
        while j < b.len() && b[j] <= v {
            j += 1;
        }
        d = d.max((i as f64 / n - j as f64 / m).abs());
    }
    let en = (n * m / (n + m)).sqrt();
    TestResult {
        statistic: d,
        p_value: kolmogorov_sf((en + 0.12 + 0.11 / en) * d),
    }
}

/// Pearson chi-square goodness of fit of counts to cell probabilities.
/// Cells with expected count below 5 are pooled into their neighbour.
pub fn chi_square_gof(observed: &[u64], probs: &[f64]) -> TestResult {
    let total: u64 = observed.iter().sum();
    let mut cells: Vec<(f64, f64)> = Vec::new();
    let (mut o_acc, mut e_acc) = (0.0, 0.0);
    for (&o, &p) in observed.iter().zip(probs) {
        o_acc += o as f64;
        e_acc += p * total as f64;
        if e_acc >= 5.0 {
            cells.push((o_acc, e_acc));
            o_acc = 0.0;
            e_acc = 0.0;
        }
    }
    if e_acc > 0.0 || o_acc > 0.0 {
        match cells.last_mut() {
            Some(last) => {
                last.0 += o_acc;
                last.1 += e_acc;
            }
            None => cells.push((o_acc, e_acc)),
        }
    }
    let stat: f64 = cells.iter().map(|(o, e)| (o - e) * (o - e) / e).sum();
    let dof = cells.len().saturating_sub(1).max(1) as f64;
    let p_value = ChiSquared::new(dof).map(|c| c.sf(stat)).unwrap_or(f64::NAN);
    TestResult {
        statistic: stat,
        p_value,
    }
}

/// Adjusted Rand index between two labelings of the same items.
pub fn adjusted_rand_index(x: &[usize], y: &[usize]) -> f64 {
    assert_eq!(x.len(), y.len(), "labelings must cover the same items");
    let n = x.len();
    let rows = x.iter().max().map_or(0, |m| m + 1);
    let cols = y.iter().max().map_or(0, |m| m + 1);
    let mut table = vec![vec![0u64; cols]; rows];
    for (&a, &b) in x.iter().zip(y) {
        table[a][b] += 1;
    }
    let c2 = |v: u64| (v * v.saturating_sub(1)) as f64 / 2.0;
    let index: f64 = table.iter().flatten().map(|&v| c2(v)).sum();
    let a: f64 = table.iter().map(|r| c2(r.iter().sum())).sum();
    let b: f64 = (0..cols).map(|j| c2(table.iter().map(|r| r[j]).sum())).sum();
    let total = c2(n as u64);
    let expected = a * b / total;
    let max = 0.5 * (a + b);
    if (max - expected).abs() < f64::EPSILON {
        return 1.0;
    }
    (index - expected) / (max - expected)
}

/// Correlation between the two empirical CDFs evaluated on the pooled sample
/// (the probability-probability plot correlation).
pub fn pp_correlation(x: &[f64], y: &[f64]) -> f64 {
    let mut a = x.to_vec();
    let mut b = y.to_vec();
    a.sort_by(f64::total_cmp);
    b.sort_by(f64::total_cmp);
    let mut pooled: Vec<f64> = a.iter().chain(&b).copied().collect();
    pooled.sort_by(f64::total_cmp);
    pooled.dedup();
    let ecdf = |s: &[f64], v: f64| s.partition_point(|&w| w <= v) as f64 / s.len() as f64;
    let fa: Vec<f64> = pooled.iter().map(|&v| ecdf(&a, v)).collect();
    let fb: Vec<f64> = pooled.iter().map(|&v| ecdf(&b, v)).collect();
    pearson(&fa, &fb)
}

pub fn pearson(x: &[f64], y: &[f64]) -> f64 {
    let n = x.len() as f64;
    let mx = x.iter().sum::<f64>() / n;
    let my = y.iter().sum::<f64>() / n;
    let (mut sxy, mut sxx, mut syy) = (0.0, 0.0, 0.0);
    for (a, b) in x.iter().zip(y) {
        sxy += (a - mx) * (b - my);
        sxx += (a - mx) * (a - mx);
        syy += (b - my) * (b - my);
    }
    if sxx == 0.0 || syy == 0.0 {
        return if sxx == syy { 1.0 } else { 0.0 };
    }
    sxy / (sxx * syy).sqrt()
}

/// A point estimate with its standard error.
#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct Estimate {
    pub value: f64,
    pub se: f64,
}

impl Estimate {
    /// |value - target| in units of the standard error.
    pub fn z_score(&self, target: f64) -> f64 {
        (self.value - target).abs() / self.se
    }
}

pub fn mean_estimate(x: &[f64]) -> Estimate {
    let n = x.len() as f64;
    let m = x.iter().sum::<f64>() / n;
    let var = x.iter().map(|v| (v - m) * (v - m)).sum::<f64>() / (n - 1.0);
    Estimate {
        value: m,
        se: (var / n).sqrt(),
    }
}

/// Unbiased sample covariance with a delete-one jackknife standard error.
pub fn covariance_estimate(x: &[f64], y: &[f64]) -> Estimate {
    assert_eq!(x.len(), y.len());
    let n = x.len() as f64;
    let (sx, sy) = (x.iter().sum::<f64>(), y.iter().sum::<f64>());
    let (mx, my) = (sx / n, sy / n);
    // centred sums keep the leave-one-out updates well conditioned
    let sxy: f64 = x.iter().zip(y).map(|(a, b)| (a - mx) * (b - my)).sum();
    let full = sxy / (n - 1.0);
    let loo: Vec<f64> = x
        .iter()
        .zip(y)
        .map(|(a, b)| {
            let (da, db) = (a - mx, b - my);
            // leave-one-out centred cross-product
            let s = sxy - da * db * n / (n - 1.0);
            s / (n - 2.0)
        })
        .collect();
    Estimate {
        value: full,
        se: jackknife_se(&loo),
    }
}

pub fn variance_estimate(x: &[f64]) -> Estimate {
    covariance_estimate(x, x)
}

/// Jackknife standard error from leave-one-out replicates.
pub fn jackknife_se(loo: &[f64]) -> f64 {
    let n = loo.len() as f64;
    let m = loo.iter().sum::<f64>() / n;
    ((n - 1.0) / n * loo.iter().map(|v| (v - m) * (v - m)).sum::<f64>()).sqrt()
}
