//! Posterior structure of normalized generalized gamma models: partition
//! probabilities, marginal and latent-variable predictive schemes, the law of
//! the latent relative mass U_N, sequential sampling and posterior measures.

use rand::{Rng, RngCore};
use rand_distr::{Distribution, Gamma};
use thiserror::Error;

use crate::levy_core::{
    self, expected_mass_below, normalize, Atom, BaseMeasure, CrmRealization, LevyError, NggParams, NrmRealization,
    Truncation,
};
use crate::log_concave::{ars_sample, find_mode, SamplerError};
use crate::quadrature::{integrate_breakpoints, QuadOptions, QuadratureError};
use crate::special_math::{ln_gamma, rising_factorial};
use crate::tak::{TakCache, TakError};

#[derive(Debug, Clone, PartialEq, Error)]
pub enum PosteriorError {
    #[error("invalid partition: {0}")]
    Partition(String),
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
    #[error(transparent)]
    Tak(#[from] TakError),
    #[error(transparent)]
    Levy(#[from] LevyError),
    #[error(transparent)]
    Sampler(#[from] SamplerError),
    #[error(transparent)]
    Quadrature(#[from] QuadratureError),
}

/// Cluster sizes of a partition of N items.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PartitionStats {
    counts: Vec<usize>,
    n: usize,
}

impl PartitionStats {
    pub fn new(counts: Vec<usize>) -> Result<Self, PosteriorError> {
        if counts.contains(&0) {
            return Err(PosteriorError::Partition("cluster sizes must be >= 1".into()));
        }
        let n = counts.iter().sum();
        Ok(PartitionStats { counts, n })
    }

    /// Partition induced by a vector of cluster labels.
    pub fn from_labels(labels: &[usize]) -> Self {
        let mut order: Vec<usize> = Vec::new();
        let mut counts: Vec<usize> = Vec::new();
        for &l in labels {
            match order.iter().position(|&o| o == l) {
                Some(i) => counts[i] += 1,
                None => {
                    order.push(l);
                    counts.push(1);
                }
            }
        }
        PartitionStats {
            n: labels.len(),
            counts,
        }
    }

    pub fn n(&self) -> usize {
        self.n
    }

    pub fn k(&self) -> usize {
        self.counts.len()
    }

    pub fn counts(&self) -> &[usize] {
        &self.counts
    }

    fn require_nonempty(&self) -> Result<(), PosteriorError> {
        if self.n == 0 {
            Err(PosteriorError::Partition("partition has no items".into()))
        } else {
            Ok(())
        }
    }

    fn ln_cluster_factors(&self, a: f64) -> f64 {
        self.counts
            .iter()
            .map(|&c| rising_factorial(1.0 - a, (c - 1) as u64).ln_abs())
            .sum()
    }
}

fn check_tak(tak: &TakCache, p: &NggParams) -> Result<(), PosteriorError> {
    if tak.a() != p.a || tak.mass() != p.mass {
        return Err(PosteriorError::InvalidArgument(
            "normalizing-integral cache was built for different parameters".into(),
        ));
    }
    Ok(())
}

/// ln p(partition) = M + (K-1) ln a + ln T^{N,K} - ln Gamma(N)
///                   + sum_k ln (1-a)_{n_k - 1}.
pub fn ln_partition_probability(stats: &PartitionStats, p: &NggParams, tak: &TakCache) -> Result<f64, PosteriorError> {
    stats.require_nonempty()?;
    check_tak(tak, p)?;
    let (n, k) = (stats.n(), stats.k());
    Ok(p.mass + (k as f64 - 1.0) * p.a.ln() + tak.ln_value(n, k)? - ln_gamma(n as f64) + stats.ln_cluster_factors(p.a))
}

/// Marginal likelihood: partition probability plus the per-cluster marginal
/// data densities ln h_k.
pub fn marginal_log_likelihood(
    stats: &PartitionStats,
    p: &NggParams,
    tak: &TakCache,
    ln_cluster_densities: &[f64],
) -> Result<f64, PosteriorError> {
    if ln_cluster_densities.len() != stats.k() {
        return Err(PosteriorError::InvalidArgument(format!(
            "{} cluster densities for {} clusters",
            ln_cluster_densities.len(),
            stats.k()
        )));
    }
    Ok(ln_partition_probability(stats, p, tak)? + ln_cluster_densities.iter().sum::<f64>())
}

/// Probabilities that the next item starts a new cluster (index 0) or joins
/// cluster k (index k), with U_N integrated out.
pub fn predictive_weights(stats: &PartitionStats, p: &NggParams, tak: &TakCache) -> Result<Vec<f64>, PosteriorError> {
    check_tak(tak, p)?;
    if stats.n() == 0 {
        return Ok(vec![1.0]);
    }
    let (n, k) = (stats.n(), stats.k());
    let ratio = (tak.ln_value(n + 1, k + 1)? - tak.ln_value(n + 1, k)?).exp();
    let w0 = p.a * ratio;
    let mut w = Vec::with_capacity(k + 1);
    w.push(w0);
    w.extend(stats.counts().iter().map(|&c| c as f64 - p.a));
    let total: f64 = w.iter().sum();
    Ok(w.into_iter().map(|x| x / total).collect())
}

/// Predictive probabilities given U_N = u: new cluster proportional to
/// M a (1+u)^a, cluster k proportional to n_k - a.
pub fn conditional_predictive_weights(
    stats: &PartitionStats,
    p: &NggParams,
    u: f64,
) -> Result<Vec<f64>, PosteriorError> {
    if !(u >= 0.0 && u.is_finite()) {
        return Err(PosteriorError::InvalidArgument(format!("u = {u} must be >= 0")));
    }
    let w0 = p.mass * p.a * (1.0 + u).powf(p.a);
    let mut w = Vec::with_capacity(stats.k() + 1);
    w.push(w0);
    w.extend(stats.counts().iter().map(|&c| c as f64 - p.a));
    let total: f64 = w.iter().sum();
    Ok(w.into_iter().map(|x| x / total).collect())
}

/// ln density of U_N given a partition with N items in K clusters:
/// a M^K / T^{N,K} u^{N-1} (1+u)^{K a - N} e^{-M (1+u)^a}.
pub fn ln_latent_mass_density(
    u: f64,
    n: usize,
    k: usize,
    p: &NggParams,
    tak: &TakCache,
) -> Result<f64, PosteriorError> {
    check_tak(tak, p)?;
    if !(u > 0.0) {
        return Err(PosteriorError::InvalidArgument(format!("u = {u} must be > 0")));
    }
    let lt = tak.ln_value(n, k)?;
    Ok(
        p.a.ln() + k as f64 * p.mass.ln() - lt + (n as f64 - 1.0) * u.ln() + (k as f64 * p.a - n as f64) * u.ln_1p()
            - p.mass * (1.0 + u).powf(p.a),
    )
}

/// ln density of the latent relative mass U_{N+1} given the partition of
/// the first N items, with the allocation of item N+1 summed out:
/// the U_N density times u (M a (1+u)^a + N - K a) / (N (1+u)). The
/// conditional predictive weights average to the marginal ones under this
/// law, not under the U_N density.
pub fn ln_next_latent_density(
    u: f64,
    stats: &PartitionStats,
    p: &NggParams,
    tak: &TakCache,
) -> Result<f64, PosteriorError> {
    stats.require_nonempty()?;
    let (n, k) = (stats.n(), stats.k());
    let lu = ln_latent_mass_density(u, n, k, p, tak)?;
    let bracket = p.mass * p.a * (1.0 + u).powf(p.a) + n as f64 - k as f64 * p.a;
    Ok(lu + u.ln() + bracket.ln() - (n as f64).ln() - u.ln_1p())
}

fn softplus(s: f64) -> f64 {
    if s > 35.0 {
        s + (-s).exp()
    } else {
        s.exp().ln_1p()
    }
}

fn sigmoid(s: f64) -> f64 {
    if s >= 0.0 {
        1.0 / (1.0 + (-s).exp())
    } else {
        let e = s.exp();
        e / (1.0 + e)
    }
}

/// Log density of ln U_N (up to a constant) with its first two derivatives;
/// concave in s for every K <= N.
fn latent_log_density(s: f64, n: f64, k: f64, a: f64, mass: f64) -> (f64, f64, f64) {
    let sp = softplus(s);
    let sig = sigmoid(s);
    let c = k * a - n;
    let pow_a = (a * sp).exp();
    let mix = (s + (a - 1.0) * sp).exp();
    let h = n * s + c * sp - mass * pow_a;
    let d1 = n + c * sig - mass * a * mix;
    let d2 = c * sig * (1.0 - sig) - mass * a * mix * ((1.0 - sig) + a * sig);
    (h, d1, d2)
}

/// Exact sampler for U_N given (N, K), remembering the last mode as a warm
/// start for the next draw.
#[derive(Debug, Clone)]
pub struct LatentMassSampler {
    params: NggParams,
    last_mode: f64,
}

impl LatentMassSampler {
    pub fn new(params: NggParams) -> Self {
        LatentMassSampler { params, last_mode: 0.0 }
    }

    pub fn sample<R: Rng + ?Sized>(&mut self, n: usize, k: usize, rng: &mut R) -> Result<f64, PosteriorError> {
        if n == 0 || k == 0 || k > n {
            return Err(PosteriorError::InvalidArgument(format!(
                "latent mass needs 1 <= K <= N, got N={n}, K={k}"
            )));
        }
        let (nf, kf, a, m) = (n as f64, k as f64, self.params.a, self.params.mass);
        let f3 = |s: f64| latent_log_density(s, nf, kf, a, m);
        let mode = find_mode(&f3, self.last_mode)?;
        self.last_mode = mode;
        let (_, _, d2) = f3(mode);
        let width = if d2 < 0.0 { (1.0 / -d2).sqrt() } else { 1.0 };
        let mut lo = mode - width;
        while f3(lo).1 <= 0.0 {
            lo -= width;
        }
        let mut hi = mode + width;
        while f3(hi).1 >= 0.0 {
            hi += width;
        }
        let f2 = |s: f64| {
            let (h, d, _) = f3(s);
            (h, d)
        };
        let s = ars_sample(&f2, &[lo, mode, hi], rng)?;
        Ok(s.exp())
    }
}

/// ln of the exchangeable partition probability of a two-parameter
/// Poisson-Dirichlet process with discount a and concentration b.
pub fn ln_pdp_partition_probability(stats: &PartitionStats, a: f64, b: f64) -> Result<f64, PosteriorError> {
    stats.require_nonempty()?;
    if !(a > 0.0 && a < 1.0 && b > -a) {
        return Err(PosteriorError::InvalidArgument(format!("a={a}, b={b}")));
    }
    let k = stats.k();
    let head: f64 = (1..k).map(|j| (b + j as f64 * a).ln()).sum();
    Ok(head - rising_factorial(b + 1.0, (stats.n() - 1) as u64).ln_abs() + stats.ln_cluster_factors(a))
}

/// Joint of partition and U_N = u with jumps integrated out, up to 1/Gamma(N):
/// (N-1) ln u + (K a - N) ln(1+u) + K ln(M a) + M - M (1+u)^a
/// + sum ln (1-a)_{n_k-1} + sum ln h_k.
pub fn ln_reduced_joint(
    stats: &PartitionStats,
    p: &NggParams,
    u: f64,
    ln_cluster_densities: &[f64],
) -> Result<f64, PosteriorError> {
    stats.require_nonempty()?;
    let (n, k) = (stats.n() as f64, stats.k() as f64);
    Ok(
        (n - 1.0) * u.ln() + (k * p.a - n) * u.ln_1p() + k * (p.mass * p.a).ln() + p.mass
            - p.mass * (1.0 + u).powf(p.a)
            + stats.ln_cluster_factors(p.a)
            + ln_cluster_densities.iter().sum::<f64>(),
    )
}

/// Joint of partition, U_N = u and the cluster jumps J_k, up to 1/Gamma(N).
pub fn ln_reduced_joint_with_jumps(
    stats: &PartitionStats,
    p: &NggParams,
    u: f64,
    jumps: &[f64],
    ln_cluster_densities: &[f64],
) -> Result<f64, PosteriorError> {
    stats.require_nonempty()?;
    if jumps.len() != stats.k() {
        return Err(PosteriorError::InvalidArgument("one jump per cluster required".into()));
    }
    let (n, k) = (stats.n() as f64, stats.k() as f64);
    let per: f64 = stats
        .counts()
        .iter()
        .zip(jumps)
        .map(|(&c, &j)| (c as f64 - p.a - 1.0) * j.ln() - (1.0 + u) * j)
        .sum();
    Ok(
        (n - 1.0) * u.ln() + k * (p.mass * p.a).ln() - k * ln_gamma(1.0 - p.a) + p.mass - p.mass * (1.0 + u).powf(p.a)
            + per
            + ln_cluster_densities.iter().sum::<f64>(),
    )
}

/// Draws a partition of `n` items sequentially.
#[derive(Debug, Clone, PartialEq)]
pub struct SequentialSample {
    pub counts: Vec<usize>,
    pub labels: Vec<usize>,
    /// Number of clusters after each item.
    pub clusters_after: Vec<usize>,
}

fn pick_existing<R: Rng + ?Sized>(labels: &[usize], counts: &[usize], a: f64, rng: &mut R) -> usize {
    // A uniform earlier item lands in cluster k with probability n_k / n;
    // thinning by (n_k - a) / n_k leaves probabilities proportional to n_k - a.
    loop {
        let l = labels[rng.random_range(0..labels.len())];
        let c = counts[l] as f64;
        if rng.random::<f64>() * c < c - a {
            return l;
        }
    }
}

/// Probability that item N+1 opens a new cluster given N items in K
/// clusters, a T^{N+1,K+1} / (a T^{N+1,K+1} + (N - K a) T^{N+1,K}). The
/// ratio of the two integrals is the mean of M (1+u)^a under the latent
/// density for (N+1, K), evaluated by quadrature around its mode. The last
/// mode is kept as a warm start, which makes sweeps over growing N cheap.
#[derive(Debug, Clone)]
pub struct NewClusterProbability {
    params: NggParams,
    last_mode: f64,
}

impl NewClusterProbability {
    pub fn new(params: NggParams) -> Self {
        NewClusterProbability { params, last_mode: 0.0 }
    }

    pub fn eval(&mut self, n: usize, k: usize) -> Result<f64, PosteriorError> {
        if n == 0 {
            return Ok(1.0);
        }
        if k == 0 || k > n {
            return Err(PosteriorError::InvalidArgument(format!(
                "need 1 <= K <= N, got N={n}, K={k}"
            )));
        }
        let (a, m) = (self.params.a, self.params.mass);
        let (nf, kf) = ((n + 1) as f64, k as f64);
        let f3 = |s: f64| latent_log_density(s, nf, kf, a, m);
        let mode = find_mode(&f3, self.last_mode)?;
        self.last_mode = mode;
        let (peak, _, d2) = f3(mode);
        let width = if d2 < 0.0 { (1.0 / -d2).sqrt() } else { 1.0 };
        // step out until the density has fallen by e^-50 on each side
        let edge = |dir: f64| {
            let mut x = mode + dir * width;
            let mut step = width;
            while f3(x).0 > peak - 50.0 {
                step *= 2.0;
                x += dir * step;
            }
            x
        };
        let (lo, hi) = (edge(-1.0), edge(1.0));
        let opts = QuadOptions::rel(1e-11);
        let base = integrate_breakpoints(|s| (f3(s).0 - peak).exp(), &[lo, mode, hi], opts)?.value;
        let tilted = integrate_breakpoints(|s| (f3(s).0 - peak + a * softplus(s)).exp(), &[lo, mode, hi], opts)?.value;
        let w0 = a * m * tilted / base;
        Ok(w0 / (w0 + n as f64 - kf * a))
    }
}

/// Sequential (generalized urn) sampling: each item opens a new cluster with
/// the exact marginal probability from [`NewClusterProbability`] and
/// otherwise joins cluster k with probability proportional to n_k - a.
pub fn sequential_sample<R: Rng + ?Sized>(
    p: &NggParams,
    n: usize,
    rng: &mut R,
) -> Result<SequentialSample, PosteriorError> {
    let mut counts: Vec<usize> = Vec::new();
    let mut labels: Vec<usize> = Vec::with_capacity(n);
    let mut clusters_after = Vec::with_capacity(n);
    let mut new_prob = NewClusterProbability::new(*p);
    for i in 0..n {
        let p_new = new_prob.eval(i, counts.len())?;
        let label = if rng.random::<f64>() < p_new {
            counts.push(0);
            counts.len() - 1
        } else {
            pick_existing(&labels, &counts, p.a, rng)
        };
        counts[label] += 1;
        labels.push(label);
        clusters_after.push(counts.len());
    }
    Ok(SequentialSample {
        counts,
        labels,
        clusters_after,
    })
}

/// Sequential sampling with the marginal predictive weights (normalizing
/// integrals by quadrature); intended for small n.
pub fn sequential_sample_marginal<R: Rng + ?Sized>(
    p: &NggParams,
    n: usize,
    tak: &TakCache,
    rng: &mut R,
) -> Result<SequentialSample, PosteriorError> {
    check_tak(tak, p)?;
    let mut counts: Vec<usize> = Vec::new();
    let mut labels: Vec<usize> = Vec::with_capacity(n);
    let mut clusters_after = Vec::with_capacity(n);
    for i in 0..n {
        let label = if i == 0 {
            0
        } else {
            let stats = PartitionStats::new(counts.clone())?;
            let w = predictive_weights(&stats, p, tak)?;
            let mut x = rng.random::<f64>();
            let mut pick = w.len() - 1;
            for (j, &wj) in w.iter().enumerate() {
                if x < wj {
                    pick = j;
                    break;
                }
                x -= wj;
            }
            if pick == 0 {
                counts.len()
            } else {
                pick - 1
            }
        };
        if label == counts.len() {
            counts.push(0);
        }
        counts[label] += 1;
        labels.push(label);
        clusters_after.push(counts.len());
    }
    Ok(SequentialSample {
        counts,
        labels,
        clusters_after,
    })
}

/// How the diffuse posterior part is truncated.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum RemainderTruncation {
    /// The largest `k_max` jumps.
    Count(usize),
    /// All jumps above a level.
    Threshold(f64),
}

impl Default for RemainderTruncation {
    fn default() -> Self {
        RemainderTruncation::Count(10_000)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PosteriorMeasureDraw {
    pub measure: NrmRealization,
    /// Total mass of the generated diffuse-part jumps.
    pub continuous_total: f64,
    /// Expected mass of the diffuse-part jumps that were not generated.
    pub truncation_bias: f64,
    /// Total mass J_+ of the jumps at the observed locations.
    pub fixed_total: f64,
    /// Relative sizes of the jumps at the observed locations.
    pub fixed_weights: Vec<f64>,
}

/// Posterior random measure given the partition, U_N = u and the distinct
/// observed locations: a diffuse part with Levy density
/// M a/Gamma(1-a) s^{-1-a} e^{-(1+u) s}, plus jumps at the observed locations
/// with total mass Gamma(N - K a, 1 + u) split by Dirichlet(n_k - a).
pub fn posterior_measure_sample<R: RngCore>(
    stats: &PartitionStats,
    p: &NggParams,
    u: f64,
    base: &dyn BaseMeasure,
    fixed_locations: &[Vec<f64>],
    truncation: RemainderTruncation,
    rng: &mut R,
) -> Result<PosteriorMeasureDraw, PosteriorError> {
    stats.require_nonempty()?;
    if fixed_locations.len() != stats.k() {
        return Err(PosteriorError::InvalidArgument(format!(
            "{} locations for {} clusters",
            fixed_locations.len(),
            stats.k()
        )));
    }
    if !(u > 0.0 && u.is_finite()) {
        return Err(PosteriorError::InvalidArgument(format!("u = {u} must be > 0")));
    }
    let rate = 1.0 + u;
    let scaled = NggParams::new(p.a, p.mass * rate.powf(p.a))?;
    let mut diffuse = match truncation {
        RemainderTruncation::Count(k) => levy_core::sample_crm_decreasing(&scaled, base, k, rng)?,
        RemainderTruncation::Threshold(z) => levy_core::sample_crm_threshold(&scaled, base, z * rate, rng)?,
    };
    for atom in &mut diffuse.atoms {
        atom.jump /= rate;
    }
    let smallest = match truncation {
        RemainderTruncation::Count(_) => diffuse.atoms.last().map(|a| a.jump).unwrap_or(f64::INFINITY),
        RemainderTruncation::Threshold(z) => z,
    };
    let truncation_bias = expected_mass_below(p, u, smallest.min(1e300))?;
    let continuous_total = diffuse.total_mass();

    let fixed_total = Gamma::new(stats.n() as f64 - stats.k() as f64 * p.a, 1.0 / rate)
        .map_err(|e| PosteriorError::InvalidArgument(e.to_string()))?
        .sample(rng);
    let raw: Vec<f64> = stats
        .counts()
        .iter()
        .map(|&c| {
            Gamma::new(c as f64 - p.a, 1.0)
                .map(|g| g.sample(rng))
                .map_err(|e| PosteriorError::InvalidArgument(e.to_string()))
        })
        .collect::<Result<_, _>>()?;
    let raw_sum: f64 = raw.iter().sum();
    let fixed_weights: Vec<f64> = raw.iter().map(|r| r / raw_sum).collect();

    let mut atoms: Vec<Atom> = fixed_weights
        .iter()
        .zip(fixed_locations)
        .map(|(w, loc)| Atom {
            id: rng.next_u64(),
            jump: w * fixed_total,
            location: loc.clone(),
        })
        .collect();
    atoms.extend(diffuse.atoms);
    let combined = CrmRealization {
        params: *p,
        atoms,
        truncation: Truncation::Composite,
    };
    Ok(PosteriorMeasureDraw {
        measure: normalize(&combined)?,
        continuous_total,
        truncation_bias,
        fixed_total,
        fixed_weights,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::quadrature::integrate_to_infinity;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn params(a: f64, m: f64) -> NggParams {
        NggParams::new(a, m).unwrap()
    }

    #[test]
    fn predictive_weights_single_item() {
        let p = params(0.5, 1.0);
        let tak = TakCache::new(0.5, 1.0).unwrap();
        let stats = PartitionStats::new(vec![1]).unwrap();
        let w = predictive_weights(&stats, &p, &tak).unwrap();
        let r = (tak.ln_value(2, 2).unwrap() - tak.ln_value(2, 1).unwrap()).exp();
        assert!((w[0] / w[1] - 0.5 * r / 0.5).abs() < 1e-12);
        assert!((w.iter().sum::<f64>() - 1.0).abs() < 1e-14);
    }

    #[test]
    fn conditional_weights_at_zero() {
        let p = params(0.5, 1.0);
        let stats = PartitionStats::new(vec![2, 1]).unwrap();
        let w = conditional_predictive_weights(&stats, &p, 0.0).unwrap();
        let expect = [0.5 / 2.5, 1.5 / 2.5, 0.5 / 2.5];
        for (x, y) in w.iter().zip(expect) {
            assert!((x - y).abs() < 1e-15);
        }
    }

    #[test]
    fn latent_density_normalizes() {
        let p = params(0.4, 1.5);
        let tak = TakCache::new(0.4, 1.5).unwrap();
        let r = integrate_to_infinity(
            |u| {
                if u > 0.0 {
                    ln_latent_mass_density(u, 6, 2, &p, &tak).unwrap().exp()
                } else {
                    0.0
                }
            },
            0.0,
            QuadOptions::rel(1e-11),
        )
        .unwrap();
        assert!((r.value - 1.0).abs() < 1e-8, "{}", r.value);
    }

    #[test]
    fn normalization_identity_across_rows() {
        let tak = TakCache::new(0.3, 2.0).unwrap();
        for &(n, k) in &[(3usize, 2usize), (8, 3), (12, 7)] {
            let lhs = n as f64 * tak.ln_value(n, k).unwrap().exp();
            let rhs = 0.3 * tak.ln_value(n + 1, k + 1).unwrap().exp()
                + (n as f64 - k as f64 * 0.3) * tak.ln_value(n + 1, k).unwrap().exp();
            assert!((lhs / rhs - 1.0).abs() < 1e-10);
        }
    }

    #[test]
    fn reduced_joints_are_consistent() {
        // integrating the jumps out of the second form gives the first
        let p = params(0.5, 2.0);
        let stats = PartitionStats::new(vec![3, 1]).unwrap();
        let u = 0.7;
        let ln_h = [0.1, -0.4];
        let first = ln_reduced_joint(&stats, &p, u, &ln_h).unwrap();
        let jumps = [1.3, 0.4];
        let second = ln_reduced_joint_with_jumps(&stats, &p, u, &jumps, &ln_h).unwrap();
        let ln_jump_densities: f64 = stats
            .counts()
            .iter()
            .zip(&jumps)
            .map(|(&c, &j)| {
                let shape = c as f64 - 0.5;
                shape * u.ln_1p() - ln_gamma(shape) + (shape - 1.0) * j.ln() - (1.0 + u) * j
            })
            .sum();
        assert!((second - ln_jump_densities - first).abs() < 1e-12);
    }

    #[test]
    fn latent_sampler_mean_matches_quadrature() {
        let p = params(0.5, 1.0);
        let tak = TakCache::new(0.5, 1.0).unwrap();
        let (n, k) = (10, 3);
        let mean = integrate_to_infinity(
            |u| {
                if u > 0.0 {
                    u * ln_latent_mass_density(u, n, k, &p, &tak).unwrap().exp()
                } else {
                    0.0
                }
            },
            0.0,
            QuadOptions::rel(1e-10),
        )
        .unwrap()
        .value;
        let second = integrate_to_infinity(
            |u| {
                if u > 0.0 {
                    u * u * ln_latent_mass_density(u, n, k, &p, &tak).unwrap().exp()
                } else {
                    0.0
                }
            },
            0.0,
            QuadOptions::rel(1e-10),
        )
        .unwrap()
        .value;
        let sd = (second - mean * mean).sqrt();
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        let mut s = LatentMassSampler::new(p);
        let reps = 40_000;
        let emp = (0..reps).map(|_| s.sample(n, k, &mut rng).unwrap()).sum::<f64>() / reps as f64;
        assert!((emp - mean).abs() < 4.0 * sd / (reps as f64).sqrt(), "{emp} vs {mean}");
    }

    #[test]
    fn pdp_probabilities_sum_to_one() {
        // all partitions of 3 items: {3}, {2,1} x3, {1,1,1}
        let (a, b) = (0.5, 1.0);
        let p3 = ln_pdp_partition_probability(&PartitionStats::new(vec![3]).unwrap(), a, b)
            .unwrap()
            .exp();
        let p21 = ln_pdp_partition_probability(&PartitionStats::new(vec![2, 1]).unwrap(), a, b)
            .unwrap()
            .exp();
        let p111 = ln_pdp_partition_probability(&PartitionStats::new(vec![1, 1, 1]).unwrap(), a, b)
            .unwrap()
            .exp();
        assert!((p3 + 3.0 * p21 + p111 - 1.0).abs() < 1e-14);
    }

    #[test]
    fn sequential_sample_tracks_clusters() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let s = sequential_sample(&params(0.5, 2.0), 500, &mut rng).unwrap();
        assert_eq!(s.counts.iter().sum::<usize>(), 500);
        assert_eq!(*s.clusters_after.last().unwrap(), s.counts.len());
        assert!(s.clusters_after.windows(2).all(|w| w[1] >= w[0] && w[1] - w[0] <= 1));
    }

    #[test]
    fn new_cluster_probability_matches_marginal_weights() {
        for &(a, m) in &[(0.5, 1.0), (0.3, 2.0), (0.8, 0.2)] {
            let p = params(a, m);
            let tak = TakCache::new(a, m).unwrap();
            let mut prob = NewClusterProbability::new(p);
            for counts in [vec![1], vec![3, 2], vec![5, 1, 1, 2], vec![12, 7, 1]] {
                let stats = PartitionStats::new(counts).unwrap();
                let w = predictive_weights(&stats, &p, &tak).unwrap();
                let q = prob.eval(stats.n(), stats.k()).unwrap();
                assert!((q - w[0]).abs() < 1e-10, "{q} vs {}", w[0]);
            }
        }
    }

    #[test]
    fn conditional_weights_average_under_next_latent() {
        let p = params(0.4, 1.5);
        let tak = TakCache::new(0.4, 1.5).unwrap();
        let stats = PartitionStats::new(vec![4, 2, 1]).unwrap();
        let marginal = predictive_weights(&stats, &p, &tak).unwrap();
        let pts = [0.0, 0.1, 1.0, 10.0, 100.0, f64::INFINITY];
        let density = |u: f64| {
            if u > 0.0 {
                ln_next_latent_density(u, &stats, &p, &tak).unwrap().exp()
            } else {
                0.0
            }
        };
        let norm = integrate_breakpoints(density, &pts, QuadOptions::rel(1e-11))
            .unwrap()
            .value;
        assert!((norm - 1.0).abs() < 1e-9, "{norm}");
        for (j, w) in marginal.iter().enumerate() {
            let f = |u: f64| {
                if u > 0.0 {
                    conditional_predictive_weights(&stats, &p, u).unwrap()[j] * density(u)
                } else {
                    0.0
                }
            };
            let v = integrate_breakpoints(f, &pts, QuadOptions::rel(1e-11)).unwrap().value;
            assert!((v - w).abs() < 1e-9, "{j}: {v} vs {w}");
        }
    }

    #[test]
    fn sequential_schemes_agree_in_distribution() {
        // K_8 under the urn and under the T-ratio weights
        let p = params(0.5, 1.0);
        let tak = TakCache::new(0.5, 1.0).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(31);
        let reps = 4000;
        let mut hist = [[0u64; 9]; 2];
        for _ in 0..reps {
            hist[0][*sequential_sample(&p, 8, &mut rng)
                .unwrap()
                .clusters_after
                .last()
                .unwrap()] += 1;
            hist[1][*sequential_sample_marginal(&p, 8, &tak, &mut rng)
                .unwrap()
                .clusters_after
                .last()
                .unwrap()] += 1;
        }
        // two-sample chi-square on the pooled cells with enough mass
        let mut stat = 0.0;
        let mut df = 0;
        for (&x, &y) in hist[0].iter().zip(&hist[1]).skip(1) {
            let (x, y) = (x as f64, y as f64);
            if x + y >= 20.0 {
                stat += (x - y).powi(2) / (x + y);
                df += 1;
            }
        }
        let chi = statrs::distribution::ChiSquared::new(df as f64 - 1.0).unwrap();
        use statrs::distribution::ContinuousCDF;
        assert!(1.0 - chi.cdf(stat) > 1e-3, "stat {stat} df {df}");
    }

    #[test]
    fn rejects_bad_partitions() {
        assert!(PartitionStats::new(vec![2, 0]).is_err());
        let p = params(0.5, 1.0);
        let tak = TakCache::new(0.5, 1.0).unwrap();
        let empty = PartitionStats::new(vec![]).unwrap();
        assert!(ln_partition_probability(&empty, &p, &tak).is_err());
    }
}
