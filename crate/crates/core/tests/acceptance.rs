//! Acceptance suite. Prints one PASS/FAIL line per criterion and exits
//! non-zero if any fails. Pass criterion numbers as arguments to run a
//! subset, e.g. `cargo test --test acceptance -- 1 7`.

use std::collections::{BTreeMap, HashMap};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::time::{Duration, Instant};

use nrmkit::dependency_ops::{
    canonical_atoms, evaluate_expr_keyed, hierarchical_z_posterior, normal_form, random_expr, subsample_keyed,
    subsample_z_posterior, tdnrm_crm_side, tdnrm_nrm_side, EpochAtom, KernelRegistry, OperatorExpr,
};
use nrmkit::levy_core::{
    exp_tilted_tail, expected_mass_below, ln_unit_tail, sample_crm_threshold, sample_tilted_jumps_above,
    truncated_exponent, CrmRealization, JumpMethod, NggExponent, NggParams, UniformCube, UnitExponent,
};
use nrmkit::moments::{
    cov_subsampling, cov_subsampling_lower_region, cov_superposition, cov_superposition_lower_region, cov_transition,
    monte_carlo_moments, ngg_variance_asymptote, ngg_variance_closed, nrm_variance_quadrature, Family, McSettings,
    MomentOp,
};
use nrmkit::ngg_posterior::{
    conditional_predictive_weights, ln_latent_mass_density, ln_next_latent_density, ln_partition_probability,
    ln_pdp_partition_probability, predictive_weights, sequential_sample, PartitionStats,
};
use nrmkit::quadrature::{integrate_breakpoints, QuadOptions};
use nrmkit::slice_sampler::{
    self, check_invariants, parse_data_csv, run_chain, Component, ComponentModel, GaussianMeanModel, MassPrior,
    MixtureState, RunSettings, SliceConfig,
};
use nrmkit::special_math::{ln_gamma, ln_upper_gamma};
use nrmkit::stats::{adjusted_rand_index, chi_square_gof, ks_one_sample, mean_estimate, pp_correlation, TestResult};
use nrmkit::tak::{ln_tak_quadrature, ln_tak_quadrature_latent, TableOptions, TakCache, TakTable};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Gamma, Normal};
use statrs::distribution::{ContinuousCDF, Discrete, DiscreteCDF, Gamma as GammaDist, Normal as NormalDist, Poisson};

struct Outcome {
    pass: bool,
    detail: String,
}

fn outcome(pass: bool, detail: String) -> Outcome {
    Outcome { pass, detail }
}

fn rel(x: f64, y: f64) -> f64 {
    ((x - y) / y).abs()
}

fn within(elapsed: Duration, limit_s: u64) -> bool {
    elapsed.as_secs_f64() < limit_s as f64
}

fn ngg(a: f64, m: f64) -> NggParams {
    NggParams::new(a, m).unwrap()
}

/// All set partitions of n items as restricted growth strings.
fn set_partitions(n: usize) -> Vec<Vec<usize>> {
    fn grow(prefix: &mut Vec<usize>, max: usize, n: usize, out: &mut Vec<Vec<usize>>) {
        if prefix.len() == n {
            out.push(prefix.clone());
            return;
        }
        for l in 0..=max + 1 {
            prefix.push(l);
            grow(prefix, max.max(l), n, out);
            prefix.pop();
        }
    }
    let mut out = Vec::new();
    if n > 0 {
        grow(&mut vec![0], 0, n, &mut out);
    }
    out
}

fn sorted_counts(labels: &[usize]) -> Vec<usize> {
    let mut c = PartitionStats::from_labels(labels).counts().to_vec();
    c.sort_unstable();
    c
}

fn t_table() -> Outcome {
    let start = Instant::now();
    let mut worst: f64 = 0.0;
    let mut bound_violations = 0;
    for (a, m) in [(0.3, 1.0), (0.5, 2.0), (0.7, 0.5)] {
        let table = TakTable::fill(a, m, 30, 10, TableOptions::default()).unwrap();
        for (n, k, cell) in table.cells() {
            // the defining integral over t and its latent-variable form
            for oracle in [
                ln_tak_quadrature(n, k, a, m).unwrap(),
                ln_tak_quadrature_latent(n, k, a, m).unwrap(),
            ] {
                worst = worst.max((cell.ln_value - oracle).exp_m1().abs());
            }
            if cell.ln_value > ln_upper_gamma(k as f64, m).unwrap() + 1e-12 {
                bound_violations += 1;
            }
        }
    }
    let t = start.elapsed();
    outcome(
        worst <= 1e-6 && bound_violations == 0 && within(t, 60),
        format!("max rel err {worst:.2e}, bound violations {bound_violations}, {t:.1?}"),
    )
}

fn partition_normalization() -> Outcome {
    let p = ngg(0.5, 1.0);
    let tak = TakCache::new(0.5, 1.0).unwrap();
    let mut worst: f64 = 0.0;
    for n in 1..=6 {
        let total: f64 = set_partitions(n)
            .iter()
            .map(|l| {
                ln_partition_probability(&PartitionStats::from_labels(l), &p, &tak)
                    .unwrap()
                    .exp()
            })
            .sum();
        worst = worst.max((total - 1.0).abs());
    }
    outcome(worst <= 1e-6, format!("max |sum - 1| over N <= 6: {worst:.2e}"))
}

fn conditional_marginal() -> Outcome {
    let cases: [(&[usize], f64, f64); 5] = [
        (&[3, 2], 0.5, 1.0),
        (&[4, 1, 2], 0.3, 2.0),
        (&[10, 5], 0.7, 0.5),
        (&[6, 4, 3, 2, 1], 0.5, 3.0),
        (&[8, 5, 4, 2, 1], 0.25, 1.5),
    ];
    let points = [0.0, 1e-3, 0.1, 1.0, 10.0, 100.0, 1e3, f64::INFINITY];
    let opts = QuadOptions::rel(1e-12);
    // averages the conditional weights under a latent law given as ln density
    let averaged = |stats: &PartitionStats, p: &NggParams, ln_density: &dyn Fn(f64) -> f64| {
        let norm = integrate_breakpoints(|u| if u > 0.0 { ln_density(u).exp() } else { 0.0 }, &points, opts)
            .unwrap()
            .value;
        let weights: Vec<f64> = (0..=stats.k())
            .map(|j| {
                let f = |u: f64| {
                    if u <= 0.0 {
                        return 0.0;
                    }
                    conditional_predictive_weights(stats, p, u).unwrap()[j] * ln_density(u).exp()
                };
                integrate_breakpoints(f, &points, opts).unwrap().value
            })
            .collect();
        (norm, weights)
    };
    let (mut worst, mut worst_un): (f64, f64) = (0.0, 0.0);
    for (counts, a, m) in cases {
        let stats = PartitionStats::new(counts.to_vec()).unwrap();
        let p = ngg(a, m);
        let tak = TakCache::new(a, m).unwrap();
        let marginal = predictive_weights(&stats, &p, &tak).unwrap();
        // the latent variable of the predictive event: U_{N+1} given the
        // first N allocations, the next allocation summed out
        let (norm, w) = averaged(&stats, &p, &|u| ln_next_latent_density(u, &stats, &p, &tak).unwrap());
        worst = worst.max((norm - 1.0).abs());
        for (x, y) in w.iter().zip(&marginal) {
            worst = worst.max((x - y).abs());
        }
        let (_, w) = averaged(&stats, &p, &|u| {
            ln_latent_mass_density(u, stats.n(), stats.k(), &p, &tak).unwrap()
        });
        for (x, y) in w.iter().zip(&marginal) {
            worst_un = worst_un.max((x - y).abs());
        }
    }
    outcome(
        worst <= 1e-5,
        format!(
            "max abs gap over 5 cases {worst:.2e} under the U_(N+1) law; \
             diagnostic: same weights under the U_N law miss by {worst_un:.2e}"
        ),
    )
}

fn pdp_equivalence() -> Outcome {
    let (a, b) = (0.5, 1.0);
    let shape = b / a;
    let mut by_counts: BTreeMap<Vec<usize>, f64> = BTreeMap::new();
    let mut worst: f64 = 0.0;
    let mut checked = 0;
    for n in 1..=6 {
        for labels in set_partitions(n) {
            let key = sorted_counts(&labels);
            let mixed = *by_counts.entry(key).or_insert_with(|| {
                let stats = PartitionStats::from_labels(&labels);
                let f = |m: f64| {
                    if m <= 0.0 {
                        return 0.0;
                    }
                    let tak = TakCache::new(a, m).unwrap();
                    let lp = ln_partition_probability(&stats, &ngg(a, m), &tak).unwrap();
                    (lp + (shape - 1.0) * m.ln() - m - ln_gamma(shape)).exp()
                };
                integrate_breakpoints(f, &[0.0, 0.5, 2.0, 8.0, 30.0, f64::INFINITY], QuadOptions::rel(1e-10))
                    .unwrap()
                    .value
            });
            let pdp = ln_pdp_partition_probability(&PartitionStats::from_labels(&labels), a, b)
                .unwrap()
                .exp();
            worst = worst.max((mixed - pdp).abs());
            checked += 1;
        }
    }
    outcome(worst <= 1e-5, format!("{checked} partitions, max abs gap {worst:.2e}"))
}

fn moments() -> Outcome {
    let f = Family::Ngg { a: 0.5 };
    let mc_mean = monte_carlo_moments(f, 2.0, 0.3, &MomentOp::Mean, &McSettings::new(10_000, 501)).unwrap();
    let z_mean = mc_mean.mean.z_score(0.3);
    let dp = nrm_variance_quadrature(Family::Dirichlet, 2.0, 0.3).unwrap();
    let dp_rel = rel(dp, 0.07);
    let closed = ngg_variance_closed(0.5, 1.0, 0.3).unwrap();
    let quad = nrm_variance_quadrature(f, 1.0, 0.3).unwrap();
    let ngg_rel = rel(closed, quad);
    let mc_var = monte_carlo_moments(f, 1.0, 0.3, &MomentOp::Variance, &McSettings::new(10_000, 502)).unwrap();
    let z_var = mc_var.second.z_score(closed);
    let asym = rel(
        ngg_variance_closed(0.5, 1e4, 0.3).unwrap(),
        ngg_variance_asymptote(0.5, 1e4, 0.3),
    );
    outcome(
        z_mean <= 3.0 && dp_rel <= 1e-8 && ngg_rel <= 1e-6 && z_var <= 3.0 && asym <= 0.02,
        format!(
            "mean z {z_mean:.2}; DP var rel {dp_rel:.1e}; NGG closed/quad rel {ngg_rel:.1e}; \
             NGG MC z {z_var:.2}; large-M gap {:.2}%",
            100.0 * asym
        ),
    )
}

fn covariances() -> Outcome {
    let start = Instant::now();
    let f = Family::Ngg { a: 0.5 };
    let reps = 100_000;
    let mut lines = Vec::new();
    let mut pass = true;
    let mut report = |name: &str, formula: f64, lower: Option<f64>, mc: nrmkit::stats::Estimate| {
        let z = mc.z_score(formula);
        pass &= z <= 3.0;
        let extra = lower.map_or(String::new(), |p| format!(", lower-region form {p:.5}"));
        lines.push(format!(
            "{name} {formula:.5} vs MC {:.5}±{:.5} (z {z:.2}{extra})",
            mc.value, mc.se
        ));
    };
    let masses = vec![1.0, 1.0];
    report(
        "super",
        cov_superposition(f, &masses, 0, 0.3).unwrap(),
        Some(cov_superposition_lower_region(f, &masses, 0, 0.3).unwrap()),
        monte_carlo_moments(
            f,
            2.0,
            0.3,
            &MomentOp::Superposition {
                masses: masses.clone(),
                k: 0,
            },
            &McSettings::new(reps, 601),
        )
        .unwrap()
        .second,
    );
    report(
        "sub",
        cov_subsampling(f, 2.0, 0.5, 0.3).unwrap(),
        Some(cov_subsampling_lower_region(f, 2.0, 0.5, 0.3).unwrap()),
        monte_carlo_moments(
            f,
            2.0,
            0.3,
            &MomentOp::Subsampling { q: 0.5 },
            &McSettings::new(reps, 602),
        )
        .unwrap()
        .second,
    );
    report(
        "trans",
        cov_transition(f, 1.0, 0.2, 0.3).unwrap(),
        None,
        monte_carlo_moments(
            f,
            1.0,
            0.3,
            &MomentOp::Transition { p_a: 0.2 },
            &McSettings::new(reps, 603),
        )
        .unwrap()
        .second,
    );
    let t = start.elapsed();
    outcome(pass && within(t, 600), format!("{}; {t:.1?}", lines.join("; ")))
}

fn power_law() -> Outcome {
    let start = Instant::now();
    let grid: Vec<usize> = (0..=20)
        .map(|i| 10f64.powf(3.0 + 0.1 * i as f64).round() as usize)
        .collect();
    let n = *grid.last().unwrap();
    let runs = 20;
    let mut slopes = Vec::new();
    for r in 0..runs {
        let mut rng = ChaCha8Rng::seed_from_u64(700 + r);
        let s = sequential_sample(&ngg(0.5, 10.0), n, &mut rng).unwrap();
        let xs: Vec<f64> = grid.iter().map(|&g| (g as f64).ln()).collect();
        let ys: Vec<f64> = grid.iter().map(|&g| (s.clusters_after[g - 1] as f64).ln()).collect();
        let mx = xs.iter().sum::<f64>() / xs.len() as f64;
        let my = ys.iter().sum::<f64>() / ys.len() as f64;
        let sxy: f64 = xs.iter().zip(&ys).map(|(x, y)| (x - mx) * (y - my)).sum();
        let sxx: f64 = xs.iter().map(|x| (x - mx) * (x - mx)).sum();
        slopes.push(sxy / sxx);
    }
    let slope = slopes.iter().sum::<f64>() / runs as f64;
    // a -> 0 with mass M / a converges to a Dirichlet process with mass M
    let m_dp = 10.0;
    let mut ratios = Vec::new();
    for r in 0..runs {
        let mut rng = ChaCha8Rng::seed_from_u64(800 + r);
        let s = sequential_sample(&ngg(0.01, m_dp / 0.01), n, &mut rng).unwrap();
        ratios.push(*s.clusters_after.last().unwrap() as f64 / (n as f64).ln());
    }
    let ratio = ratios.iter().sum::<f64>() / runs as f64;
    let t = start.elapsed();
    outcome(
        (slope - 0.5).abs() <= 0.05 && rel(ratio, m_dp) <= 0.25 && within(t, 300),
        format!("mean slope {slope:.3} (a=0.5); mean K_n/log n {ratio:.2} vs M=10 (a=0.01); {t:.1?}"),
    )
}

fn ks_with<F: Fn(f64) -> f64>(x: &[f64], cdf: F) -> TestResult {
    ks_one_sample(x, cdf)
}

/// CDF of exp(h(u)) on (0, hi) tabulated by piecewise quadrature.
fn tabulated_cdf<H: Fn(f64) -> f64>(h: H, hi: f64, pieces: usize) -> impl Fn(f64) -> f64 {
    let step = hi / pieces as f64;
    let mut cum = vec![0.0];
    for i in 0..pieces {
        let piece = integrate_breakpoints(
            |u| if u <= 0.0 { 0.0 } else { h(u).exp() },
            &[i as f64 * step, (i + 1) as f64 * step],
            QuadOptions::rel(1e-12).with_abs(1e-300),
        )
        .unwrap()
        .value;
        cum.push(cum[i] + piece);
    }
    let total = cum[pieces];
    move |u: f64| {
        if u <= 0.0 {
            return 0.0;
        }
        if u >= hi {
            return 1.0;
        }
        let i = ((u / step) as usize).min(pieces - 1);
        let t = (u - i as f64 * step) / step;
        (cum[i] + t * (cum[i + 1] - cum[i])) / total
    }
}

fn stationarity() -> Vec<(String, f64)> {
    let mut rng = ChaCha8Rng::seed_from_u64(901);
    let a = 0.5;
    let model = GaussianMeanModel::new(1.0, vec![0.0], 3.0).unwrap();
    let config = SliceConfig::new(a, MassPrior::Gamma { shape: 1.0, rate: 1.0 }).unwrap();
    let data: Vec<Vec<f64>> = [-1.2, -0.8, -1.0, 2.1, 1.9, 2.4, -0.9, 2.2, -1.1, 2.0]
        .iter()
        .map(|&x| vec![x])
        .collect();
    let base = MixtureState {
        components: vec![
            Component {
                jump: 2.0,
                theta: vec![-1.0],
            },
            Component {
                jump: 1.5,
                theta: vec![2.0],
            },
            Component {
                jump: 0.8,
                theta: vec![0.5],
            },
        ],
        allocations: vec![0, 0, 0, 1, 1, 1, 0, 1, 0, 1],
        slices: vec![0.5, 1.0, 0.3, 0.9, 0.2, 1.2, 0.7, 0.05, 1.9, 1.4],
        latent: 1.0,
        mass: 1.0,
        level: 0.05,
    };
    check_invariants(&base).unwrap();
    let draws = 20_000;
    let mut results = Vec::new();

    // allocations of item 0 (slice 0.5: all three components eligible)
    let mut st = base.clone();
    let mut counts = [0u64; 3];
    for _ in 0..draws {
        slice_sampler::sample_allocations(&mut st, &data, &model, &mut rng).unwrap();
        counts[st.allocations[0]] += 1;
    }
    let lw: Vec<f64> = base
        .components
        .iter()
        .map(|c| -0.5 * (data[0][0] - c.theta[0]).powi(2))
        .collect();
    let z: f64 = lw.iter().map(|v| v.exp()).sum();
    let probs: Vec<f64> = lw.iter().map(|v| v.exp() / z).collect();
    results.push(("allocations".into(), chi_square_gof(&counts, &probs).p_value));

    // latent relative mass: N = 10, K = 3, a = 0.5, M = 1
    let mut st = base.clone();
    let p = ngg(a, st.mass);
    let total_jump = st.total_jump();
    let xs: Vec<f64> = (0..draws)
        .map(|_| {
            slice_sampler::sample_latent_mass(&mut st, &config, &mut rng).unwrap();
            st.latent
        })
        .collect();
    let level = st.level;
    let h = |u: f64| 9.0 * u.ln() - u * total_jump - truncated_exponent(&p, u, level).unwrap();
    let cdf = tabulated_cdf(h, 40.0, 4000);
    results.push(("latent mass".into(), ks_with(&xs, cdf).p_value));

    // component of cluster 0 (five points) against the conjugate posterior
    let mut st = base.clone();
    let members: Vec<f64> = st
        .allocations
        .iter()
        .zip(&data)
        .filter(|(s, _)| **s == 0)
        .map(|(_, x)| x[0])
        .collect();
    let prec = 1.0 / 9.0 + members.len() as f64;
    let post = NormalDist::new(members.iter().sum::<f64>() / prec, prec.sqrt().recip()).unwrap();
    let xs: Vec<f64> = (0..draws)
        .map(|_| {
            slice_sampler::sample_components(&mut st, &data, &model, &config, &mut rng).unwrap();
            st.components[0].theta[0]
        })
        .collect();
    results.push(("components".into(), ks_with(&xs, |x| post.cdf(x)).p_value));

    // occupied jump: n_0 = 5 so Gamma(5 - a, rate 1 + U)
    let mut st = base.clone();
    let g = GammaDist::new(5.0 - a, 1.0 + st.latent).unwrap();
    let xs: Vec<f64> = (0..draws)
        .map(|_| {
            slice_sampler::sample_fixed_jumps(&mut st, &config, &mut rng).unwrap();
            st.components[0].jump
        })
        .collect();
    results.push(("fixed jumps".into(), ks_with(&xs, |x| g.cdf(x)).p_value));

    // slices: u_0 / J_{s_0} uniform, level equal to the minimum
    let mut st = base.clone();
    let mut level_ok = true;
    let xs: Vec<f64> = (0..draws)
        .map(|_| {
            slice_sampler::sample_slices(&mut st, &mut rng).unwrap();
            level_ok &= st.level == st.slices.iter().copied().fold(f64::INFINITY, f64::min);
            st.slices[0] / st.components[st.allocations[0]].jump
        })
        .collect();
    let p_slices = if level_ok {
        ks_with(&xs, |x| x.clamp(0.0, 1.0)).p_value
    } else {
        0.0
    };
    results.push(("slices".into(), p_slices));

    // new jumps: a = 0.5, M = 1, U_N = 1, L = 0.1
    let mut st = base.clone();
    st.level = 0.1;
    st.latent = 1.0;
    st.slices = st.slices.iter().map(|&u| u.max(0.1)).collect();
    let pn = ngg(a, 1.0);
    let mean = exp_tilted_tail(&pn, 1.0, 0.1).unwrap();
    let pois = Poisson::new(mean).unwrap();
    let mut count_hist = vec![0u64; 40];
    let mut new_jumps = Vec::new();
    for _ in 0..draws {
        slice_sampler::sample_new_jumps(&mut st, &model, &config, &mut rng).unwrap();
        let fresh = &st.components[2..];
        count_hist[fresh.len().min(39)] += 1;
        if new_jumps.len() < draws {
            new_jumps.extend(fresh.iter().map(|c| c.jump));
        }
    }
    let probs: Vec<f64> = (0..40)
        .map(|k| if k < 39 { pois.pmf(k as u64) } else { 1.0 - pois.cdf(38) })
        .collect();
    results.push(("new jump count".into(), chi_square_gof(&count_hist, &probs).p_value));
    let tail_l = mean;
    let jump_cdf = |t: f64| {
        if t <= 0.1 {
            0.0
        } else {
            1.0 - exp_tilted_tail(&pn, 1.0, t).unwrap() / tail_l
        }
    };
    results.push(("new jump sizes".into(), ks_with(&new_jumps, jump_cdf).p_value));

    // mass: Gamma(1 + K, 1 + |Q(-a, L)| + unit truncated exponent)
    let mut st = base.clone();
    let extra =
        ln_unit_tail(a, st.level).unwrap().exp() + truncated_exponent(&ngg(a, 1.0), st.latent, st.level).unwrap();
    let g = GammaDist::new(1.0 + st.components.len() as f64, 1.0 + extra).unwrap();
    let xs: Vec<f64> = (0..draws)
        .map(|_| {
            slice_sampler::sample_mass(&mut st, &config, &mut rng).unwrap();
            st.mass
        })
        .collect();
    results.push(("mass".into(), ks_with(&xs, |x| g.cdf(x)).p_value));
    results
}

/// Forward draw of the augmented state and data from the joint prior.
fn forward_draw<R: Rng>(n: usize, a: f64, model: &GaussianMeanModel, rng: &mut R) -> (MixtureState, Vec<Vec<f64>>) {
    let z = 1e-6;
    loop {
        let mass: f64 = Gamma::new(1.0, 1.0).unwrap().sample(rng);
        let p = ngg(a, mass);
        let jumps = sample_tilted_jumps_above(&p, 0.0, z, JumpMethod::Rejection, rng).unwrap();
        let below = expected_mass_below(&p, 0.0, z).unwrap();
        let total: f64 = jumps.iter().sum::<f64>() + below;
        let mut cum = Vec::with_capacity(jumps.len());
        let mut acc = 0.0;
        for j in &jumps {
            acc += j;
            cum.push(acc);
        }
        let mut alloc = Vec::with_capacity(n);
        let mut fell_below = false;
        for _ in 0..n {
            let target = rng.random::<f64>() * total;
            let i = cum.partition_point(|&c| c <= target);
            if i >= jumps.len() {
                fell_below = true;
                break;
            }
            alloc.push(i);
        }
        if fell_below {
            continue;
        }
        let slices: Vec<f64> = alloc.iter().map(|&s| jumps[s] * (1.0 - rng.random::<f64>())).collect();
        let level = slices.iter().copied().fold(f64::INFINITY, f64::min);
        if level <= z {
            continue;
        }
        let latent = Gamma::new(n as f64, 1.0).unwrap().sample(rng) / total;
        let mut occupied: Vec<usize> = alloc.clone();
        occupied.sort_unstable();
        occupied.dedup();
        let mut order: Vec<usize> = occupied.clone();
        order.extend((0..jumps.len()).filter(|i| occupied.binary_search(i).is_err() && jumps[*i] > level));
        let mut remap = HashMap::new();
        for (new, &old) in order.iter().enumerate() {
            remap.insert(old, new);
        }
        let components: Vec<Component> = order
            .iter()
            .map(|&i| Component {
                jump: jumps[i],
                theta: model.sample_prior(rng),
            })
            .collect();
        let allocations: Vec<usize> = alloc.iter().map(|s| remap[s]).collect();
        let state = MixtureState {
            components,
            allocations,
            slices,
            latent,
            mass,
            level,
        };
        let data = simulate_data(&state, model, rng);
        return (state, data);
    }
}

fn simulate_data<R: Rng>(state: &MixtureState, model: &GaussianMeanModel, rng: &mut R) -> Vec<Vec<f64>> {
    let noise = Normal::new(0.0, model.obs_sd).unwrap();
    state
        .allocations
        .iter()
        .map(|&s| vec![state.components[s].theta[0] + noise.sample(rng)])
        .collect()
}

fn test_functions(s: &MixtureState) -> [f64; 4] {
    [s.occupied_count() as f64, s.mass, s.latent, s.total_jump()]
}

fn geweke() -> [f64; 4] {
    let (n, a) = (20, 0.5);
    let model = GaussianMeanModel::new(1.0, vec![0.0], 2.0).unwrap();
    let config = SliceConfig::new(a, MassPrior::Gamma { shape: 1.0, rate: 1.0 }).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(902);
    let draws = 5000;
    let forward: Vec<[f64; 4]> = (0..draws)
        .map(|_| test_functions(&forward_draw(n, a, &model, &mut rng).0))
        .collect();
    let (mut state, _) = forward_draw(n, a, &model, &mut rng);
    let thin = 4;
    let mut successive = Vec::with_capacity(draws);
    for it in 0..draws * thin {
        let data = simulate_data(&state, &model, &mut rng);
        slice_sampler::sweep(&mut state, &data, &model, &config, &mut rng).unwrap();
        if it % thin == 0 {
            successive.push(test_functions(&state));
        }
    }
    let mut out = [0.0; 4];
    for (i, o) in out.iter_mut().enumerate() {
        let x: Vec<f64> = forward.iter().map(|v| v[i]).collect();
        let y: Vec<f64> = successive.iter().map(|v| v[i]).collect();
        *o = pp_correlation(&x, &y);
    }
    out
}

fn fixture() -> (Vec<Vec<f64>>, Vec<usize>) {
    let dir = concat!(env!("CARGO_MANIFEST_DIR"), "/tests/fixtures/");
    let data = parse_data_csv(&std::fs::read_to_string(format!("{dir}three_clusters.csv")).unwrap()).unwrap();
    let truth = std::fs::read_to_string(format!("{dir}three_clusters_labels.csv"))
        .unwrap()
        .lines()
        .map(|l| l.trim().parse().unwrap())
        .collect();
    (data, truth)
}

/// Posterior mode of K and the ARI of the highest-joint allocation.
fn recovery(a: f64, mass_prior: MassPrior) -> (usize, f64, Duration) {
    let start = Instant::now();
    let (data, truth) = fixture();
    let model = GaussianMeanModel::new(1.0, vec![0.0], 10.0).unwrap();
    let config = SliceConfig::new(a, mass_prior).unwrap();
    let settings = RunSettings {
        iterations: 2000,
        burn_in: 500,
        thin: 1,
        seed: 903,
    };
    let chain = run_chain(&data, &model, &config, &settings).unwrap();
    let mut k_counts: BTreeMap<usize, usize> = BTreeMap::new();
    for r in &chain {
        *k_counts.entry(r.k).or_default() += 1;
    }
    let mode = k_counts.iter().max_by_key(|(_, c)| **c).map(|(k, _)| *k).unwrap();
    let map = chain.iter().max_by(|x, y| x.log_joint.total_cmp(&y.log_joint)).unwrap();
    (mode, adjusted_rand_index(&map.allocations, &truth), start.elapsed())
}

fn slice_sampler_checks() -> Outcome {
    let tests = stationarity();
    let alpha = 0.01 / tests.len() as f64;
    let worst = tests.iter().map(|t| t.1).fold(1.0, f64::min);
    let failing: Vec<String> = tests
        .iter()
        .filter(|t| t.1 < alpha)
        .map(|t| format!("{} p={:.1e}", t.0, t.1))
        .collect();
    let pp = geweke();
    let pp_min = pp.iter().copied().fold(1.0, f64::min);
    // a small discount with a mass prior favoring few clusters; the large
    // discount run is reported to show the prior sensitivity of K
    let (mode, ari, t) = recovery(0.1, MassPrior::Gamma { shape: 1.0, rate: 10.0 });
    let (mode_wide, _, _) = recovery(0.5, MassPrior::Gamma { shape: 1.0, rate: 1.0 });
    let pass = failing.is_empty() && pp_min > 0.99 && mode == 3 && ari >= 0.9 && within(t, 60);
    outcome(
        pass,
        format!(
            "{} conditionals, min p {worst:.3} (alpha {alpha:.4}){}; Geweke PP corr K/M/U/sumJ {:.4}/{:.4}/{:.4}/{:.4}; \
             3-cluster mode K {mode}, MAP ARI {ari:.3}, {t:.1?} (a=0.1, M~Gamma(1,10); mode K {mode_wide} at a=0.5, M~Gamma(1,1))",
            tests.len(),
            if failing.is_empty() { String::new() } else { format!(" failing: {}", failing.join(", ")) },
            pp[0],
            pp[1],
            pp[2],
            pp[3]
        ),
    )
}

fn is_normal_chain(e: &OperatorExpr, seen_transition: bool) -> bool {
    match e {
        OperatorExpr::Leaf { .. } => true,
        OperatorExpr::Subsample { child, .. } => matches!(**child, OperatorExpr::Leaf { .. }),
        OperatorExpr::Transition { child, .. } => is_normal_chain(child, true),
        OperatorExpr::Superpose { .. } => {
            let _ = seen_transition;
            false
        }
    }
}

fn is_normal_form(e: &OperatorExpr) -> bool {
    match e {
        OperatorExpr::Superpose { children } => children.iter().all(|c| is_normal_chain(c, false)),
        other => is_normal_chain(other, false),
    }
}

fn operator_algebra() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(1001);
    let base = UniformCube { dim: 1 };
    let specs = [("m1", ngg(0.5, 1.0)), ("m2", ngg(0.3, 2.0)), ("m3", ngg(0.7, 0.5))];
    let mut leaves = HashMap::new();
    for (id, p) in specs {
        leaves.insert(id.to_string(), sample_crm_threshold(&p, &base, 1e-3, &mut rng).unwrap());
    }
    let leaf_list: Vec<(String, NggParams)> = specs.iter().map(|(i, p)| (i.to_string(), *p)).collect();
    let kernels = KernelRegistry::standard(1);
    let names = kernels.names();
    let (mut idempotent, mut equal, mut shaped) = (0, 0, 0);
    let total = 100usize;
    for i in 0..total {
        let e = random_expr(5, &leaf_list, &names, &mut rng);
        let nf = normal_form(&e);
        idempotent += (normal_form(&nf) == nf) as usize;
        shaped += is_normal_form(&nf) as usize;
        let x = evaluate_expr_keyed(&e, &leaves, &kernels, i as u64).unwrap();
        let y = evaluate_expr_keyed(&nf, &leaves, &kernels, i as u64).unwrap();
        equal += (canonical_atoms(&x) == canonical_atoms(&y)) as usize;
    }

    // thinned total mass Laplace functional
    let (a, m, q) = (0.5, 1.0, 0.5);
    let p = ngg(a, m);
    let below = expected_mass_below(&p, 0.0, 1e-6).unwrap();
    let masses: Vec<f64> = (0..10_000u64)
        .map(|r| {
            let mut rng = ChaCha8Rng::seed_from_u64(20_000 + r);
            let crm = sample_crm_threshold(&p, &base, 1e-6, &mut rng).unwrap();
            subsample_keyed(&crm, q, r).unwrap().total_mass() + q * below
        })
        .collect();
    let mut laplace = Vec::new();
    for v in [0.5, 1.0, 2.0] {
        let vals: Vec<f64> = masses.iter().map(|t| (-v * t).exp()).collect();
        let est = mean_estimate(&vals);
        let target = (-q * m * NggExponent { a }.psi(v)).exp();
        laplace.push(est.z_score(target));
    }
    let laplace_ok = laplace.iter().all(|z| *z <= 3.0);

    // two constructions of the time-dependent measure
    let epochs: Vec<CrmRealization> = (0..3)
        .map(|_| sample_crm_threshold(&ngg(0.5, 2.0), &base, 1e-4, &mut rng).unwrap())
        .collect();
    let crm_side = tdnrm_crm_side(&epochs, 0.7, "rw", &kernels, 77).unwrap();
    let nrm_side = tdnrm_nrm_side(&epochs, 0.7, "rw", &kernels, 77).unwrap();
    let mut xs = crm_side.atoms.clone();
    let mut ys = nrm_side.atoms.clone();
    xs.sort_by_key(|a| a.id);
    ys.sort_by_key(|a| a.id);
    let td_equal = xs.len() == ys.len()
        && xs
            .iter()
            .zip(&ys)
            .all(|(x, y)| x.id == y.id && x.location == y.location && rel(x.weight, y.weight) <= 1e-12);

    outcome(
        idempotent == total && equal == total && shaped == total && laplace_ok && td_equal,
        format!(
            "idempotent {idempotent}/{total}, normal shape {shaped}/{total}, keyed equality {equal}/{total}; \
             Laplace z at v=0.5/1/2: {:.2}/{:.2}/{:.2}; two-construction equality {td_equal} ({} atoms)",
            laplace[0],
            laplace[1],
            laplace[2],
            xs.len()
        ),
    )
}

fn z_posteriors() -> Outcome {
    // enumeration: all three items sit on the first atom (jump 1), the
    // target atom has no items
    let enumerate = |q: f64, accepted_total: f64, rejected_total: f64, n: i32| {
        let with = q * accepted_total.powi(-n);
        let without = (1.0 - q) * rejected_total.powi(-n);
        with / (with + without)
    };
    let v = subsample_z_posterior(&[1.0, 1.0], &[true, true], 0.5, 1, 3, 0).unwrap();
    let oracle = enumerate(0.5, 2.0, 1.0, 3);
    let gap = (v - oracle).abs().max((v - 1.0 / 9.0).abs());

    let single = hierarchical_z_posterior(
        0,
        EpochAtom { epoch: 0, index: 1 },
        &[vec![1.0, 1.0]],
        &[vec![true, true]],
        0.5,
        0,
        3,
    )
    .unwrap();
    let one_step = hierarchical_z_posterior(
        1,
        EpochAtom { epoch: 0, index: 0 },
        &[vec![1.0], vec![1.0]],
        &[vec![true], vec![true]],
        0.5,
        0,
        3,
    )
    .unwrap();
    let flat = subsample_z_posterior(&[1.0, 1.0], &[true, true], 0.5, 0, 3, 0).unwrap();
    let two_epoch = hierarchical_z_posterior(
        1,
        EpochAtom { epoch: 0, index: 0 },
        &[vec![2.0], vec![1.0]],
        &[vec![true], vec![true]],
        0.5,
        0,
        2,
    )
    .unwrap();
    let two_epoch_gap = (two_epoch - enumerate(0.5, 3.0, 1.0, 2)).abs();
    outcome(
        gap <= 1e-12 && single == 1.0 && one_step == flat && two_epoch_gap <= 1e-12,
        format!(
            "value {v:.15} vs 1/9 (gap {gap:.1e}); single epoch {single}; one-step reduction exact {}; \
             two-epoch gap {two_epoch_gap:.1e}",
            one_step == flat
        ),
    )
}

type Criterion = (&'static str, fn() -> Outcome);

fn main() {
    let criteria: [Criterion; 10] = [
        ("T-table consistency", t_table),
        ("partition normalization", partition_normalization),
        ("conditional/marginal predictive consistency", conditional_marginal),
        ("Pitman-Yor equivalence", pdp_equivalence),
        ("moments", moments),
        ("covariances", covariances),
        ("power law", power_law),
        ("slice sampler", slice_sampler_checks),
        ("operator algebra", operator_algebra),
        ("acceptance posteriors", z_posteriors),
    ];
    let selected: Vec<usize> = std::env::args().skip(1).filter_map(|a| a.parse().ok()).collect();
    let mut failed = 0;
    for (i, (name, check)) in criteria.iter().enumerate() {
        let id = i + 1;
        if !selected.is_empty() && !selected.contains(&id) {
            continue;
        }
        let start = Instant::now();
        let o = catch_unwind(AssertUnwindSafe(check)).unwrap_or_else(|e| {
            let msg = e
                .downcast_ref::<String>()
                .cloned()
                .or_else(|| e.downcast_ref::<&str>().map(|s| s.to_string()))
                .unwrap_or_default();
            outcome(false, format!("panicked: {msg}"))
        });
        if !o.pass {
            failed += 1;
        }
        println!(
            "{} {id:>2} {name}: {} [{:.1}s]",
            if o.pass { "PASS" } else { "FAIL" },
            o.detail,
            start.elapsed().as_secs_f64()
        );
    }
    if failed > 0 {
        std::process::exit(1);
    }
}
