//! Means, variances and cross-operator covariances of normalized random
//! measures evaluated on a set B, by quadrature over the Laplace exponent and
//! by Monte Carlo.

use std::cell::Cell;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Beta, Distribution};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::dependency_ops::{hash_key, point_transition, subsample_keyed, IntervalExchange, OpsError};
use crate::levy_core::{
    expected_mass_below, sample_crm_threshold, CrmRealization, DirichletExponent, LevyError, NggExponent, NggParams,
    UniformCube, UnitExponent,
};
use crate::quadrature::{integrate_breakpoints, QuadOptions, QuadratureError};
use crate::special_math::{ln_upper_gamma, MathError};
use crate::stats::{covariance_estimate, mean_estimate, variance_estimate, Estimate};

#[derive(Debug, Clone, PartialEq, Error)]
pub enum MomentError {
    #[error("invalid query: {0}")]
    InvalidQuery(String),
    #[error(transparent)]
    Quadrature(#[from] QuadratureError),
    #[error(transparent)]
    Math(#[from] MathError),
    #[error(transparent)]
    Levy(#[from] LevyError),
    #[error(transparent)]
    Ops(#[from] OpsError),
}

/// Homogeneous Levy family with unit mass.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "family", rename_all = "snake_case")]
pub enum Family {
    Ngg { a: f64 },
    Dirichlet,
}

impl Family {
    pub fn exponent(&self) -> Box<dyn UnitExponent> {
        match *self {
            Family::Ngg { a } => Box::new(NggExponent { a }),
            Family::Dirichlet => Box::new(DirichletExponent),
        }
    }

    fn validate(&self) -> Result<(), MomentError> {
        match *self {
            Family::Ngg { a } if !(a > 0.0 && a < 1.0) => {
                Err(MomentError::InvalidQuery(format!("a = {a} not in (0, 1)")))
            }
            _ => Ok(()),
        }
    }
}

fn check_prob(name: &str, p: f64) -> Result<(), MomentError> {
    if !(0.0..=1.0).contains(&p) {
        return Err(MomentError::InvalidQuery(format!("{name} = {p} not in [0, 1]")));
    }
    Ok(())
}

fn check_mass(m: f64) -> Result<(), MomentError> {
    if !(m > 0.0 && m.is_finite()) {
        return Err(MomentError::InvalidQuery(format!("mass {m} must be positive")));
    }
    Ok(())
}

/// E[mu(B)] = P(B).
pub fn nrm_mean(p_b: f64) -> Result<f64, MomentError> {
    check_prob("P(B)", p_b)?;
    Ok(p_b)
}

/// v with M psi(v) = 1, the scale on which e^{-M psi} decays.
fn decay_scale(exp: &dyn UnitExponent, mass: f64) -> f64 {
    let (mut lo, mut hi) = (-40.0f64, 40.0f64);
    for _ in 0..100 {
        let mid = 0.5 * (lo + hi);
        if mass * exp.psi(mid.exp()) < 1.0 {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    (0.5 * (lo + hi)).exp()
}

fn tail_points(lo: f64, scale: f64) -> [f64; 5] {
    [lo, lo + 0.1 * scale, lo + scale, lo + 10.0 * scale, f64::INFINITY]
}

/// int_lo^inf f with breakpoints on the decay scale.
fn tail_integral<F: FnMut(f64) -> f64>(f: F, lo: f64, scale: f64, rel: f64) -> Result<f64, MomentError> {
    Ok(integrate_breakpoints(f, &tail_points(lo, scale), QuadOptions::rel(rel).with_abs(1e-300))?.value)
}

/// P(P - 1) M int_0^inf v psi''(v) e^{-M psi(v)} dv.
pub fn nrm_variance_quadrature(family: Family, mass: f64, p_b: f64) -> Result<f64, MomentError> {
    family.validate()?;
    check_mass(mass)?;
    check_prob("P(B)", p_b)?;
    let exp = family.exponent();
    let s = decay_scale(exp.as_ref(), mass);
    let integral = tail_integral(|v| v * exp.d2(v) * (-mass * exp.psi(v)).exp(), 0.0, s, 1e-12)?;
    Ok(p_b * (p_b - 1.0) * mass * integral)
}

/// P(1 - P) (1 - a)/a e^M M^{1/a} Gamma(-1/a, M).
pub fn ngg_variance_closed(a: f64, mass: f64, p_b: f64) -> Result<f64, MomentError> {
    Family::Ngg { a }.validate()?;
    check_mass(mass)?;
    check_prob("P(B)", p_b)?;
    let ln = mass + mass.ln() / a + ln_upper_gamma(-1.0 / a, mass)?;
    Ok(p_b * (1.0 - p_b) * (1.0 - a) / a * ln.exp())
}

/// Large-mass limit P(1 - P)(1 - a)/(M a).
pub fn ngg_variance_asymptote(a: f64, mass: f64, p_b: f64) -> f64 {
    p_b * (1.0 - p_b) * (1.0 - a) / (mass * a)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct VarianceValue {
    pub quadrature: f64,
    pub closed_form: f64,
}

impl VarianceValue {
    pub fn relative_gap(&self) -> f64 {
        ((self.quadrature - self.closed_form) / self.closed_form).abs()
    }
}

/// Variance of mu(B) by quadrature together with the family's closed form.
pub fn nrm_variance(family: Family, mass: f64, p_b: f64) -> Result<VarianceValue, MomentError> {
    let quadrature = nrm_variance_quadrature(family, mass, p_b)?;
    let closed_form = match family {
        Family::Ngg { a } => ngg_variance_closed(a, mass, p_b)?,
        Family::Dirichlet => p_b * (1.0 - p_b) / (mass + 1.0),
    };
    Ok(VarianceValue {
        quadrature,
        closed_form,
    })
}

/// Runs `body` with a slot that nested integrands can park their first error
/// in, since quadrature integrands return plain numbers.
fn nested<T, F>(body: F) -> Result<T, MomentError>
where
    F: FnOnce(&Cell<Option<MomentError>>) -> Result<T, MomentError>,
{
    let slot = Cell::new(None);
    let out = body(&slot);
    match slot.into_inner() {
        Some(e) => Err(e),
        None => out,
    }
}

fn park(slot: &Cell<Option<MomentError>>, r: Result<f64, MomentError>) -> f64 {
    match r {
        Ok(v) => v,
        Err(e) => {
            let prev = slot.take();
            slot.set(prev.or(Some(e)));
            0.0
        }
    }
}

const OUTER_REL: f64 = 1e-7;
const INNER_REL: f64 = 1e-9;

fn check_superposition(masses: &[f64], k: usize, p_b: f64) -> Result<(), MomentError> {
    check_prob("P(B)", p_b)?;
    if masses.len() < 2 || k >= masses.len() {
        return Err(MomentError::InvalidQuery(
            "need two or more masses and a valid index".into(),
        ));
    }
    check_mass(masses[k])?;
    if masses.iter().any(|m| !(*m >= 0.0 && m.is_finite())) {
        return Err(MomentError::InvalidQuery(
            "masses must be finite and non-negative".into(),
        ));
    }
    Ok(())
}

/// Cov(mu_k(B), mu(B)) for mu the normalized superposition of independent
/// measures with masses M_1..M_n:
/// P M_k int_0^inf e^{-M_{-k} psi(v)} int_v^inf (P M_k psi'(w)^2 - psi''(w))
/// e^{-M_k psi(w)} dw dv - P^2 M_k / M.
pub fn cov_superposition(family: Family, masses: &[f64], k: usize, p_b: f64) -> Result<f64, MomentError> {
    family.validate()?;
    check_superposition(masses, k, p_b)?;
    let exp = family.exponent();
    let mk = masses[k];
    let total: f64 = masses.iter().sum();
    let rest = total - mk;
    let s_inner = decay_scale(exp.as_ref(), mk);
    let s_outer = decay_scale(exp.as_ref(), total);
    let g = |w: f64| {
        let d1 = exp.d1(w);
        (p_b * mk * d1 * d1 - exp.d2(w)) * (-mk * exp.psi(w)).exp()
    };
    let outer = nested(|slot| {
        tail_integral(
            |v| {
                let inner = park(slot, tail_integral(g, v, s_inner, INNER_REL));
                (-rest * exp.psi(v)).exp() * inner
            },
            0.0,
            s_outer,
            OUTER_REL,
        )
    })?;
    Ok(p_b * mk * outer - p_b * p_b * mk / total)
}

/// The superposition covariance with the inner integral taken over (0, v)
/// and the constant P^2 (1 - 2 M_{-k}/M). Kept as a diagnostic; it does not
/// reduce to the variance as M_{-k} -> 0.
pub fn cov_superposition_lower_region(family: Family, masses: &[f64], k: usize, p_b: f64) -> Result<f64, MomentError> {
    family.validate()?;
    check_superposition(masses, k, p_b)?;
    let exp = family.exponent();
    let mk = masses[k];
    let total: f64 = masses.iter().sum();
    let rest = total - mk;
    let s_outer = decay_scale(exp.as_ref(), rest.max(f64::MIN_POSITIVE));
    let g = |w: f64| {
        let d1 = exp.d1(w);
        (p_b * mk * d1 * d1 - exp.d2(w)) * (-mk * exp.psi(w)).exp()
    };
    let outer = nested(|slot| {
        tail_integral(
            |v| {
                if v == 0.0 {
                    return 0.0;
                }
                let inner = integrate_breakpoints(g, &[0.0, v], QuadOptions::rel(INNER_REL).with_abs(1e-300))
                    .map(|r| r.value)
                    .map_err(MomentError::from);
                (-rest * exp.psi(v)).exp() * park(slot, inner)
            },
            0.0,
            s_outer,
            OUTER_REL,
        )
    })?;
    Ok(p_b * mk * outer + p_b * p_b * (1.0 - 2.0 * rest / total))
}

fn check_rate(q: f64) -> Result<(), MomentError> {
    if !(q > 0.0 && q < 1.0) {
        return Err(MomentError::InvalidQuery(format!("rate {q} not in (0, 1)")));
    }
    Ok(())
}

/// Cov(mu^q(B), mu(B)) for constant-rate thinning: the superposition
/// covariance with component masses (q M, (1 - q) M).
pub fn cov_subsampling(family: Family, mass: f64, q: f64, p_b: f64) -> Result<f64, MomentError> {
    check_rate(q)?;
    check_mass(mass)?;
    cov_superposition(family, &[q * mass, (1.0 - q) * mass], 0, p_b)
}

pub fn cov_subsampling_lower_region(family: Family, mass: f64, q: f64, p_b: f64) -> Result<f64, MomentError> {
    check_rate(q)?;
    check_mass(mass)?;
    cov_superposition_lower_region(family, &[q * mass, (1.0 - q) * mass], 0, p_b)
}

/// Cov(mu(B), (T mu)(B)) when T moves A onto B with A, B disjoint:
/// P(A) P(B) (M^2 int_0^inf int_{v1}^inf psi'(v2)^2 e^{-M psi(v2)} dv2 dv1 - 1).
pub fn cov_transition(family: Family, mass: f64, p_a: f64, p_b: f64) -> Result<f64, MomentError> {
    family.validate()?;
    check_mass(mass)?;
    check_prob("P(A)", p_a)?;
    check_prob("P(B)", p_b)?;
    if p_a + p_b > 1.0 + 1e-12 {
        return Err(MomentError::InvalidQuery("disjoint sets need P(A) + P(B) <= 1".into()));
    }
    if p_a == 0.0 || p_b == 0.0 {
        return Ok(0.0);
    }
    let exp = family.exponent();
    let s = decay_scale(exp.as_ref(), mass);
    let g = |w: f64| {
        let d1 = exp.d1(w);
        d1 * d1 * (-mass * exp.psi(w)).exp()
    };
    let outer = nested(|slot| tail_integral(|v| park(slot, tail_integral(g, v, s, INNER_REL)), 0.0, s, OUTER_REL))?;
    Ok(p_a * p_b * (mass * mass * outer - 1.0))
}

/// Which moment the Monte Carlo oracle estimates.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "op", rename_all = "snake_case")]
pub enum MomentOp {
    Mean,
    Variance,
    Superposition { masses: Vec<f64>, k: usize },
    Subsampling { q: f64 },
    Transition { p_a: f64 },
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct McSettings {
    pub reps: usize,
    pub seed: u64,
    /// Jumps below this level are replaced by their expected mass, spread
    /// diffusely.
    pub threshold: f64,
}

impl McSettings {
    pub fn new(reps: usize, seed: u64) -> Self {
        McSettings {
            reps,
            seed,
            threshold: 1e-6,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct McResult {
    /// Mean of mu(B).
    pub mean: Estimate,
    /// Variance of mu(B), or the covariance of the operator pair.
    pub second: Estimate,
    pub reps: usize,
}

struct Sampled {
    crm: CrmRealization,
    remainder: f64,
}

fn sample_ngg<R: rand::RngCore>(a: f64, mass: f64, threshold: f64, rng: &mut R) -> Result<Sampled, MomentError> {
    let p = NggParams::new(a, mass)?;
    Ok(Sampled {
        crm: sample_crm_threshold(&p, &UniformCube { dim: 1 }, threshold, rng)?,
        remainder: expected_mass_below(&p, 0.0, threshold)?,
    })
}

fn mass_in(crm: &CrmRealization, lo: f64, hi: f64) -> f64 {
    crm.atoms
        .iter()
        .filter(|x| x.location[0] >= lo && x.location[0] < hi)
        .map(|x| x.jump)
        .sum()
}

/// mu(B) of a Dirichlet process by stick breaking, until the unbroken stick
/// falls below 1e-12; the leftover is spread diffusely.
fn dirichlet_measure<R: Rng + ?Sized>(mass: f64, p_b: f64, rng: &mut R) -> f64 {
    let beta = Beta::new(1.0, mass).expect("positive mass");
    let mut rest = 1.0;
    let mut in_b = 0.0;
    while rest > 1e-12 {
        let w = rest * beta.sample(rng);
        if rng.random::<f64>() < p_b {
            in_b += w;
        }
        rest -= w;
    }
    in_b + rest * p_b
}

fn replicate(
    family: Family,
    mass: f64,
    p_b: f64,
    op: &MomentOp,
    settings: &McSettings,
    rep: usize,
) -> Result<(f64, f64), MomentError> {
    let mut rng = ChaCha8Rng::seed_from_u64(hash_key(&[settings.seed, rep as u64]));
    let a = match family {
        Family::Ngg { a } => a,
        Family::Dirichlet => {
            return match op {
                MomentOp::Mean | MomentOp::Variance => {
                    let x = dirichlet_measure(mass, p_b, &mut rng);
                    Ok((x, x))
                }
                _ => Err(MomentError::InvalidQuery(
                    "Dirichlet Monte Carlo supports mean and variance only".into(),
                )),
            };
        }
    };
    let z = settings.threshold;
    let ratio = |s: &Sampled| (mass_in(&s.crm, 0.0, p_b) + s.remainder * p_b) / (s.crm.total_mass() + s.remainder);
    match op {
        MomentOp::Mean | MomentOp::Variance => {
            let s = sample_ngg(a, mass, z, &mut rng)?;
            let x = ratio(&s);
            Ok((x, x))
        }
        MomentOp::Superposition { masses, k } => {
            let mk = masses[*k];
            let rest: f64 = masses.iter().sum::<f64>() - mk;
            let sk = sample_ngg(a, mk, z, &mut rng)?;
            let (rest_b, rest_total) = if rest > 0.0 {
                let so = sample_ngg(a, rest, z, &mut rng)?;
                (
                    mass_in(&so.crm, 0.0, p_b) + so.remainder * p_b,
                    so.crm.total_mass() + so.remainder,
                )
            } else {
                (0.0, 0.0)
            };
            let kb = mass_in(&sk.crm, 0.0, p_b) + sk.remainder * p_b;
            let kt = sk.crm.total_mass() + sk.remainder;
            Ok((kb / kt, (kb + rest_b) / (kt + rest_total)))
        }
        MomentOp::Subsampling { q } => {
            let s = sample_ngg(a, mass, z, &mut rng)?;
            let thin = subsample_keyed(&s.crm, *q, hash_key(&[settings.seed, rep as u64, 1]))?;
            let r = s.remainder * q;
            let xq = (mass_in(&thin, 0.0, p_b) + r * p_b) / (thin.total_mass() + r);
            Ok((xq, ratio(&s)))
        }
        MomentOp::Transition { p_a } => {
            let s = sample_ngg(a, mass, z, &mut rng)?;
            let kernel = IntervalExchange {
                first: (0.0, p_b),
                second: (p_b, p_b + p_a),
            };
            let moved = point_transition(&s.crm, &kernel, &mut rng);
            let total = s.crm.total_mass() + s.remainder;
            let tb = (mass_in(&moved, 0.0, p_b) + s.remainder * p_a) / total;
            Ok((ratio(&s), tb))
        }
    }
}

/// Monte Carlo estimate of the mean of mu(B) and of the variance or
/// operator covariance, with jackknife standard errors. Replicates run in
/// parallel on independent keyed streams; results do not depend on the
/// thread count.
pub fn monte_carlo_moments(
    family: Family,
    mass: f64,
    p_b: f64,
    op: &MomentOp,
    settings: &McSettings,
) -> Result<McResult, MomentError> {
    family.validate()?;
    check_prob("P(B)", p_b)?;
    if settings.reps < 100 {
        return Err(MomentError::InvalidQuery("at least 100 replicates are required".into()));
    }
    match op {
        MomentOp::Superposition { masses, k } => check_superposition(masses, *k, p_b)?,
        MomentOp::Subsampling { q } => {
            check_rate(*q)?;
            check_mass(mass)?;
        }
        MomentOp::Transition { p_a } => {
            check_prob("P(A)", *p_a)?;
            check_mass(mass)?;
            if p_a + p_b > 1.0 {
                return Err(MomentError::InvalidQuery("disjoint sets need P(A) + P(B) <= 1".into()));
            }
        }
        _ => check_mass(mass)?,
    }
    let pairs = (0..settings.reps)
        .into_par_iter()
        .map(|rep| replicate(family, mass, p_b, op, settings, rep))
        .collect::<Result<Vec<_>, _>>()?;
    let (x, y): (Vec<f64>, Vec<f64>) = pairs.into_iter().unzip();
    let second = match op {
        MomentOp::Mean | MomentOp::Variance => variance_estimate(&x),
        _ => covariance_estimate(&x, &y),
    };
    Ok(McResult {
        mean: mean_estimate(&y),
        second,
        reps: settings.reps,
    })
}
