//! Generalized gamma Levy intensity M a / Gamma(1-a) t^{-1-a} e^{-t}: Laplace
//! exponents, tail masses, base measures and simulation of completely random
//! measures and their normalizations.

use rand::{Rng, RngCore};
use rand_distr::{Distribution, Exp1, Normal, Poisson};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::special_math::{self, ln_gamma, ln_gamma_signed, MathError};

#[derive(Debug, Clone, PartialEq, Error)]
pub enum LevyError {
    #[error("invalid parameter: {0}")]
    InvalidParameter(String),
    #[error(transparent)]
    Math(#[from] MathError),
    #[error("jump inversion failed: {0}")]
    Inversion(String),
    #[error("location dimension mismatch: expected {expected}, got {got}")]
    Dimension { expected: usize, got: usize },
}

/// Shape `a` in (0, 1) and total mass parameter `mass` > 0.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct NggParams {
    pub a: f64,
    pub mass: f64,
}

impl NggParams {
    pub fn new(a: f64, mass: f64) -> Result<Self, LevyError> {
        if !(a > 0.0 && a < 1.0) {
            return Err(LevyError::InvalidParameter(format!("a = {a} must lie in (0, 1)")));
        }
        if !(mass > 0.0 && mass.is_finite()) {
            return Err(LevyError::InvalidParameter(format!("mass = {mass} must be positive")));
        }
        Ok(NggParams { a, mass })
    }

    pub fn with_mass(self, mass: f64) -> Result<Self, LevyError> {
        NggParams::new(self.a, mass)
    }
}

/// Laplace exponent of a unit-mass homogeneous intensity, with derivatives.
pub trait UnitExponent: Sync {
    fn psi(&self, v: f64) -> f64;
    fn d1(&self, v: f64) -> f64;
    fn d2(&self, v: f64) -> f64;
}

/// (1 + v)^a - 1.
#[derive(Debug, Clone, Copy)]
pub struct NggExponent {
    pub a: f64,
}

impl UnitExponent for NggExponent {
    fn psi(&self, v: f64) -> f64 {
        (self.a * v.ln_1p()).exp_m1()
    }
    fn d1(&self, v: f64) -> f64 {
        self.a * (1.0 + v).powf(self.a - 1.0)
    }
    fn d2(&self, v: f64) -> f64 {
        self.a * (self.a - 1.0) * (1.0 + v).powf(self.a - 2.0)
    }
}

/// log(1 + v), the gamma-process exponent behind the Dirichlet process.
#[derive(Debug, Clone, Copy)]
pub struct DirichletExponent;

impl UnitExponent for DirichletExponent {
    fn psi(&self, v: f64) -> f64 {
        v.ln_1p()
    }
    fn d1(&self, v: f64) -> f64 {
        1.0 / (1.0 + v)
    }
    fn d2(&self, v: f64) -> f64 {
        -1.0 / ((1.0 + v) * (1.0 + v))
    }
}

fn check_nonneg(name: &str, v: f64) -> Result<(), LevyError> {
    if v >= 0.0 && v.is_finite() {
        Ok(())
    } else {
        Err(LevyError::InvalidParameter(format!(
            "{name} = {v} must be finite and >= 0"
        )))
    }
}

fn check_pos(name: &str, v: f64) -> Result<(), LevyError> {
    if v > 0.0 && v.is_finite() {
        Ok(())
    } else {
        Err(LevyError::InvalidParameter(format!(
            "{name} = {v} must be finite and > 0"
        )))
    }
}

/// M ((1 + v)^a - 1).
pub fn laplace_exponent(p: &NggParams, v: f64) -> Result<f64, LevyError> {
    check_nonneg("v", v)?;
    Ok(p.mass * NggExponent { a: p.a }.psi(v))
}

pub fn laplace_exponent_d1(p: &NggParams, v: f64) -> Result<f64, LevyError> {
    check_nonneg("v", v)?;
    Ok(p.mass * NggExponent { a: p.a }.d1(v))
}

pub fn laplace_exponent_d2(p: &NggParams, v: f64) -> Result<f64, LevyError> {
    check_nonneg("v", v)?;
    Ok(p.mass * NggExponent { a: p.a }.d2(v))
}

/// Unit-mass Levy density a / Gamma(1-a) t^{-1-a} e^{-t}, in logs.
pub fn ln_unit_levy_density(a: f64, t: f64) -> f64 {
    a.ln() - ln_gamma(1.0 - a) - (1.0 + a) * t.ln() - t
}

/// ln of the unit-mass tail integral int_L^inf a/Gamma(1-a) t^{-1-a} e^{-t} dt,
/// which equals ln |Q(-a, L)|.
pub fn ln_unit_tail(a: f64, level: f64) -> Result<f64, LevyError> {
    let (lg, _) = ln_gamma_signed(-a);
    Ok(special_math::ln_upper_gamma(-a, level)? - lg)
}

/// Expected number of jumps above `level`: M |Q(-a, L)|.
pub fn tail_mass(p: &NggParams, level: f64) -> Result<f64, LevyError> {
    check_pos("L", level)?;
    Ok(p.mass * ln_unit_tail(p.a, level)?.exp())
}

/// Expected number of jumps above `level` under the intensity tilted by
/// e^{-v t}: M (1 + v)^a |Q(-a, L (1 + v))|.
pub fn exp_tilted_tail(p: &NggParams, v: f64, level: f64) -> Result<f64, LevyError> {
    check_nonneg("v", v)?;
    check_pos("L", level)?;
    let lv = v.ln_1p();
    Ok(p.mass * (p.a * lv + ln_unit_tail(p.a, level * (1.0 + v))?).exp())
}

/// int_0^L (1 - e^{-v t}) M rho(t) dt, the Laplace exponent of the jumps below
/// the truncation level.
pub fn truncated_exponent(p: &NggParams, v: f64, level: f64) -> Result<f64, LevyError> {
    check_nonneg("v", v)?;
    check_pos("L", level)?;
    if v == 0.0 {
        return Ok(0.0);
    }
    let a = p.a;
    if level * (1.0 + v) < 0.5 {
        let lv = v.ln_1p();
        let ln_l = level.ln();
        let mut sum = 0.0;
        let mut ln_fact = 0.0;
        for k in 1..200 {
            let kf = k as f64;
            ln_fact += kf.ln();
            let mag = (kf * lv).exp_m1() * ((kf - a) * ln_l - ln_fact).exp() / (kf - a);
            let term = if k % 2 == 1 { mag } else { -mag };
            sum += term;
            if mag.abs() < 1e-17 * sum.abs() {
                break;
            }
        }
        return Ok(p.mass * a / special_math::gamma(1.0 - a) * sum);
    }
    let unit = NggExponent { a }.psi(v) + exp_tilted_tail(&NggParams { a, mass: 1.0 }, v, level)?
        - ln_unit_tail(a, level)?.exp();
    Ok(p.mass * unit)
}

/// Non-atomic probability measure on R^d that atom locations are drawn from.
pub trait BaseMeasure: Send + Sync {
    fn dim(&self) -> usize;
    fn sample(&self, rng: &mut dyn RngCore) -> Vec<f64>;
    fn ln_density(&self, x: &[f64]) -> f64;
}

/// Uniform distribution on [0, 1]^d.
#[derive(Debug, Clone)]
pub struct UniformCube {
    pub dim: usize,
}

impl BaseMeasure for UniformCube {
    fn dim(&self) -> usize {
        self.dim
    }
    fn sample(&self, rng: &mut dyn RngCore) -> Vec<f64> {
        (0..self.dim).map(|_| rng.random::<f64>()).collect()
    }
    fn ln_density(&self, x: &[f64]) -> f64 {
        if x.iter().all(|&v| (0.0..=1.0).contains(&v)) {
            0.0
        } else {
            f64::NEG_INFINITY
        }
    }
}

/// Gaussian with the given mean and a common standard deviation.
#[derive(Debug, Clone)]
pub struct IsotropicGaussian {
    pub mean: Vec<f64>,
    pub sd: f64,
}

impl BaseMeasure for IsotropicGaussian {
    fn dim(&self) -> usize {
        self.mean.len()
    }
    fn sample(&self, rng: &mut dyn RngCore) -> Vec<f64> {
        let n = Normal::new(0.0, self.sd).expect("sd validated at construction");
        self.mean.iter().map(|m| m + n.sample(rng)).collect()
    }
    fn ln_density(&self, x: &[f64]) -> f64 {
        let d = self.mean.len() as f64;
        let ss: f64 = x.iter().zip(&self.mean).map(|(xi, mi)| (xi - mi) * (xi - mi)).sum();
        -0.5 * ss / (self.sd * self.sd) - d * (self.sd.ln() + 0.5 * (2.0 * std::f64::consts::PI).ln())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Atom {
    pub id: u64,
    pub jump: f64,
    pub location: Vec<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Truncation {
    /// All jumps above `level` were generated.
    Threshold { level: f64 },
    /// The `count` largest jumps were generated.
    Count { count: usize, smallest: f64 },
    /// Produced by combining realizations with different truncations.
    Composite,
}

/// Finite-support approximation of a completely random measure.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CrmRealization {
    pub params: NggParams,
    pub atoms: Vec<Atom>,
    pub truncation: Truncation,
}

impl CrmRealization {
    pub fn total_mass(&self) -> f64 {
        self.atoms.iter().map(|a| a.jump).sum()
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string(self).expect("realization serializes")
    }

    pub fn from_json(s: &str) -> Result<Self, serde_json::Error> {
        serde_json::from_str(s)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NrmAtom {
    pub id: u64,
    pub weight: f64,
    pub location: Vec<f64>,
}

/// Normalized realization: probability weights plus the total mass they were
/// normalized by.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NrmRealization {
    pub atoms: Vec<NrmAtom>,
    pub total_mass: f64,
}

impl NrmRealization {
    pub fn measure_of<F: Fn(&[f64]) -> bool>(&self, set: F) -> f64 {
        self.atoms.iter().filter(|a| set(&a.location)).map(|a| a.weight).sum()
    }
}

pub fn normalize(crm: &CrmRealization) -> Result<NrmRealization, LevyError> {
    let total = crm.total_mass();
    if !(total > 0.0) {
        return Err(LevyError::InvalidParameter(
            "cannot normalize a realization with zero total mass".into(),
        ));
    }
    Ok(NrmRealization {
        atoms: crm
            .atoms
            .iter()
            .map(|a| NrmAtom {
                id: a.id,
                weight: a.jump / total,
                location: a.location.clone(),
            })
            .collect(),
        total_mass: total,
    })
}

/// Solves unit tail(j) = e^{ln_target} for j. Newton steps in log j are kept
/// inside a bisection bracket that starts at [1e-300, upper] with `upper`
/// doubled until it brackets the root.
pub fn invert_unit_tail(a: f64, ln_target: f64, hint: Option<f64>) -> Result<f64, LevyError> {
    let f = |y: f64| -> Result<(f64, f64), LevyError> {
        let j = y.exp();
        let lt = ln_unit_tail(a, j)?;
        // d/dy ln tail(e^y) = -j rho(j) / tail(j)
        let slope = -(ln_unit_levy_density(a, j) + y - lt).exp();
        Ok((lt - ln_target, slope))
    };
    let mut lo = 1e-300f64.ln();
    let (g_lo, _) = f(lo)?;
    if g_lo < 0.0 {
        return Err(LevyError::Inversion(format!(
            "target tail e^{ln_target} exceeds the tail at 1e-300"
        )));
    }
    let mut hi = 1f64.ln();
    loop {
        let (g, _) = f(hi)?;
        if g <= 0.0 {
            break;
        }
        lo = hi;
        hi += std::f64::consts::LN_2;
        if hi > 800.0 {
            return Err(LevyError::Inversion("upper bracket overflow".into()));
        }
    }
    let mut y = match hint {
        Some(h) if h > 0.0 && h.ln() > lo && h.ln() < hi => h.ln(),
        _ => 0.5 * (lo + hi),
    };
    for _ in 0..400 {
        let (g, slope) = f(y)?;
        if g == 0.0 {
            return Ok(y.exp());
        }
        if g > 0.0 {
            lo = y;
        } else {
            hi = y;
        }
        let newton = y - g / slope;
        let next = if slope < 0.0 && newton > lo && newton < hi {
            newton
        } else {
            0.5 * (lo + hi)
        };
        if (next - y).abs() < 1e-14 * (1.0 + y.abs()) || hi - lo < 1e-15 * (1.0 + y.abs()) {
            return Ok(next.exp());
        }
        y = next;
    }
    Err(LevyError::Inversion("no convergence in 400 steps".into()))
}

/// Draw from the density proportional to s^{-1-a} e^{-s} on (c, inf).
pub fn sample_unit_jump_above<R: Rng + ?Sized>(a: f64, c: f64, rng: &mut R) -> f64 {
    if c >= 1.0 {
        loop {
            let e: f64 = Exp1.sample(rng);
            let s = c + e;
            if rng.random::<f64>() < (-(1.0 + a) * (s / c).ln()).exp() {
                return s;
            }
        }
    }
    // Envelope: e^{-c} s^{-1-a} on (c, 1) and e^{-s} on (1, inf).
    let eps = (-a * c.ln()).exp_m1();
    let mass_low = (-c).exp() * eps / a;
    let mass_high = (-1f64).exp();
    loop {
        if rng.random::<f64>() * (mass_low + mass_high) < mass_low {
            let v: f64 = rng.random();
            let s = (-(eps * (1.0 - v)).ln_1p() / a).exp();
            if rng.random::<f64>() < (c - s).exp() {
                return s;
            }
        } else {
            let e: f64 = Exp1.sample(rng);
            let s = 1.0 + e;
            if rng.random::<f64>() < (-(1.0 + a) * s.ln()).exp() {
                return s;
            }
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum JumpMethod {
    #[default]
    Rejection,
    InverseCdf,
}

/// Jumps of the intensity M rho(t) e^{-tilt t} above `level`, in no particular
/// order.
pub fn sample_tilted_jumps_above<R: Rng + ?Sized>(
    p: &NggParams,
    tilt: f64,
    level: f64,
    method: JumpMethod,
    rng: &mut R,
) -> Result<Vec<f64>, LevyError> {
    let rate = 1.0 + tilt;
    let expected = exp_tilted_tail(p, tilt, level)?;
    let count = if expected > 0.0 {
        Poisson::new(expected)
            .map_err(|e| LevyError::InvalidParameter(e.to_string()))?
            .sample(rng) as usize
    } else {
        0
    };
    let c = level * rate;
    let mut jumps = Vec::with_capacity(count);
    match method {
        JumpMethod::Rejection => {
            for _ in 0..count {
                jumps.push(sample_unit_jump_above(p.a, c, rng) / rate);
            }
        }
        JumpMethod::InverseCdf => {
            let ln_tail_c = ln_unit_tail(p.a, c)?;
            for _ in 0..count {
                let u: f64 = rng.random::<f64>();
                let s = invert_unit_tail(p.a, ln_tail_c + (1.0 - u).ln(), None)?;
                jumps.push(s.max(c) / rate);
            }
        }
    }
    Ok(jumps)
}

fn check_base(base: &dyn BaseMeasure) -> Result<(), LevyError> {
    if base.dim() == 0 {
        return Err(LevyError::InvalidParameter("base measure has dimension 0".into()));
    }
    Ok(())
}

/// All jumps above `level`: Poisson count, iid jumps, iid locations.
pub fn sample_crm_threshold<R: RngCore>(
    p: &NggParams,
    base: &dyn BaseMeasure,
    level: f64,
    rng: &mut R,
) -> Result<CrmRealization, LevyError> {
    sample_crm_threshold_with(p, base, level, JumpMethod::Rejection, rng)
}

pub fn sample_crm_threshold_with<R: RngCore>(
    p: &NggParams,
    base: &dyn BaseMeasure,
    level: f64,
    method: JumpMethod,
    rng: &mut R,
) -> Result<CrmRealization, LevyError> {
    check_pos("z", level)?;
    check_base(base)?;
    let jumps = sample_tilted_jumps_above(p, 0.0, level, method, rng)?;
    let atoms = jumps
        .into_iter()
        .map(|jump| Atom {
            id: rng.next_u64(),
            jump,
            location: base.sample(rng),
        })
        .collect();
    Ok(CrmRealization {
        params: *p,
        atoms,
        truncation: Truncation::Threshold { level },
    })
}

/// The `k_max` largest jumps in decreasing order, obtained by inverting the
/// tail mass at the arrival times of a unit-rate Poisson process.
pub fn sample_crm_decreasing<R: RngCore>(
    p: &NggParams,
    base: &dyn BaseMeasure,
    k_max: usize,
    rng: &mut R,
) -> Result<CrmRealization, LevyError> {
    check_base(base)?;
    if k_max == 0 {
        return Err(LevyError::InvalidParameter("k_max must be at least 1".into()));
    }
    let mut arrival = 0.0;
    let mut prev: Option<f64> = None;
    let mut atoms = Vec::with_capacity(k_max);
    for _ in 0..k_max {
        let e: f64 = Exp1.sample(rng);
        arrival += e;
        let j = invert_unit_tail(p.a, (arrival / p.mass).ln(), prev)?;
        if let Some(q) = prev {
            if !(j < q) {
                return Err(LevyError::Inversion(format!(
                    "non-decreasing jump sequence ({j} after {q})"
                )));
            }
        }
        prev = Some(j);
        atoms.push(Atom {
            id: rng.next_u64(),
            jump: j,
            location: base.sample(rng),
        });
    }
    Ok(CrmRealization {
        params: *p,
        truncation: Truncation::Count {
            count: k_max,
            smallest: prev.unwrap_or(0.0),
        },
        atoms,
    })
}

/// Expected mass of the jumps of M rho(t) e^{-tilt t} below `level`.
pub fn expected_mass_below(p: &NggParams, tilt: f64, level: f64) -> Result<f64, LevyError> {
    // int_0^L t M a/Gamma(1-a) t^{-1-a} e^{-(1+tilt) t} dt
    let rate = 1.0 + tilt;
    let a = p.a;
    let lower = statrs::function::gamma::gamma_lr(1.0 - a, level * rate);
    Ok(p.mass * a * rate.powf(a - 1.0) * lower)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::quadrature::{integrate_breakpoints, integrate_to_infinity, QuadOptions};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn rel(a: f64, b: f64) -> f64 {
        ((a - b) / b).abs()
    }

    #[test]
    fn exponent_values() {
        let p = NggParams::new(0.5, 2.0).unwrap();
        assert!(rel(laplace_exponent(&p, 3.0).unwrap(), 2.0) < 1e-15);
        assert_eq!(laplace_exponent(&p, 0.0).unwrap(), 0.0);
        assert!(rel(laplace_exponent_d1(&p, 0.0).unwrap(), 1.0) < 1e-15);
        assert!(laplace_exponent(&p, -1.0).is_err());
        assert!(NggParams::new(1.0, 1.0).is_err());
        assert!(NggParams::new(0.5, 0.0).is_err());
    }

    #[test]
    fn tail_mass_matches_quadrature() {
        for &(a, level) in &[(0.5, 1e-3), (0.3, 0.7), (0.7, 2.0), (0.5, 15.0)] {
            let p = NggParams::new(a, 1.7).unwrap();
            let q = integrate_to_infinity(
                |t| 1.7 * ln_unit_levy_density(a, t).exp(),
                level,
                QuadOptions::rel(1e-12),
            )
            .unwrap();
            assert!(rel(tail_mass(&p, level).unwrap(), q.value) < 1e-9, "a={a} L={level}");
        }
        let p = NggParams::new(0.5, 1.0).unwrap();
        assert!(tail_mass(&p, 200.0).unwrap() < 1e-12);
    }

    #[test]
    fn truncated_exponent_matches_quadrature_on_both_branches() {
        for &(a, v, level) in &[(0.5, 1.0, 1e-4), (0.3, 2.0, 0.1), (0.5, 0.7, 0.29), (0.7, 1.5, 3.0)] {
            let p = NggParams::new(a, 1.3).unwrap();
            let q = integrate_breakpoints(
                |t| 1.3 * (-(-v * t).exp_m1()) * ln_unit_levy_density(a, t).exp(),
                &[0.0, level],
                QuadOptions::rel(1e-12),
            )
            .unwrap();
            let got = truncated_exponent(&p, v, level).unwrap();
            assert!(rel(got, q.value) < 1e-9, "a={a} v={v} L={level}: {got} vs {}", q.value);
            let assembled = laplace_exponent(&p, v).unwrap()
                - (tail_mass(&p, level).unwrap() - exp_tilted_tail(&p, v, level).unwrap());
            assert!((got - assembled).abs() < 1e-9 * (1.0 + got.abs()));
        }
    }

    #[test]
    fn series_and_closed_form_agree_at_switch() {
        let p = NggParams::new(0.4, 1.0).unwrap();
        let v = 1.0;
        let below = truncated_exponent(&p, v, 0.25 - 1e-12).unwrap();
        let above = truncated_exponent(&p, v, 0.25 + 1e-12).unwrap();
        assert!(rel(below, above) < 1e-10);
    }

    #[test]
    fn decreasing_jumps_are_strictly_decreasing() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let p = NggParams::new(0.5, 1.0).unwrap();
        let crm = sample_crm_decreasing(&p, &UniformCube { dim: 1 }, 5, &mut rng).unwrap();
        assert_eq!(crm.atoms.len(), 5);
        for w in crm.atoms.windows(2) {
            assert!(w[0].jump > w[1].jump);
        }
    }

    #[test]
    fn inversion_round_trip() {
        for &a in &[0.1, 0.5, 0.9] {
            for &j in &[1e-8, 0.01, 1.0, 7.5] {
                let lt = ln_unit_tail(a, j).unwrap();
                let back = invert_unit_tail(a, lt, None).unwrap();
                assert!(rel(back, j) < 1e-10, "a={a} j={j} back={back}");
            }
        }
    }

    #[test]
    fn normalized_weights_sum_to_one() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let p = NggParams::new(0.5, 2.0).unwrap();
        let crm = sample_crm_threshold(&p, &UniformCube { dim: 2 }, 1e-3, &mut rng).unwrap();
        let nrm = normalize(&crm).unwrap();
        let s: f64 = nrm.atoms.iter().map(|a| a.weight).sum();
        assert!((s - 1.0).abs() < 1e-12);
    }

    #[test]
    fn json_round_trip_is_exact() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let p = NggParams::new(0.3, 1.5).unwrap();
        let crm = sample_crm_threshold(&p, &UniformCube { dim: 3 }, 1e-2, &mut rng).unwrap();
        let back = CrmRealization::from_json(&crm.to_json()).unwrap();
        assert_eq!(crm, back);
    }

    #[test]
    fn expected_mass_below_matches_quadrature() {
        let p = NggParams::new(0.5, 2.0).unwrap();
        let q = integrate_breakpoints(
            |t| t * 2.0 * ln_unit_levy_density(0.5, t).exp() * (-0.5 * t).exp(),
            &[0.0, 0.3],
            QuadOptions::rel(1e-12),
        )
        .unwrap();
        assert!(rel(expected_mass_below(&p, 0.5, 0.3).unwrap(), q.value) < 1e-9);
    }
}
