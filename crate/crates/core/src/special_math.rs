//! Log-domain arithmetic and the special functions used throughout the crate:
//! signed log-gamma, incomplete gamma functions for every real shape, rising
//! factorials and generalized Stirling numbers.

use std::cmp::Ordering;
use std::collections::HashMap;
use std::f64::consts::PI;
use std::fmt;
use std::ops::{Add, Div, Mul, Neg, Sub};
use std::sync::{Arc, Mutex, OnceLock, RwLock};

use serde::{Deserialize, Serialize};
use thiserror::Error;

const EULER_GAMMA: f64 = 0.577_215_664_901_532_9;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum MathError {
    #[error("{function}: argument out of domain ({detail})")]
    Domain { function: &'static str, detail: String },
    #[error("{function}: series did not converge after {iterations} iterations")]
    NoConvergence { function: &'static str, iterations: usize },
}

fn domain(function: &'static str, detail: impl Into<String>) -> MathError {
    MathError::Domain {
        function,
        detail: detail.into(),
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Sign {
    Negative,
    Zero,
    Positive,
}

impl Sign {
    pub fn as_f64(self) -> f64 {
        match self {
            Sign::Negative => -1.0,
            Sign::Zero => 0.0,
            Sign::Positive => 1.0,
        }
    }

    fn flip(self) -> Sign {
        match self {
            Sign::Negative => Sign::Positive,
            Sign::Zero => Sign::Zero,
            Sign::Positive => Sign::Negative,
        }
    }

    fn times(self, other: Sign) -> Sign {
        match (self, other) {
            (Sign::Zero, _) | (_, Sign::Zero) => Sign::Zero,
            (a, b) if a == b => Sign::Positive,
            _ => Sign::Negative,
        }
    }
}

/// A real number stored as sign and log-magnitude, so products and sums of
/// quantities spanning hundreds of orders of magnitude stay representable.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LogReal {
    log_magnitude: f64,
    sign: Sign,
}

impl LogReal {
    pub const ZERO: LogReal = LogReal {
        log_magnitude: f64::NEG_INFINITY,
        sign: Sign::Zero,
    };
    pub const ONE: LogReal = LogReal {
        log_magnitude: 0.0,
        sign: Sign::Positive,
    };

    pub fn new(sign: Sign, log_magnitude: f64) -> Self {
        if sign == Sign::Zero || log_magnitude == f64::NEG_INFINITY {
            Self::ZERO
        } else {
            LogReal { log_magnitude, sign }
        }
    }

    /// Positive number with the given natural logarithm.
    pub fn from_ln(ln: f64) -> Self {
        Self::new(Sign::Positive, ln)
    }

    pub fn from_f64(x: f64) -> Self {
        match x.partial_cmp(&0.0) {
            Some(Ordering::Greater) => Self::new(Sign::Positive, x.ln()),
            Some(Ordering::Less) => Self::new(Sign::Negative, (-x).ln()),
            _ => Self::ZERO,
        }
    }

    pub fn sign(&self) -> Sign {
        self.sign
    }

    pub fn ln_abs(&self) -> f64 {
        self.log_magnitude
    }

    pub fn is_zero(&self) -> bool {
        self.sign == Sign::Zero
    }

    pub fn to_f64(&self) -> f64 {
        self.sign.as_f64() * self.log_magnitude.exp()
    }

    pub fn abs(&self) -> Self {
        if self.is_zero() {
            *self
        } else {
            Self::from_ln(self.log_magnitude)
        }
    }

    pub fn powf(&self, p: f64) -> Self {
        match self.sign {
            Sign::Zero if p > 0.0 => Self::ZERO,
            Sign::Zero => Self::from_ln(f64::INFINITY),
            _ => Self::new(self.sign, self.log_magnitude * p),
        }
    }

    pub fn recip(&self) -> Self {
        Self::new(self.sign, -self.log_magnitude)
    }
}

impl fmt::Display for LogReal {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self.sign {
            Sign::Zero => write!(f, "0"),
            Sign::Positive => write!(f, "exp({})", self.log_magnitude),
            Sign::Negative => write!(f, "-exp({})", self.log_magnitude),
        }
    }
}

#[allow(clippy::suspicious_arithmetic_impl)]
impl Mul for LogReal {
    type Output = LogReal;
    fn mul(self, rhs: LogReal) -> LogReal {
        LogReal::new(self.sign.times(rhs.sign), self.log_magnitude + rhs.log_magnitude)
    }
}

#[allow(clippy::suspicious_arithmetic_impl)]
impl Div for LogReal {
    type Output = LogReal;
    fn div(self, rhs: LogReal) -> LogReal {
        self * rhs.recip()
    }
}

impl Neg for LogReal {
    type Output = LogReal;
    fn neg(self) -> LogReal {
        LogReal::new(self.sign.flip(), self.log_magnitude)
    }
}

impl Add for LogReal {
    type Output = LogReal;
    fn add(self, rhs: LogReal) -> LogReal {
        if self.is_zero() {
            return rhs;
        }
        if rhs.is_zero() {
            return self;
        }
        let (big, small) = if self.log_magnitude >= rhs.log_magnitude {
            (self, rhs)
        } else {
            (rhs, self)
        };
        let ratio = (small.log_magnitude - big.log_magnitude).exp();
        if big.sign == small.sign {
            LogReal::new(big.sign, big.log_magnitude + ratio.ln_1p())
        } else if ratio == 1.0 {
            LogReal::ZERO
        } else {
            LogReal::new(big.sign, big.log_magnitude + (-ratio).ln_1p())
        }
    }
}

impl Sub for LogReal {
    type Output = LogReal;
    fn sub(self, rhs: LogReal) -> LogReal {
        self + (-rhs)
    }
}

impl std::iter::Sum for LogReal {
    fn sum<I: Iterator<Item = LogReal>>(iter: I) -> LogReal {
        iter.fold(LogReal::ZERO, |acc, x| acc + x)
    }
}

impl std::iter::Product for LogReal {
    fn product<I: Iterator<Item = LogReal>>(iter: I) -> LogReal {
        iter.fold(LogReal::ONE, |acc, x| acc * x)
    }
}

/// ln(sum exp(x_i)), robust to infinities.
pub fn log_sum_exp(xs: &[f64]) -> f64 {
    let max = xs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if max.is_infinite() {
        return max;
    }
    max + xs.iter().map(|x| (x - max).exp()).sum::<f64>().ln()
}

/// ln(exp(a) + exp(b)).
pub fn log_add_exp(a: f64, b: f64) -> f64 {
    let (hi, lo) = if a >= b { (a, b) } else { (b, a) };
    if lo == f64::NEG_INFINITY {
        return hi;
    }
    hi + (lo - hi).exp().ln_1p()
}

pub fn ln_gamma(x: f64) -> f64 {
    ln_gamma_signed(x).0
}

/// ln|Gamma(x)| together with the sign of Gamma(x), for every real x that is
/// not a pole.
pub fn ln_gamma_signed(x: f64) -> (f64, f64) {
    if x > 0.0 {
        return (statrs::function::gamma::ln_gamma(x), 1.0);
    }
    if x == x.floor() {
        return (f64::INFINITY, f64::NAN);
    }
    // Gamma(x) Gamma(1 - x) = pi / sin(pi x)
    let s = (PI * x).sin();
    let ln = PI.ln() - s.abs().ln() - statrs::function::gamma::ln_gamma(1.0 - x);
    (ln, s.signum())
}

pub fn gamma(x: f64) -> f64 {
    if x > 0.0 {
        return statrs::function::gamma::gamma(x);
    }
    let (ln, sign) = ln_gamma_signed(x);
    sign * ln.exp()
}

/// ln C(n, k).
pub fn ln_binomial(n: u64, k: u64) -> f64 {
    debug_assert!(k <= n);
    ln_gamma(n as f64 + 1.0) - ln_gamma(k as f64 + 1.0) - ln_gamma((n - k) as f64 + 1.0)
}

/// Exponential integral E1(z) for 0 < z < 1 by its convergent series.
fn exp_integral_e1_small(z: f64) -> f64 {
    let mut sum = 0.0;
    let mut term = 1.0;
    for k in 1..200 {
        let kf = k as f64;
        term *= -z / kf;
        let add = term / kf;
        sum += add;
        if add.abs() < 1e-17 * sum.abs().max(1e-300) {
            break;
        }
    }
    -EULER_GAMMA - z.ln() - sum
}

/// ln Gamma(x, z) by the modified Lentz continued fraction; converges for any
/// real x once z >= max(1, x + 1).
fn ln_upper_gamma_cf(x: f64, z: f64) -> Result<f64, MathError> {
    const TINY: f64 = 1e-300;
    let mut b = z + 1.0 - x;
    let mut c = 1.0 / TINY;
    let mut d = 1.0 / b;
    let mut h = d;
    for i in 1..10_000 {
        let an = -(i as f64) * (i as f64 - x);
        b += 2.0;
        d = an * d + b;
        if d.abs() < TINY {
            d = TINY;
        }
        c = b + an / c;
        if c.abs() < TINY {
            c = TINY;
        }
        d = 1.0 / d;
        let delta = d * c;
        h *= delta;
        if (delta - 1.0).abs() < 1e-16 {
            return Ok(-z + x * z.ln() + h.ln());
        }
    }
    Err(MathError::NoConvergence {
        function: "upper_gamma",
        iterations: 10_000,
    })
}

/// Lower incomplete gamma gamma(x, z) for x > 0 by the power series.
fn lower_gamma_series(x: f64, z: f64) -> Result<f64, MathError> {
    let mut ap = x;
    let mut del = 1.0 / x;
    let mut sum = del;
    for _ in 0..10_000 {
        ap += 1.0;
        del *= z / ap;
        sum += del;
        if del.abs() < sum.abs() * 1e-17 {
            return Ok(sum * (-z + x * z.ln()).exp());
        }
    }
    Err(MathError::NoConvergence {
        function: "lower_gamma",
        iterations: 10_000,
    })
}

/// ln Gamma(x, z) = ln int_z^inf t^{x-1} e^{-t} dt for any real x and z > 0
/// (z = 0 is allowed when x > 0). The integral is always positive.
pub fn ln_upper_gamma(x: f64, z: f64) -> Result<f64, MathError> {
    if !(x.is_finite() && z.is_finite()) || z < 0.0 {
        return Err(domain("upper_gamma", format!("x={x}, z={z}")));
    }
    if z == 0.0 {
        if x > 0.0 {
            return Ok(ln_gamma(x));
        }
        return Err(domain("upper_gamma", format!("diverges at z=0 for x={x}")));
    }
    if z >= 1.0 && z >= x + 1.0 {
        return ln_upper_gamma_cf(x, z);
    }
    if x > 0.0 {
        let g = statrs::function::gamma::gamma(x);
        if g.is_finite() {
            return Ok((g - lower_gamma_series(x, z)?).ln());
        }
        let p = statrs::function::gamma::gamma_lr(x, z);
        return Ok(ln_gamma(x) + (-p).ln_1p());
    }
    // x <= 0 and z < 1: recurse down from a shape in [0, 1)
    let steps = (-x).floor() as i64 + if x == x.floor() { 0 } else { 1 };
    let top = x + steps as f64;
    let mut value = if top == 0.0 {
        exp_integral_e1_small(z)
    } else {
        statrs::function::gamma::gamma(top) - lower_gamma_series(top, z)?
    };
    let ln_z = z.ln();
    let mut s = top;
    for _ in 0..steps {
        s -= 1.0;
        value = (value - (s * ln_z - z).exp()) / s;
    }
    if value <= 0.0 {
        return Err(domain("upper_gamma", format!("lost all precision at x={x}, z={z}")));
    }
    Ok(value.ln())
}

pub fn upper_gamma(x: f64, z: f64) -> Result<f64, MathError> {
    ln_upper_gamma(x, z).map(f64::exp)
}

/// Regularized upper incomplete gamma Q(x, z) = Gamma(x, z)/Gamma(x), for any
/// real x that is not a non-positive integer. Negative for x in (-1, 0).
pub fn reg_inc_gamma_q(x: f64, z: f64) -> Result<f64, MathError> {
    if !(x.is_finite() && z.is_finite()) || z < 0.0 {
        return Err(domain("reg_inc_gamma_q", format!("x={x}, z={z}")));
    }
    if x <= 0.0 && x == x.floor() {
        return Err(domain("reg_inc_gamma_q", format!("pole of Gamma at x={x}")));
    }
    if x > 0.0 {
        return statrs::function::gamma::checked_gamma_ur(x, z).map_err(|e| domain("reg_inc_gamma_q", e.to_string()));
    }
    if z == 0.0 {
        return Err(domain("reg_inc_gamma_q", "z=0 with negative shape"));
    }
    if z < 1.0 {
        // Q(x, z) = Q(x + 1, z) - z^x e^{-z} / Gamma(x + 1)
        let q_next = reg_inc_gamma_q(x + 1.0, z)?;
        let (lg, sg) = ln_gamma_signed(x + 1.0);
        return Ok(q_next - sg * (x * z.ln() - z - lg).exp());
    }
    let (lg, sg) = ln_gamma_signed(x);
    Ok(sg * (ln_upper_gamma(x, z)? - lg).exp())
}

/// Rising factorial (x)_n = x (x+1) ... (x+n-1) in the log domain; exact sign
/// and zero handling for any real x.
pub fn rising_factorial(x: f64, n: u64) -> LogReal {
    if n == 0 {
        return LogReal::ONE;
    }
    if x > 0.0 && n > 32 {
        return LogReal::from_ln(ln_gamma(x + n as f64) - ln_gamma(x));
    }
    let mut ln = 0.0;
    let mut negative = false;
    for i in 0..n {
        let f = x + i as f64;
        if f == 0.0 {
            return LogReal::ZERO;
        }
        if f < 0.0 {
            negative = !negative;
        }
        ln += f.abs().ln();
    }
    LogReal::new(if negative { Sign::Negative } else { Sign::Positive }, ln)
}

/// Table of ln S^N_{k,a}, the generalized Stirling numbers defined by
/// S^{N+1}_k = S^N_{k-1} + (N - k a) S^N_k with S^0_0 = 1. Rows are appended on
/// demand; concurrent readers share the table and growth is serialized.
#[derive(Debug)]
pub struct StirlingTable {
    a: f64,
    rows: RwLock<Vec<Vec<f64>>>,
}

impl StirlingTable {
    pub fn new(a: f64) -> Result<Self, MathError> {
        if !(a > 0.0 && a < 1.0) {
            return Err(domain("generalized_stirling", format!("a={a} not in (0,1)")));
        }
        Ok(StirlingTable {
            a,
            rows: RwLock::new(vec![vec![0.0]]),
        })
    }

    pub fn a(&self) -> f64 {
        self.a
    }

    /// ln S^n_{k,a}; negative infinity where the number is zero.
    pub fn ln_value(&self, n: usize, k: usize) -> f64 {
        if k > n {
            return f64::NEG_INFINITY;
        }
        {
            let rows = self.rows.read().expect("stirling table lock poisoned");
            if let Some(row) = rows.get(n) {
                return row[k];
            }
        }
        let mut rows = self.rows.write().expect("stirling table lock poisoned");
        while rows.len() <= n {
            let m = rows.len() - 1;
            let prev = &rows[m];
            let mut next = vec![f64::NEG_INFINITY; m + 2];
            for (j, slot) in next.iter_mut().enumerate() {
                let from_new = if j >= 1 { prev[j - 1] } else { f64::NEG_INFINITY };
                let from_old = if j <= m {
                    let coef = m as f64 - j as f64 * self.a;
                    if coef > 0.0 {
                        prev[j] + coef.ln()
                    } else {
                        f64::NEG_INFINITY
                    }
                } else {
                    f64::NEG_INFINITY
                };
                *slot = log_add_exp(from_new, from_old);
            }
            rows.push(next);
        }
        rows[n][k]
    }

    pub fn value(&self, n: usize, k: usize) -> LogReal {
        LogReal::from_ln(self.ln_value(n, k))
    }
}

fn stirling_cache() -> &'static Mutex<HashMap<u64, Arc<StirlingTable>>> {
    static CACHE: OnceLock<Mutex<HashMap<u64, Arc<StirlingTable>>>> = OnceLock::new();
    CACHE.get_or_init(|| Mutex::new(HashMap::new()))
}

/// Shared Stirling table for the given a.
pub fn stirling_table(a: f64) -> Result<Arc<StirlingTable>, MathError> {
    let mut cache = stirling_cache().lock().expect("stirling cache poisoned");
    if let Some(t) = cache.get(&a.to_bits()) {
        return Ok(Arc::clone(t));
    }
    let t = Arc::new(StirlingTable::new(a)?);
    cache.insert(a.to_bits(), Arc::clone(&t));
    Ok(t)
}

pub fn generalized_stirling(n: usize, k: usize, a: f64) -> Result<LogReal, MathError> {
    Ok(stirling_table(a)?.value(n, k))
}
