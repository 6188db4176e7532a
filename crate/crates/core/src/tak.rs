//! The normalizing integrals
//! T^{N,K}_{a,M} = int_M^inf (1 - (M/t)^{1/a})^{N-1} t^{K-1} e^{-t} dt
//! by quadrature, by finite series, and by recursion tables whose cells carry
//! a propagated error bound and fall back to quadrature when it grows.

use std::collections::HashMap;
use std::fmt;
use std::str::FromStr;
use std::sync::Mutex;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::quadrature::{integrate_breakpoints, QuadOptions, QuadratureError};
use crate::special_math::{ln_binomial, ln_upper_gamma, rising_factorial, LogReal, MathError, Sign};

#[derive(Debug, Clone, PartialEq, Error)]
pub enum TakError {
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
    #[error(transparent)]
    Math(#[from] MathError),
    #[error(transparent)]
    Quadrature(#[from] QuadratureError),
    #[error("series cancellation ratio {ratio:e} exceeds the limit {limit:e}")]
    Cancellation { ratio: f64, limit: f64 },
    #[error("table invariant violated at (N={n}, K={k}): {detail}")]
    Invariant { n: usize, k: usize, detail: String },
    #[error("malformed table CSV at line {line}: {detail}")]
    Csv { line: usize, detail: String },
}

fn validate(n: usize, k: usize, a: f64, mass: f64) -> Result<(), TakError> {
    if n == 0 || k == 0 {
        return Err(TakError::InvalidArgument(format!("N={n} and K={k} must be >= 1")));
    }
    if !(a > 0.0 && a < 1.0) {
        return Err(TakError::InvalidArgument(format!("a={a} not in (0,1)")));
    }
    if !(mass > 0.0 && mass.is_finite()) {
        return Err(TakError::InvalidArgument(format!("M={mass} must be positive")));
    }
    Ok(())
}

/// Location of the largest value of `f` on a log-spaced grid over
/// [lo_offset, hi_offset] shifted by `origin`.
fn grid_peak<F: Fn(f64) -> f64>(f: &F, origin: f64, lo_offset: f64, hi_offset: f64) -> (f64, f64) {
    let steps = 400;
    let (l0, l1) = (lo_offset.ln(), hi_offset.ln());
    let mut best = (origin + lo_offset, f64::NEG_INFINITY);
    for i in 0..=steps {
        let x = origin + (l0 + (l1 - l0) * i as f64 / steps as f64).exp();
        let v = f(x);
        if v > best.1 {
            best = (x, v);
        }
    }
    best
}

fn scaled_integral<F: Fn(f64) -> f64>(
    ln_f: F,
    lo: f64,
    peak: f64,
    width: f64,
    opts: QuadOptions,
) -> Result<f64, TakError> {
    let (t_peak, ln_peak) = (peak, ln_f(peak));
    let mut points = vec![lo];
    if t_peak > lo {
        points.push(t_peak);
    }
    points.push(t_peak + width);
    points.push(f64::INFINITY);
    let r = integrate_breakpoints(
        |t| {
            let v = ln_f(t);
            if v == f64::NEG_INFINITY {
                0.0
            } else {
                (v - ln_peak).exp()
            }
        },
        &points,
        opts,
    )?;
    Ok(ln_peak + r.value.ln())
}

/// ln T^{N,K} by adaptive quadrature of the defining integral over t.
pub fn ln_tak_quadrature(n: usize, k: usize, a: f64, mass: f64) -> Result<f64, TakError> {
    validate(n, k, a, mass)?;
    let nm1 = (n - 1) as f64;
    let km1 = (k - 1) as f64;
    let ln_f = move |t: f64| -> f64 {
        let r = (mass / t).ln() / a;
        let head = if n == 1 { 0.0 } else { nm1 * (-r.exp_m1()).ln() };
        head + km1 * t.ln() - t
    };
    let upper = mass * (n as f64).powf(a) * 10.0 + 2.0 * k as f64 + 60.0;
    let (peak, _) = grid_peak(&ln_f, mass, mass * 1e-10 + 1e-300, upper);
    let width = 5.0 * (1.0 + peak.sqrt());
    scaled_integral(ln_f, mass, peak, width, QuadOptions::rel(1e-13))
}

/// ln T^{N,K} through the representation
/// a M^K int_0^inf u^{N-1} (1+u)^{K a - N} e^{-M (1+u)^a} du,
/// an independent integral used to cross-check the direct one.
pub fn ln_tak_quadrature_latent(n: usize, k: usize, a: f64, mass: f64) -> Result<f64, TakError> {
    validate(n, k, a, mass)?;
    let nm1 = (n - 1) as f64;
    let expo = k as f64 * a - n as f64;
    let ln_f = move |u: f64| -> f64 {
        let l1 = u.ln_1p();
        let head = if n == 1 { 0.0 } else { nm1 * u.ln() };
        head + expo * l1 - mass * (a * l1).exp_m1()
    };
    let (peak, _) = grid_peak(&ln_f, 0.0, 1e-30, 1e6);
    let width = 5.0 * (1.0 + peak);
    let ln_int = scaled_integral(ln_f, 0.0, peak, width, QuadOptions::rel(1e-13))?;
    Ok(a.ln() + k as f64 * mass.ln() - mass + ln_int)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SeriesValue {
    pub value: LogReal,
    /// Largest |term| divided by |sum|; digits lost to cancellation.
    pub cancellation: f64,
}

/// Default limit on the cancellation ratio before a series is abandoned.
pub const CANCELLATION_LIMIT: f64 = 1e12;
/// Largest N for which the series are attempted.
pub const SERIES_MAX_N: usize = 60;

fn finish_series(terms: &[LogReal]) -> Result<SeriesValue, TakError> {
    let sum: LogReal = terms.iter().copied().sum();
    let biggest = terms.iter().map(|t| t.ln_abs()).fold(f64::NEG_INFINITY, f64::max);
    if sum.sign() != Sign::Positive {
        return Err(TakError::Cancellation {
            ratio: f64::INFINITY,
            limit: CANCELLATION_LIMIT,
        });
    }
    let cancellation = (biggest - sum.ln_abs()).exp();
    if cancellation > CANCELLATION_LIMIT {
        return Err(TakError::Cancellation {
            ratio: cancellation,
            limit: CANCELLATION_LIMIT,
        });
    }
    Ok(SeriesValue {
        value: sum,
        cancellation,
    })
}

/// Binomial expansion of the integrand:
/// sum_n C(N-1, n) (-M^{1/a})^n Gamma(K - n/a, M).
pub fn tak_series_binomial(n: usize, k: usize, a: f64, mass: f64) -> Result<SeriesValue, TakError> {
    validate(n, k, a, mass)?;
    if n > SERIES_MAX_N {
        return Err(TakError::Cancellation {
            ratio: f64::INFINITY,
            limit: CANCELLATION_LIMIT,
        });
    }
    let ln_m = mass.ln();
    let terms: Vec<LogReal> = (0..n)
        .map(|j| {
            let x = k as f64 - j as f64 / a;
            let ln = ln_binomial((n - 1) as u64, j as u64) + j as f64 / a * ln_m + ln_upper_gamma(x, mass)?;
            let sign = if j % 2 == 0 { Sign::Positive } else { Sign::Negative };
            Ok(LogReal::new(sign, ln))
        })
        .collect::<Result<_, TakError>>()?;
    finish_series(&terms)
}

/// Reduced series
/// sum_n C(N-1, n) (-M^{1/a})^n (1 - n/a)_{K-1} Gamma(1 - n/a, M).
/// The reduction is exact only for K <= N; other cells use the binomial form.
pub fn tak_series(n: usize, k: usize, a: f64, mass: f64) -> Result<SeriesValue, TakError> {
    validate(n, k, a, mass)?;
    if n == 1 {
        return Ok(SeriesValue {
            value: LogReal::from_ln(ln_upper_gamma(k as f64, mass)?),
            cancellation: 1.0,
        });
    }
    if k > n {
        return tak_series_binomial(n, k, a, mass);
    }
    if n > SERIES_MAX_N {
        return Err(TakError::Cancellation {
            ratio: f64::INFINITY,
            limit: CANCELLATION_LIMIT,
        });
    }
    let ln_m = mass.ln();
    let terms: Vec<LogReal> = (0..n)
        .map(|j| {
            let x = j as f64 / a;
            let poch = rising_factorial(1.0 - x, (k - 1) as u64);
            if poch.is_zero() {
                return Ok(LogReal::ZERO);
            }
            let ln = ln_binomial((n - 1) as u64, j as u64) + x * ln_m + ln_upper_gamma(1.0 - x, mass)?;
            let sign = if j % 2 == 0 { Sign::Positive } else { Sign::Negative };
            Ok(LogReal::new(sign, ln) * poch)
        })
        .collect::<Result<_, TakError>>()?;
    finish_series(&terms)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TakMethod {
    Gamma,
    Series,
    Quadrature,
    Recursion,
}

impl fmt::Display for TakMethod {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            TakMethod::Gamma => "gamma",
            TakMethod::Series => "series",
            TakMethod::Quadrature => "quadrature",
            TakMethod::Recursion => "recursion",
        };
        f.write_str(s)
    }
}

impl FromStr for TakMethod {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "gamma" => Ok(TakMethod::Gamma),
            "series" => Ok(TakMethod::Series),
            "quadrature" => Ok(TakMethod::Quadrature),
            "recursion" => Ok(TakMethod::Recursion),
            other => Err(format!("unknown method '{other}'")),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TakCell {
    pub ln_value: f64,
    pub method: TakMethod,
    /// Bound on the relative error of the stored value.
    pub rel_error: f64,
}

#[derive(Debug, Clone, Copy)]
pub struct TableOptions {
    /// Cells whose propagated error bound exceeds this are recomputed by
    /// quadrature.
    pub reseed_tolerance: f64,
}

impl Default for TableOptions {
    fn default() -> Self {
        TableOptions { reseed_tolerance: 1e-9 }
    }
}

const QUADRATURE_REL_ERROR: f64 = 1e-12;
const ROUNDING: f64 = 2.3e-16;
/// Relative accuracy of a single series term, dominated by log-gamma at large
/// arguments.
const SERIES_TERM_ERROR: f64 = 1e-13;

/// Dense table of T^{N,K} for 1 <= N <= n_max, 1 <= K <= k_max.
#[derive(Debug, Clone, PartialEq)]
pub struct TakTable {
    pub a: f64,
    pub mass: f64,
    pub n_max: usize,
    pub k_max: usize,
    cells: Vec<TakCell>,
}

/// If a = 1/R for an integer R > 1, returns R.
pub fn reciprocal_integer(a: f64) -> Option<usize> {
    let r = (1.0 / a).round();
    if r > 1.0 && (a * r - 1.0).abs() < 1e-12 {
        Some(r as usize)
    } else {
        None
    }
}

fn seed_cell(n: usize, k: usize, a: f64, mass: f64, tol: f64) -> Result<TakCell, TakError> {
    if n == 1 {
        return Ok(TakCell {
            ln_value: ln_upper_gamma(k as f64, mass)?,
            method: TakMethod::Gamma,
            rel_error: 1e-14,
        });
    }
    if let Ok(s) = tak_series(n, k, a, mass) {
        let err = s.cancellation * SERIES_TERM_ERROR;
        if err < tol {
            return Ok(TakCell {
                ln_value: s.value.ln_abs(),
                method: TakMethod::Series,
                rel_error: err,
            });
        }
    }
    quadrature_cell(n, k, a, mass)
}

fn quadrature_cell(n: usize, k: usize, a: f64, mass: f64) -> Result<TakCell, TakError> {
    Ok(TakCell {
        ln_value: ln_tak_quadrature(n, k, a, mass)?,
        method: TakMethod::Quadrature,
        rel_error: QUADRATURE_REL_ERROR,
    })
}

impl TakTable {
    fn index(&self, n: usize, k: usize) -> usize {
        (n - 1) * self.k_max + (k - 1)
    }

    pub fn cell(&self, n: usize, k: usize) -> Option<&TakCell> {
        if n == 0 || k == 0 || n > self.n_max || k > self.k_max {
            return None;
        }
        Some(&self.cells[self.index(n, k)])
    }

    pub fn ln_value(&self, n: usize, k: usize) -> Option<f64> {
        self.cell(n, k).map(|c| c.ln_value)
    }

    pub fn value(&self, n: usize, k: usize) -> Option<LogReal> {
        self.ln_value(n, k).map(LogReal::from_ln)
    }

    pub fn cells(&self) -> impl Iterator<Item = (usize, usize, &TakCell)> {
        self.cells
            .iter()
            .enumerate()
            .map(move |(i, c)| (i / self.k_max + 1, i % self.k_max + 1, c))
    }

    /// Fills the table by recursion. When 1/a is an integer R the table
    /// marches in N using T^{N+1,K} = T^{N,K} - M^R T^{N,K-R}; otherwise it
    /// marches in K using
    /// T^{N,K+1} = K T^{N,K} + ((N-1)/a) (T^{N-1,K} - T^{N,K}).
    pub fn fill(a: f64, mass: f64, n_max: usize, k_max: usize, opts: TableOptions) -> Result<TakTable, TakError> {
        validate(n_max.max(1), k_max.max(1), a, mass)?;
        if n_max == 0 || k_max == 0 {
            return Err(TakError::InvalidArgument("table dimensions must be >= 1".into()));
        }
        let placeholder = TakCell {
            ln_value: f64::NAN,
            method: TakMethod::Quadrature,
            rel_error: f64::NAN,
        };
        let mut table = TakTable {
            a,
            mass,
            n_max,
            k_max,
            cells: vec![placeholder; n_max * k_max],
        };
        match reciprocal_integer(a) {
            Some(r) => table.fill_by_rows(r, opts)?,
            None => table.fill_by_columns(opts)?,
        }
        table.check_invariants()?;
        Ok(table)
    }

    fn set(&mut self, n: usize, k: usize, cell: TakCell) {
        let i = self.index(n, k);
        self.cells[i] = cell;
    }

    fn fill_by_columns(&mut self, opts: TableOptions) -> Result<(), TakError> {
        let (a, mass) = (self.a, self.mass);
        for n in 1..=self.n_max {
            let first = seed_cell(n, 1, a, mass, opts.reseed_tolerance)?;
            self.set(n, 1, first);
            for k in 1..self.k_max {
                if n == 1 {
                    let c = seed_cell(1, k + 1, a, mass, opts.reseed_tolerance)?;
                    self.set(1, k + 1, c);
                    continue;
                }
                let here = *self.cell(n, k).expect("filled");
                let below = *self.cell(n - 1, k).expect("filled");
                let (t, tp) = (here.ln_value.exp(), below.ln_value.exp());
                let c = (n - 1) as f64 / a;
                let kf = k as f64;
                let value = kf * t + c * (tp - t);
                let abs_err = kf * t * here.rel_error
                    + c * (tp * below.rel_error + t * here.rel_error)
                    + 4.0 * ROUNDING * (kf * t + c * tp + c * t);
                let rel = abs_err / value;
                let cell = if value > 0.0 && value.is_finite() && rel < opts.reseed_tolerance {
                    TakCell {
                        ln_value: value.ln(),
                        method: TakMethod::Recursion,
                        rel_error: rel,
                    }
                } else {
                    quadrature_cell(n, k + 1, a, mass)?
                };
                self.set(n, k + 1, cell);
            }
        }
        Ok(())
    }

    fn fill_by_rows(&mut self, r: usize, opts: TableOptions) -> Result<(), TakError> {
        let (a, mass) = (self.a, self.mass);
        let ln_mr = r as f64 * mass.ln();
        for k in 1..=self.k_max {
            let c = seed_cell(1, k, a, mass, opts.reseed_tolerance)?;
            self.set(1, k, c);
        }
        for n in 1..self.n_max {
            for k in 1..=self.k_max {
                let cell = if k <= r {
                    seed_cell(n + 1, k, a, mass, opts.reseed_tolerance)?
                } else {
                    let here = *self.cell(n, k).expect("filled");
                    let back = *self.cell(n, k - r).expect("filled");
                    let t = here.ln_value.exp();
                    let tb = (back.ln_value + ln_mr).exp();
                    let value = t - tb;
                    let abs_err = t * here.rel_error + tb * back.rel_error + 2.0 * ROUNDING * (t + tb);
                    let rel = abs_err / value;
                    if value > 0.0 && value.is_finite() && rel < opts.reseed_tolerance {
                        TakCell {
                            ln_value: value.ln(),
                            method: TakMethod::Recursion,
                            rel_error: rel,
                        }
                    } else {
                        quadrature_cell(n + 1, k, a, mass)?
                    }
                };
                self.set(n + 1, k, cell);
            }
        }
        Ok(())
    }

    /// T^{N,K} <= Gamma(K, M) and strictly decreasing in N.
    pub fn check_invariants(&self) -> Result<(), TakError> {
        for (n, k, c) in self.cells() {
            if !c.ln_value.is_finite() {
                return Err(TakError::Invariant {
                    n,
                    k,
                    detail: "non-finite value".into(),
                });
            }
            let bound = ln_upper_gamma(k as f64, self.mass)?;
            if c.ln_value > bound + 1e-10 {
                return Err(TakError::Invariant {
                    n,
                    k,
                    detail: format!("ln T = {} exceeds ln Gamma(K, M) = {bound}", c.ln_value),
                });
            }
            if n > 1 {
                let prev = self.cells[self.index(n - 1, k)].ln_value;
                if c.ln_value >= prev {
                    return Err(TakError::Invariant {
                        n,
                        k,
                        detail: "not decreasing in N".into(),
                    });
                }
            }
        }
        Ok(())
    }

    /// CSV with header `N,K,log_value,method`.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("N,K,log_value,method\n");
        for (n, k, c) in self.cells() {
            out.push_str(&format!("{n},{k},{},{}\n", c.ln_value, c.method));
        }
        out
    }

    pub fn from_csv(text: &str, a: f64, mass: f64) -> Result<TakTable, TakError> {
        let mut rows = Vec::new();
        for (i, line) in text.lines().enumerate() {
            let line = line.trim();
            if i == 0 || line.is_empty() || line.starts_with('#') {
                continue;
            }
            let err = |detail: String| TakError::Csv { line: i + 1, detail };
            let f: Vec<&str> = line.split(',').collect();
            if f.len() != 4 {
                return Err(err(format!("expected 4 fields, found {}", f.len())));
            }
            let n: usize = f[0].parse().map_err(|e| err(format!("N: {e}")))?;
            let k: usize = f[1].parse().map_err(|e| err(format!("K: {e}")))?;
            let v: f64 = f[2].parse().map_err(|e| err(format!("log_value: {e}")))?;
            let m: TakMethod = f[3].parse().map_err(err)?;
            rows.push((n, k, v, m));
        }
        let n_max = rows.iter().map(|r| r.0).max().unwrap_or(0);
        let k_max = rows.iter().map(|r| r.1).max().unwrap_or(0);
        if n_max == 0 || k_max == 0 || rows.len() != n_max * k_max {
            return Err(TakError::Csv {
                line: 0,
                detail: "table is not a full N x K grid".into(),
            });
        }
        let mut table = TakTable {
            a,
            mass,
            n_max,
            k_max,
            cells: vec![
                TakCell {
                    ln_value: f64::NAN,
                    method: TakMethod::Quadrature,
                    rel_error: f64::NAN,
                };
                n_max * k_max
            ],
        };
        for (n, k, v, m) in rows {
            if n == 0 || k == 0 {
                return Err(TakError::Csv {
                    line: 0,
                    detail: "indices start at 1".into(),
                });
            }
            table.set(
                n,
                k,
                TakCell {
                    ln_value: v,
                    method: m,
                    rel_error: f64::NAN,
                },
            );
        }
        Ok(table)
    }
}

/// Memoized T^{N,K} for fixed (a, M), computed on demand by quadrature.
#[derive(Debug)]
pub struct TakCache {
    a: f64,
    mass: f64,
    memo: Mutex<HashMap<(usize, usize), f64>>,
}

impl TakCache {
    pub fn new(a: f64, mass: f64) -> Result<Self, TakError> {
        validate(1, 1, a, mass)?;
        Ok(TakCache {
            a,
            mass,
            memo: Mutex::new(HashMap::new()),
        })
    }

    pub fn a(&self) -> f64 {
        self.a
    }

    pub fn mass(&self) -> f64 {
        self.mass
    }

    pub fn ln_value(&self, n: usize, k: usize) -> Result<f64, TakError> {
        if let Some(v) = self.memo.lock().expect("tak memo poisoned").get(&(n, k)) {
            return Ok(*v);
        }
        let v = if n == 1 {
            ln_upper_gamma(k as f64, self.mass)?
        } else {
            ln_tak_quadrature(n, k, self.a, self.mass)?
        };
        self.memo.lock().expect("tak memo poisoned").insert((n, k), v);
        Ok(v)
    }
}
