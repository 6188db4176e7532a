//! One-dimensional samplers for log-concave densities on the real line:
//! adaptive rejection sampling with tangent envelopes, a safeguarded Newton
//! mode finder, and a grid inverse-CDF fallback.

use rand::Rng;
use thiserror::Error;

use crate::special_math::log_sum_exp;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum SamplerError {
    #[error("log density is not log-concave or has no mode: {0}")]
    Shape(String),
    #[error("rejection sampler accepted nothing in {0} proposals")]
    AcceptanceCollapse(usize),
}

/// Value, first and second derivative of a log density at a point.
pub type Eval3 = (f64, f64, f64);

/// Maximizer of a concave function, by Newton steps kept inside an expanding
/// bracket on the sign of the derivative.
pub fn find_mode<F: Fn(f64) -> Eval3>(f: &F, start: f64) -> Result<f64, SamplerError> {
    let (_, d0, _) = f(start);
    if d0 == 0.0 {
        return Ok(start);
    }
    let (mut lo, mut hi) = (start, start);
    let mut step = 1.0;
    if d0 > 0.0 {
        loop {
            hi += step;
            step *= 2.0;
            if f(hi).1 < 0.0 {
                break;
            }
            lo = hi;
            if step > 1e6 {
                return Err(SamplerError::Shape("derivative stays positive".into()));
            }
        }
    } else {
        loop {
            lo -= step;
            step *= 2.0;
            if f(lo).1 > 0.0 {
                break;
            }
            hi = lo;
            if step > 1e6 {
                return Err(SamplerError::Shape("derivative stays negative".into()));
            }
        }
    }
    let mut x = start.clamp(lo, hi);
    for _ in 0..200 {
        let (_, d1, d2) = f(x);
        if d1 == 0.0 {
            return Ok(x);
        }
        if d1 > 0.0 {
            lo = x;
        } else {
            hi = x;
        }
        let newton = if d2 < 0.0 { x - d1 / d2 } else { f64::NAN };
        let next = if newton > lo && newton < hi {
            newton
        } else {
            0.5 * (lo + hi)
        };
        if (next - x).abs() < 1e-12 * (1.0 + x.abs()) || hi - lo < 1e-12 * (1.0 + x.abs()) {
            return Ok(next);
        }
        x = next;
    }
    Ok(x)
}

struct Hull {
    xs: Vec<f64>,
    hs: Vec<f64>,
    ds: Vec<f64>,
}

impl Hull {
    fn insert(&mut self, x: f64, h: f64, d: f64) {
        let i = self.xs.partition_point(|&v| v < x);
        self.xs.insert(i, x);
        self.hs.insert(i, h);
        self.ds.insert(i, d);
    }

    /// Breakpoints between consecutive tangents.
    fn breaks(&self) -> Vec<f64> {
        let m = self.xs.len();
        let mut z = Vec::with_capacity(m + 1);
        z.push(f64::NEG_INFINITY);
        for j in 0..m - 1 {
            let (x0, x1) = (self.xs[j], self.xs[j + 1]);
            let (h0, h1) = (self.hs[j], self.hs[j + 1]);
            let (d0, d1) = (self.ds[j], self.ds[j + 1]);
            let zz = if (d0 - d1).abs() > 1e-12 * (d0.abs() + d1.abs()) {
                (h1 - h0 - x1 * d1 + x0 * d0) / (d0 - d1)
            } else {
                0.5 * (x0 + x1)
            };
            z.push(zz.clamp(x0, x1));
        }
        z.push(f64::INFINITY);
        z
    }

    /// ln of the envelope mass on each segment.
    fn log_masses(&self, z: &[f64]) -> Vec<f64> {
        (0..self.xs.len())
            .map(|j| segment_log_mass(self.xs[j], self.hs[j], self.ds[j], z[j], z[j + 1]))
            .collect()
    }
}

/// ln int_{lo}^{hi} exp(h + d (x - x0)) dx.
fn segment_log_mass(x0: f64, h: f64, d: f64, lo: f64, hi: f64) -> f64 {
    if hi <= lo {
        return f64::NEG_INFINITY;
    }
    if d.abs() < 1e-300 {
        return h + (hi - lo).ln();
    }
    if d > 0.0 {
        // dominated by the upper end
        let top = h + d * (hi - x0);
        let span = d * (hi - lo);
        top + (-(-span).exp_m1()).ln() - d.ln()
    } else {
        let top = h + d * (lo - x0);
        let span = -d * (hi - lo);
        top + (-(-span).exp_m1()).ln() - (-d).ln()
    }
}

fn sample_segment<R: Rng + ?Sized>(d: f64, lo: f64, hi: f64, rng: &mut R) -> f64 {
    let u: f64 = rng.random();
    if d.abs() < 1e-300 {
        return lo + u * (hi - lo);
    }
    if d > 0.0 {
        // density prop. to e^{d (x - hi)} on (lo, hi]
        let span = d * (hi - lo);
        let r = hi + (u + (1.0 - u) * (-span).exp()).ln() / d;
        r.clamp(lo, hi)
    } else {
        let span = -d * (hi - lo);
        let r = lo - (u + (1.0 - u) * (-span).exp()).ln() / (-d);
        r.clamp(lo, hi)
    }
}

/// Exact draw from the density proportional to exp(h(x)), h concave with
/// derivative available. `init` must contain points on both sides of the mode
/// (a point with h' > 0 and a point with h' < 0).
pub fn ars_sample<F, R>(f: &F, init: &[f64], rng: &mut R) -> Result<f64, SamplerError>
where
    F: Fn(f64) -> (f64, f64),
    R: Rng + ?Sized,
{
    let mut hull = Hull {
        xs: Vec::new(),
        hs: Vec::new(),
        ds: Vec::new(),
    };
    for &x in init {
        let (h, d) = f(x);
        hull.insert(x, h, d);
    }
    if hull.ds.first().is_none_or(|&d| d <= 0.0) || hull.ds.last().is_none_or(|&d| d >= 0.0) {
        return Err(SamplerError::Shape("initial points must straddle the mode".into()));
    }
    const MAX_PROPOSALS: usize = 10_000;
    for _ in 0..MAX_PROPOSALS {
        let z = hull.breaks();
        let lm = hull.log_masses(&z);
        let total = log_sum_exp(&lm);
        let target = rng.random::<f64>().ln() + total;
        let mut acc = f64::NEG_INFINITY;
        let mut j = lm.len() - 1;
        for (i, &m) in lm.iter().enumerate() {
            acc = crate::special_math::log_add_exp(acc, m);
            if target <= acc {
                j = i;
                break;
            }
        }
        let x = sample_segment(hull.ds[j], z[j], z[j + 1], rng);
        let upper = hull.hs[j] + hull.ds[j] * (x - hull.xs[j]);
        let (h, d) = f(x);
        if h > upper + 1e-9 * (1.0 + upper.abs()) {
            return Err(SamplerError::Shape(format!(
                "log density {h} exceeds tangent envelope {upper} at {x}"
            )));
        }
        if rng.random::<f64>().ln() <= h - upper {
            return Ok(x);
        }
        if hull.xs.len() < 64 && x.is_finite() {
            hull.insert(x, h, d);
        }
    }
    Err(SamplerError::AcceptanceCollapse(MAX_PROPOSALS))
}

/// Draw from exp(h) restricted to [lo, hi] by inverse CDF over a uniform
/// grid with linear interpolation of the density between nodes.
pub fn grid_inverse_cdf<F, R>(h: &F, lo: f64, hi: f64, points: usize, rng: &mut R) -> f64
where
    F: Fn(f64) -> f64,
    R: Rng + ?Sized,
{
    let n = points.max(2);
    let step = (hi - lo) / (n - 1) as f64;
    let ln_vals: Vec<f64> = (0..n).map(|i| h(lo + step * i as f64)).collect();
    let peak = ln_vals.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let vals: Vec<f64> = ln_vals.iter().map(|v| (v - peak).exp()).collect();
    let mut cum = vec![0.0; n];
    for i in 1..n {
        cum[i] = cum[i - 1] + 0.5 * (vals[i - 1] + vals[i]) * step;
    }
    let target = rng.random::<f64>() * cum[n - 1];
    let i = cum.partition_point(|&c| c < target).clamp(1, n - 1);
    let (f0, f1) = (vals[i - 1], vals[i]);
    let need = target - cum[i - 1];
    // solve f0 t + (f1 - f0) t^2 / (2 step) = need for t in [0, step]
    let slope = (f1 - f0) / step;
    let t = if slope.abs() < 1e-14 * (f0 + f1).max(1e-300) / step {
        need / f0.max(1e-300)
    } else {
        (-f0 + (f0 * f0 + 2.0 * slope * need).max(0.0).sqrt()) / slope
    };
    lo + step * (i - 1) as f64 + t.clamp(0.0, step)
}
