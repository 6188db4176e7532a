//! Globally adaptive Gauss-Kronrod (10/21-point) quadrature. Semi-infinite
//! pieces are mapped to [0, 1) with x = lo + w / (1 - w).

#![allow(clippy::excessive_precision)]

use std::cmp::Ordering;
use std::collections::BinaryHeap;

use thiserror::Error;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum QuadratureError {
    #[error("quadrature did not reach tolerance: estimate {value}, error {error:e}, requested {requested:e}")]
    NotConverged { value: f64, error: f64, requested: f64 },
    #[error("integrand returned a non-finite value at x = {x}")]
    NonFinite { x: f64 },
    #[error("invalid integration limits [{lo}, {hi}]")]
    Limits { lo: f64, hi: f64 },
}

#[derive(Debug, Clone, Copy)]
pub struct QuadOptions {
    pub abs_tol: f64,
    pub rel_tol: f64,
    pub max_intervals: usize,
}

impl Default for QuadOptions {
    fn default() -> Self {
        QuadOptions {
            abs_tol: 0.0,
            rel_tol: 1e-10,
            max_intervals: 4000,
        }
    }
}

impl QuadOptions {
    pub fn rel(rel_tol: f64) -> Self {
        QuadOptions {
            rel_tol,
            ..Default::default()
        }
    }

    pub fn with_abs(mut self, abs_tol: f64) -> Self {
        self.abs_tol = abs_tol;
        self
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Integral {
    pub value: f64,
    pub error: f64,
    pub evaluations: usize,
}

const XGK: [f64; 11] = [
    0.995_657_163_025_808_080_735_527_280_689_003,
    0.973_906_528_517_171_720_077_964_012_084_452,
    0.930_157_491_355_708_226_001_207_180_059_508,
    0.865_063_366_688_984_510_732_096_688_423_493,
    0.780_817_726_586_416_897_063_717_578_345_042,
    0.679_409_568_299_024_406_234_327_365_114_874,
    0.562_757_134_668_604_683_339_000_099_272_694,
    0.433_395_394_129_247_190_799_265_943_165_784,
    0.294_392_862_701_460_198_131_126_603_103_866,
    0.148_874_338_981_631_210_884_826_001_129_720,
    0.0,
];

const WGK: [f64; 11] = [
    0.011_694_638_867_371_874_278_064_396_062_192,
    0.032_558_162_307_964_727_478_818_972_459_390,
    0.054_755_896_574_351_996_031_381_300_244_580,
    0.075_039_674_810_919_952_767_043_140_916_190,
    0.093_125_454_583_697_605_535_065_465_083_366,
    0.109_387_158_802_297_641_899_210_590_325_805,
    0.123_491_976_262_065_851_077_600_525_350_910,
    0.134_709_217_311_473_325_928_054_001_771_707,
    0.142_775_938_577_060_080_797_094_273_138_717,
    0.147_739_104_901_338_491_374_841_515_972_068,
    0.149_445_554_002_916_905_664_936_468_389_821,
];

const WG: [f64; 5] = [
    0.066_671_344_308_688_137_593_568_809_893_332,
    0.149_451_349_150_580_593_145_776_339_657_697,
    0.219_086_362_515_982_043_995_534_934_228_163,
    0.269_266_719_309_996_355_091_226_921_569_469,
    0.295_524_224_714_752_870_173_892_994_651_338,
];

#[derive(Clone, Copy)]
enum Map {
    Identity,
    SemiInfinite(f64),
}

impl Map {
    fn eval<F: FnMut(f64) -> f64>(&self, f: &mut F, w: f64) -> (f64, f64) {
        match *self {
            Map::Identity => (w, f(w)),
            Map::SemiInfinite(lo) => {
                let one_minus = 1.0 - w;
                let x = lo + w / one_minus;
                if x.is_infinite() {
                    return (x, 0.0);
                }
                (x, f(x) / (one_minus * one_minus))
            }
        }
    }
}

struct Piece {
    lo: f64,
    hi: f64,
    value: f64,
    error: f64,
    map: usize,
}

impl PartialEq for Piece {
    fn eq(&self, other: &Self) -> bool {
        self.error == other.error
    }
}
impl Eq for Piece {}
impl PartialOrd for Piece {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}
impl Ord for Piece {
    fn cmp(&self, other: &Self) -> Ordering {
        self.error.total_cmp(&other.error)
    }
}

fn kronrod<F: FnMut(f64) -> f64>(f: &mut F, map: Map, lo: f64, hi: f64) -> Result<(f64, f64), QuadratureError> {
    let center = 0.5 * (lo + hi);
    let half = 0.5 * (hi - lo);
    let (xc, fc) = map.eval(f, center);
    if !fc.is_finite() {
        return Err(QuadratureError::NonFinite { x: xc });
    }
    let mut res_k = fc * WGK[10];
    let mut res_g = 0.0;
    let mut res_abs = res_k.abs();
    let mut fv1 = [0.0; 10];
    let mut fv2 = [0.0; 10];
    for j in 0..10 {
        let dx = half * XGK[j];
        let (x1, f1) = map.eval(f, center - dx);
        let (x2, f2) = map.eval(f, center + dx);
        if !f1.is_finite() {
            return Err(QuadratureError::NonFinite { x: x1 });
        }
        if !f2.is_finite() {
            return Err(QuadratureError::NonFinite { x: x2 });
        }
        fv1[j] = f1;
        fv2[j] = f2;
        res_k += WGK[j] * (f1 + f2);
        res_abs += WGK[j] * (f1.abs() + f2.abs());
        if j % 2 == 1 {
            res_g += WG[j / 2] * (f1 + f2);
        }
    }
    let mean = 0.5 * res_k;
    let mut res_asc = WGK[10] * (fc - mean).abs();
    for j in 0..10 {
        res_asc += WGK[j] * ((fv1[j] - mean).abs() + (fv2[j] - mean).abs());
    }
    let value = res_k * half;
    res_abs *= half.abs();
    res_asc *= half.abs();
    let mut error = ((res_k - res_g) * half).abs();
    if res_asc != 0.0 && error != 0.0 {
        error = res_asc * (200.0 * error / res_asc).powf(1.5).min(1.0);
    }
    if res_abs > f64::MIN_POSITIVE / (50.0 * f64::EPSILON) {
        error = error.max(50.0 * f64::EPSILON * res_abs);
    }
    Ok((value, error))
}

/// Integrates `f` over consecutive segments delimited by `points`, which must
/// be increasing; the last point may be `f64::INFINITY`.
pub fn integrate_breakpoints<F: FnMut(f64) -> f64>(
    mut f: F,
    points: &[f64],
    opts: QuadOptions,
) -> Result<Integral, QuadratureError> {
    if points.len() < 2 {
        return Err(QuadratureError::Limits {
            lo: points.first().copied().unwrap_or(f64::NAN),
            hi: f64::NAN,
        });
    }
    let mut maps = Vec::new();
    let mut heap = BinaryHeap::new();
    let mut evaluations = 0;
    for w in points.windows(2) {
        let (lo, hi) = (w[0], w[1]);
        if !(lo < hi) || lo.is_infinite() {
            return Err(QuadratureError::Limits { lo, hi });
        }
        let (map, plo, phi) = if hi.is_infinite() {
            (Map::SemiInfinite(lo), 0.0, 1.0)
        } else {
            (Map::Identity, lo, hi)
        };
        maps.push(map);
        let (value, error) = kronrod(&mut f, map, plo, phi)?;
        evaluations += 21;
        heap.push(Piece {
            lo: plo,
            hi: phi,
            value,
            error,
            map: maps.len() - 1,
        });
    }
    loop {
        let total: f64 = heap.iter().map(|p| p.value).sum();
        let err: f64 = heap.iter().map(|p| p.error).sum();
        let requested = opts.abs_tol.max(opts.rel_tol * total.abs());
        if err <= requested {
            return Ok(Integral {
                value: total,
                error: err,
                evaluations,
            });
        }
        let worst = heap.pop().expect("heap is never empty");
        let mid = 0.5 * (worst.lo + worst.hi);
        if heap.len() + 2 > opts.max_intervals || !(worst.lo < mid && mid < worst.hi) {
            heap.push(worst);
            return Err(QuadratureError::NotConverged {
                value: total,
                error: err,
                requested,
            });
        }
        let map = maps[worst.map];
        for (lo, hi) in [(worst.lo, mid), (mid, worst.hi)] {
            let (value, error) = kronrod(&mut f, map, lo, hi)?;
            evaluations += 21;
            heap.push(Piece {
                lo,
                hi,
                value,
                error,
                map: worst.map,
            });
        }
    }
}

pub fn integrate<F: FnMut(f64) -> f64>(f: F, lo: f64, hi: f64, opts: QuadOptions) -> Result<Integral, QuadratureError> {
    integrate_breakpoints(f, &[lo, hi], opts)
}

/// Integral over [lo, inf).
pub fn integrate_to_infinity<F: FnMut(f64) -> f64>(
    f: F,
    lo: f64,
    opts: QuadOptions,
) -> Result<Integral, QuadratureError> {
    integrate_breakpoints(f, &[lo, f64::INFINITY], opts)
}
