//! Superposition, subsampling and point transition of completely random
//! measures and their normalizations, an expression algebra over the three
//! operators with a normal form, and the posterior quantities they induce.
//!
//! Keyed randomness: every atom owns a uniform V = hash(atom id, seed) and a
//! cumulative survival probability w. Subsampling with rate q sets w <- w q
//! and keeps the atom iff V < w, so nested subsamplings compose exactly into
//! one. The k-th transition of an atom draws from a generator keyed by
//! (atom id, k, kernel id, seed). Evaluating an expression and its normal form
//! under the same seed therefore gives identical atom sets.

use std::collections::HashMap;
use std::fmt;
use std::sync::Arc;

use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Gamma, Normal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::levy_core::{
    ln_unit_levy_density, Atom, BaseMeasure, CrmRealization, LevyError, NggParams, NrmAtom, NrmRealization, Truncation,
};
use crate::quadrature::{integrate_breakpoints, QuadOptions, QuadratureError};
use crate::special_math::{ln_gamma, log_sum_exp};

#[derive(Debug, Clone, PartialEq, Error)]
pub enum OpsError {
    #[error("parse error at token {position}: {detail}")]
    Parse { position: usize, detail: String },
    #[error("invalid expression: {0}")]
    InvalidExpr(String),
    #[error("no realization bound to leaf '{0}'")]
    UnboundLeaf(String),
    #[error("unknown transition kernel '{0}'")]
    UnknownKernel(String),
    #[error("location dimension mismatch: {0} vs {1}")]
    Dimension(usize, usize),
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
    #[error(transparent)]
    Levy(#[from] LevyError),
    #[error(transparent)]
    Quadrature(#[from] QuadratureError),
}

fn mix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Order-sensitive 64-bit hash of a key tuple.
pub fn hash_key(parts: &[u64]) -> u64 {
    parts.iter().fold(0x243f_6a88_85a3_08d3, |h, &p| mix64(h ^ mix64(p)))
}

/// FNV-1a hash of a name, stable across platforms and releases.
pub fn hash_name(name: &str) -> u64 {
    name.bytes().fold(0xcbf2_9ce4_8422_2325, |h, b| {
        (h ^ b as u64).wrapping_mul(0x0100_0000_01b3)
    })
}

const THINNING_TAG: u64 = 0x7468_696e;
const TRANSITION_TAG: u64 = 0x7472_616e;

/// The per-atom uniform in [0, 1) that all thinning decisions compare against.
pub fn keyed_uniform(atom_id: u64, seed: u64) -> f64 {
    (hash_key(&[THINNING_TAG, atom_id, seed]) >> 11) as f64 * (1.0 / (1u64 << 53) as f64)
}

/// Generator for the `step`-th transition of an atom.
pub fn keyed_rng(atom_id: u64, step: u32, kernel: &str, seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(hash_key(&[
        TRANSITION_TAG,
        atom_id,
        step as u64,
        hash_name(kernel),
        seed,
    ]))
}

/// Probabilistic transition kernel acting on atom locations.
pub trait TransitionKernel: Send + Sync {
    fn apply(&self, location: &[f64], rng: &mut dyn RngCore) -> Vec<f64>;
}

#[derive(Debug, Clone, Copy)]
pub struct IdentityKernel;

impl TransitionKernel for IdentityKernel {
    fn apply(&self, location: &[f64], _: &mut dyn RngCore) -> Vec<f64> {
        location.to_vec()
    }
}

/// Adds isotropic Gaussian noise.
#[derive(Debug, Clone, Copy)]
pub struct GaussianRandomWalk {
    pub sd: f64,
}

impl TransitionKernel for GaussianRandomWalk {
    fn apply(&self, location: &[f64], rng: &mut dyn RngCore) -> Vec<f64> {
        let n = Normal::new(0.0, self.sd).expect("random-walk sd must be positive");
        location.iter().map(|x| x + n.sample(rng)).collect()
    }
}

/// Replaces the location by a fresh draw from a base measure.
#[derive(Clone)]
pub struct ResampleFromBase {
    pub base: Arc<dyn BaseMeasure>,
}

impl TransitionKernel for ResampleFromBase {
    fn apply(&self, _: &[f64], rng: &mut dyn RngCore) -> Vec<f64> {
        self.base.sample(rng)
    }
}

/// Deterministic kernel exchanging the intervals [first.0, first.1) and
/// [second.0, second.1) of the first coordinate by affine maps; identity
/// elsewhere.
#[derive(Debug, Clone, Copy)]
pub struct IntervalExchange {
    pub first: (f64, f64),
    pub second: (f64, f64),
}

impl TransitionKernel for IntervalExchange {
    fn apply(&self, location: &[f64], _: &mut dyn RngCore) -> Vec<f64> {
        let mut out = location.to_vec();
        let x = location[0];
        let map = |x: f64, from: (f64, f64), to: (f64, f64)| to.0 + (x - from.0) / (from.1 - from.0) * (to.1 - to.0);
        if x >= self.first.0 && x < self.first.1 {
            out[0] = map(x, self.first, self.second);
        } else if x >= self.second.0 && x < self.second.1 {
            out[0] = map(x, self.second, self.first);
        }
        out
    }
}

/// Named transition kernels an expression can refer to.
#[derive(Clone, Default)]
pub struct KernelRegistry {
    kernels: HashMap<String, Arc<dyn TransitionKernel>>,
}

impl KernelRegistry {
    pub fn new() -> Self {
        Self::default()
    }

    /// `id` (identity), `rw` (Gaussian random walk, sd 0.1) and `resample`
    /// (fresh uniform location in [0, 1]^dim).
    pub fn standard(dim: usize) -> Self {
        let mut r = Self::new();
        r.insert("id", Arc::new(IdentityKernel));
        r.insert("rw", Arc::new(GaussianRandomWalk { sd: 0.1 }));
        r.insert(
            "resample",
            Arc::new(ResampleFromBase {
                base: Arc::new(crate::levy_core::UniformCube { dim }),
            }),
        );
        r
    }

    pub fn insert(&mut self, name: &str, kernel: Arc<dyn TransitionKernel>) {
        self.kernels.insert(name.to_string(), kernel);
    }

    pub fn get(&self, name: &str) -> Result<&Arc<dyn TransitionKernel>, OpsError> {
        self.kernels
            .get(name)
            .ok_or_else(|| OpsError::UnknownKernel(name.to_string()))
    }

    pub fn names(&self) -> Vec<String> {
        let mut v: Vec<String> = self.kernels.keys().cloned().collect();
        v.sort();
        v
    }
}

fn combined_params(parts: &[&CrmRealization]) -> NggParams {
    let first = parts[0].params;
    if parts.iter().all(|p| p.params.a == first.a) {
        NggParams {
            a: first.a,
            mass: parts.iter().map(|p| p.params.mass).sum(),
        }
    } else {
        first
    }
}

fn combined_truncation(parts: &[&CrmRealization]) -> Truncation {
    let first = parts[0].truncation;
    match first {
        Truncation::Threshold { .. } if parts.iter().all(|p| p.truncation == first) => first,
        _ if parts.len() == 1 => first,
        _ => Truncation::Composite,
    }
}

fn location_dim(crm: &CrmRealization) -> Option<usize> {
    crm.atoms.first().map(|a| a.location.len())
}

/// Union of the atoms. Masses add; the parameter record sums the masses when
/// all shapes agree and keeps the first otherwise.
pub fn superpose(crms: &[CrmRealization]) -> Result<CrmRealization, OpsError> {
    if crms.is_empty() {
        return Err(OpsError::InvalidArgument("superpose needs at least one measure".into()));
    }
    let mut dim = None;
    for c in crms {
        if let Some(d) = location_dim(c) {
            match dim {
                Some(e) if e != d => return Err(OpsError::Dimension(e, d)),
                _ => dim = Some(d),
            }
        }
    }
    let refs: Vec<&CrmRealization> = crms.iter().collect();
    Ok(CrmRealization {
        params: combined_params(&refs),
        atoms: crms.iter().flat_map(|c| c.atoms.iter().cloned()).collect(),
        truncation: combined_truncation(&refs),
    })
}

fn check_rate(q: f64) -> Result<(), OpsError> {
    if !(0.0..=1.0).contains(&q) {
        return Err(OpsError::InvalidArgument(format!(
            "subsampling rate {q} outside [0, 1]"
        )));
    }
    Ok(())
}

fn thinned(crm: &CrmRealization, q: f64, atoms: Vec<Atom>) -> CrmRealization {
    CrmRealization {
        params: NggParams {
            a: crm.params.a,
            mass: crm.params.mass * q,
        },
        atoms,
        truncation: crm.truncation,
    }
}

/// Keeps each atom independently with probability q.
pub fn subsample<R: Rng + ?Sized>(crm: &CrmRealization, q: f64, rng: &mut R) -> Result<CrmRealization, OpsError> {
    check_rate(q)?;
    let atoms = crm.atoms.iter().filter(|_| rng.random::<f64>() < q).cloned().collect();
    Ok(thinned(crm, q, atoms))
}

/// Keyed thinning: atom kept iff its keyed uniform is below q.
pub fn subsample_keyed(crm: &CrmRealization, q: f64, seed: u64) -> Result<CrmRealization, OpsError> {
    check_rate(q)?;
    let atoms = crm
        .atoms
        .iter()
        .filter(|a| keyed_uniform(a.id, seed) < q)
        .cloned()
        .collect();
    Ok(thinned(crm, q, atoms))
}

/// Thinning with a location-dependent acceptance rate. The parameter record
/// keeps the unthinned mass since the thinned intensity is no longer
/// homogeneous.
pub fn subsample_by_location<R, F>(crm: &CrmRealization, rate: F, rng: &mut R) -> Result<CrmRealization, OpsError>
where
    R: Rng + ?Sized,
    F: Fn(&[f64]) -> f64,
{
    let mut atoms = Vec::new();
    for a in &crm.atoms {
        let q = rate(&a.location);
        check_rate(q)?;
        if rng.random::<f64>() < q {
            atoms.push(a.clone());
        }
    }
    Ok(CrmRealization {
        params: crm.params,
        atoms,
        truncation: crm.truncation,
    })
}

/// Moves every location through the kernel; jumps are untouched.
pub fn point_transition<R: RngCore>(
    crm: &CrmRealization,
    kernel: &dyn TransitionKernel,
    rng: &mut R,
) -> CrmRealization {
    CrmRealization {
        params: crm.params,
        atoms: crm
            .atoms
            .iter()
            .map(|a| Atom {
                id: a.id,
                jump: a.jump,
                location: kernel.apply(&a.location, rng),
            })
            .collect(),
        truncation: crm.truncation,
    }
}

/// Keyed transition counting as the `step`-th move of every atom.
pub fn point_transition_keyed(
    crm: &CrmRealization,
    kernel: &dyn TransitionKernel,
    kernel_name: &str,
    step: u32,
    seed: u64,
) -> CrmRealization {
    CrmRealization {
        params: crm.params,
        atoms: crm
            .atoms
            .iter()
            .map(|a| Atom {
                id: a.id,
                jump: a.jump,
                location: kernel.apply(&a.location, &mut keyed_rng(a.id, step, kernel_name, seed)),
            })
            .collect(),
        truncation: crm.truncation,
    }
}

/// Superposition of normalized measures: mixture weighted by total masses.
pub fn nrm_superpose(parts: &[NrmRealization]) -> Result<NrmRealization, OpsError> {
    let total: f64 = parts.iter().map(|p| p.total_mass).sum();
    if !(total > 0.0) {
        return Err(OpsError::InvalidArgument("superposition of zero total mass".into()));
    }
    let atoms = parts
        .iter()
        .flat_map(|p| {
            let w = p.total_mass / total;
            p.atoms.iter().map(move |a| NrmAtom {
                id: a.id,
                weight: a.weight * w,
                location: a.location.clone(),
            })
        })
        .collect();
    Ok(NrmRealization {
        atoms,
        total_mass: total,
    })
}

/// Keyed thinning of a normalized measure followed by renormalization. The
/// total mass becomes the mass of the surviving atoms.
pub fn nrm_subsample_keyed(nrm: &NrmRealization, q: f64, seed: u64) -> Result<NrmRealization, OpsError> {
    check_rate(q)?;
    nrm_thin_by_survival(nrm, |id| keyed_uniform(id, seed) < q)
}

fn nrm_thin_by_survival<F: Fn(u64) -> bool>(nrm: &NrmRealization, keep: F) -> Result<NrmRealization, OpsError> {
    let kept: Vec<&NrmAtom> = nrm.atoms.iter().filter(|a| keep(a.id)).collect();
    let share: f64 = kept.iter().map(|a| a.weight).sum();
    if !(share > 0.0) {
        return Err(OpsError::InvalidArgument("thinning removed every atom".into()));
    }
    Ok(NrmRealization {
        atoms: kept
            .into_iter()
            .map(|a| NrmAtom {
                id: a.id,
                weight: a.weight / share,
                location: a.location.clone(),
            })
            .collect(),
        total_mass: nrm.total_mass * share,
    })
}

pub fn nrm_transition_keyed(
    nrm: &NrmRealization,
    kernel: &dyn TransitionKernel,
    kernel_name: &str,
    step: u32,
    seed: u64,
) -> NrmRealization {
    NrmRealization {
        atoms: nrm
            .atoms
            .iter()
            .map(|a| NrmAtom {
                id: a.id,
                weight: a.weight,
                location: kernel.apply(&a.location, &mut keyed_rng(a.id, step, kernel_name, seed)),
            })
            .collect(),
        total_mass: nrm.total_mass,
    }
}

/// Expression over the three operators.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "op", rename_all = "snake_case")]
pub enum OperatorExpr {
    Leaf { id: String, params: NggParams },
    Subsample { q: f64, child: Box<OperatorExpr> },
    Transition { kernel: String, child: Box<OperatorExpr> },
    Superpose { children: Vec<OperatorExpr> },
}

impl OperatorExpr {
    pub fn leaf(id: &str, params: NggParams) -> Self {
        OperatorExpr::Leaf {
            id: id.to_string(),
            params,
        }
    }

    pub fn subsample(q: f64, child: OperatorExpr) -> Self {
        OperatorExpr::Subsample {
            q,
            child: Box::new(child),
        }
    }

    pub fn transition(kernel: &str, child: OperatorExpr) -> Self {
        OperatorExpr::Transition {
            kernel: kernel.to_string(),
            child: Box::new(child),
        }
    }

    pub fn superpose(children: Vec<OperatorExpr>) -> Self {
        OperatorExpr::Superpose { children }
    }

    /// Checks rates lie in [0, 1] and every superposition has two or more
    /// children.
    pub fn validate(&self) -> Result<(), OpsError> {
        match self {
            OperatorExpr::Leaf { .. } => Ok(()),
            OperatorExpr::Subsample { q, child } => {
                check_rate(*q)?;
                child.validate()
            }
            OperatorExpr::Transition { child, .. } => child.validate(),
            OperatorExpr::Superpose { children } => {
                if children.len() < 2 {
                    return Err(OpsError::InvalidExpr("superpose needs at least two children".into()));
                }
                children.iter().try_for_each(|c| c.validate())
            }
        }
    }

    pub fn depth(&self) -> usize {
        match self {
            OperatorExpr::Leaf { .. } => 0,
            OperatorExpr::Subsample { child, .. } | OperatorExpr::Transition { child, .. } => 1 + child.depth(),
            OperatorExpr::Superpose { children } => 1 + children.iter().map(|c| c.depth()).max().unwrap_or(0),
        }
    }

    pub fn leaf_ids(&self) -> Vec<String> {
        let mut out = Vec::new();
        self.collect_leaves(&mut out);
        out.sort();
        out.dedup();
        out
    }

    fn collect_leaves(&self, out: &mut Vec<String>) {
        match self {
            OperatorExpr::Leaf { id, .. } => out.push(id.clone()),
            OperatorExpr::Subsample { child, .. } | OperatorExpr::Transition { child, .. } => child.collect_leaves(out),
            OperatorExpr::Superpose { children } => children.iter().for_each(|c| c.collect_leaves(out)),
        }
    }

    /// Parses the prefix syntax, e.g.
    /// `(superpose (transition rw (subsample 0.5 (leaf m1))) (leaf m2 0.3 1))`.
    /// A leaf may carry its own `a` and mass; otherwise `default` applies.
    pub fn parse(text: &str, default: NggParams) -> Result<Self, OpsError> {
        let tokens = tokenize(text);
        let mut pos = 0;
        let e = parse_node(&tokens, &mut pos, default)?;
        if pos != tokens.len() {
            return Err(OpsError::Parse {
                position: pos,
                detail: format!("unexpected trailing '{}'", tokens[pos]),
            });
        }
        e.validate()?;
        Ok(e)
    }
}

impl fmt::Display for OperatorExpr {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            OperatorExpr::Leaf { id, params } => write!(f, "(leaf {id} {} {})", params.a, params.mass),
            OperatorExpr::Subsample { q, child } => write!(f, "(subsample {q} {child})"),
            OperatorExpr::Transition { kernel, child } => write!(f, "(transition {kernel} {child})"),
            OperatorExpr::Superpose { children } => {
                write!(f, "(superpose")?;
                for c in children {
                    write!(f, " {c}")?;
                }
                write!(f, ")")
            }
        }
    }
}

fn tokenize(text: &str) -> Vec<String> {
    text.replace('(', " ( ")
        .replace(')', " ) ")
        .split_whitespace()
        .map(str::to_string)
        .collect()
}

fn parse_node(tokens: &[String], pos: &mut usize, default: NggParams) -> Result<OperatorExpr, OpsError> {
    let err = |position: usize, detail: &str| OpsError::Parse {
        position,
        detail: detail.to_string(),
    };
    let next = |pos: &mut usize| -> Result<String, OpsError> {
        let t = tokens
            .get(*pos)
            .cloned()
            .ok_or_else(|| err(*pos, "unexpected end of input"))?;
        *pos += 1;
        Ok(t)
    };
    let number = |pos: &mut usize| -> Result<f64, OpsError> {
        let at = *pos;
        next(pos)?.parse::<f64>().map_err(|_| err(at, "expected a number"))
    };
    if next(pos)? != "(" {
        return Err(err(*pos - 1, "expected '('"));
    }
    let head = next(pos)?;
    let node = match head.as_str() {
        "leaf" => {
            let id = next(pos)?;
            if id == "(" || id == ")" {
                return Err(err(*pos - 1, "expected a leaf name"));
            }
            let params = if tokens.get(*pos).is_some_and(|t| t != ")") {
                let a = number(pos)?;
                let mass = number(pos)?;
                NggParams::new(a, mass)?
            } else {
                default
            };
            OperatorExpr::Leaf { id, params }
        }
        "subsample" => {
            let q = number(pos)?;
            OperatorExpr::subsample(q, parse_node(tokens, pos, default)?)
        }
        "transition" => {
            let kernel = next(pos)?;
            OperatorExpr::transition(&kernel, parse_node(tokens, pos, default)?)
        }
        "superpose" => {
            let mut children = Vec::new();
            while tokens.get(*pos).is_some_and(|t| t == "(") {
                children.push(parse_node(tokens, pos, default)?);
            }
            OperatorExpr::Superpose { children }
        }
        other => return Err(err(*pos - 1, &format!("unknown operator '{other}'"))),
    };
    if next(pos)? != ")" {
        return Err(err(*pos - 1, "expected ')'"));
    }
    Ok(node)
}

/// A normalized chain T_m(...T_1(S^q(leaf))): transitions innermost first.
#[derive(Debug, Clone, PartialEq)]
struct Chain {
    leaf: (String, NggParams),
    rate: Option<f64>,
    transitions: Vec<String>,
}

fn chains_of(e: &OperatorExpr) -> Vec<Chain> {
    match e {
        OperatorExpr::Leaf { id, params } => vec![Chain {
            leaf: (id.clone(), *params),
            rate: None,
            transitions: Vec::new(),
        }],
        OperatorExpr::Subsample { q, child } => chains_of(child)
            .into_iter()
            .map(|mut c| {
                // inner rate first, matching the order survival is accumulated
                c.rate = Some(c.rate.map_or(*q, |r| r * q));
                c
            })
            .collect(),
        OperatorExpr::Transition { kernel, child } => chains_of(child)
            .into_iter()
            .map(|mut c| {
                c.transitions.push(kernel.clone());
                c
            })
            .collect(),
        OperatorExpr::Superpose { children } => children.iter().flat_map(chains_of).collect(),
    }
}

fn chain_expr(c: Chain) -> OperatorExpr {
    let mut e = OperatorExpr::Leaf {
        id: c.leaf.0,
        params: c.leaf.1,
    };
    if let Some(q) = c.rate {
        e = OperatorExpr::subsample(q, e);
    }
    for k in c.transitions {
        e = OperatorExpr::transition(&k, e);
    }
    e
}

/// Rewrites to a flat superposition of chains with subsampling innermost,
/// transitions above it and superposition outermost. Nested rates merge by
/// multiplication.
pub fn normal_form(e: &OperatorExpr) -> OperatorExpr {
    let mut chains: Vec<OperatorExpr> = chains_of(e).into_iter().map(chain_expr).collect();
    if chains.len() == 1 {
        chains.pop().expect("one chain")
    } else {
        OperatorExpr::Superpose { children: chains }
    }
}

#[derive(Debug, Clone)]
struct Tracked {
    atom: Atom,
    steps: u32,
    survival: f64,
}

struct Evaluated {
    atoms: Vec<Tracked>,
    params: NggParams,
    truncation: Truncation,
}

enum Draws<'a> {
    Keyed(u64),
    Stream(&'a mut dyn RngCore),
}

fn eval(
    e: &OperatorExpr,
    leaves: &HashMap<String, CrmRealization>,
    kernels: &KernelRegistry,
    draws: &mut Draws,
) -> Result<Evaluated, OpsError> {
    match e {
        OperatorExpr::Leaf { id, .. } => {
            let crm = leaves.get(id).ok_or_else(|| OpsError::UnboundLeaf(id.clone()))?;
            Ok(Evaluated {
                atoms: crm
                    .atoms
                    .iter()
                    .map(|a| Tracked {
                        atom: a.clone(),
                        steps: 0,
                        survival: 1.0,
                    })
                    .collect(),
                params: crm.params,
                truncation: crm.truncation,
            })
        }
        OperatorExpr::Subsample { q, child } => {
            check_rate(*q)?;
            let mut inner = eval(child, leaves, kernels, draws)?;
            let mut kept = Vec::with_capacity(inner.atoms.len());
            for mut t in inner.atoms {
                t.survival *= q;
                let keep = match draws {
                    Draws::Keyed(seed) => keyed_uniform(t.atom.id, *seed) < t.survival,
                    Draws::Stream(rng) => rng.random::<f64>() < *q,
                };
                if keep {
                    kept.push(t);
                }
            }
            inner.atoms = kept;
            inner.params.mass *= q;
            Ok(inner)
        }
        OperatorExpr::Transition { kernel, child } => {
            let k = kernels.get(kernel)?.clone();
            let mut inner = eval(child, leaves, kernels, draws)?;
            for t in inner.atoms.iter_mut() {
                t.atom.location = match draws {
                    Draws::Keyed(seed) => k.apply(&t.atom.location, &mut keyed_rng(t.atom.id, t.steps, kernel, *seed)),
                    Draws::Stream(rng) => k.apply(&t.atom.location, *rng),
                };
                t.steps += 1;
            }
            Ok(inner)
        }
        OperatorExpr::Superpose { children } => {
            if children.len() < 2 {
                return Err(OpsError::InvalidExpr("superpose needs at least two children".into()));
            }
            let parts = children
                .iter()
                .map(|c| eval(c, leaves, kernels, draws))
                .collect::<Result<Vec<_>, _>>()?;
            let first = parts[0].params;
            let same = parts.iter().all(|p| p.params.a == first.a);
            let params = if same {
                NggParams {
                    a: first.a,
                    mass: parts.iter().map(|p| p.params.mass).sum(),
                }
            } else {
                first
            };
            Ok(Evaluated {
                atoms: parts.into_iter().flat_map(|p| p.atoms).collect(),
                params,
                truncation: Truncation::Composite,
            })
        }
    }
}

fn finish(ev: Evaluated) -> CrmRealization {
    CrmRealization {
        params: ev.params,
        atoms: ev.atoms.into_iter().map(|t| t.atom).collect(),
        truncation: ev.truncation,
    }
}

/// Interprets the expression with independent draws from `rng`.
pub fn evaluate_expr<R: RngCore>(
    e: &OperatorExpr,
    leaves: &HashMap<String, CrmRealization>,
    kernels: &KernelRegistry,
    rng: &mut R,
) -> Result<CrmRealization, OpsError> {
    Ok(finish(eval(e, leaves, kernels, &mut Draws::Stream(rng))?))
}

/// Interprets the expression with keyed randomness.
pub fn evaluate_expr_keyed(
    e: &OperatorExpr,
    leaves: &HashMap<String, CrmRealization>,
    kernels: &KernelRegistry,
    seed: u64,
) -> Result<CrmRealization, OpsError> {
    Ok(finish(eval(e, leaves, kernels, &mut Draws::Keyed(seed))?))
}

/// Atoms sorted by (id, jump, location) for multiset comparison.
pub fn canonical_atoms(crm: &CrmRealization) -> Vec<Atom> {
    let mut v = crm.atoms.clone();
    v.sort_by(|x, y| {
        x.id.cmp(&y.id).then(x.jump.total_cmp(&y.jump)).then_with(|| {
            x.location
                .iter()
                .zip(&y.location)
                .map(|(a, b)| a.total_cmp(b))
                .find(|o| o.is_ne())
                .unwrap_or(std::cmp::Ordering::Equal)
        })
    });
    v
}

/// Random expression over the given leaves and kernels with depth at most
/// `max_depth`.
pub fn random_expr<R: Rng + ?Sized>(
    max_depth: usize,
    leaves: &[(String, NggParams)],
    kernels: &[String],
    rng: &mut R,
) -> OperatorExpr {
    let pick_leaf = |rng: &mut R| {
        let (id, p) = &leaves[rng.random_range(0..leaves.len())];
        OperatorExpr::leaf(id, *p)
    };
    if max_depth == 0 || rng.random::<f64>() < 0.15 {
        return pick_leaf(rng);
    }
    match rng.random_range(0..3) {
        0 => {
            let q = (rng.random::<f64>() * 0.9 + 0.1 * rng.random::<f64>()).min(1.0);
            OperatorExpr::subsample(q, random_expr(max_depth - 1, leaves, kernels, rng))
        }
        1 => {
            let k = &kernels[rng.random_range(0..kernels.len())];
            OperatorExpr::transition(k, random_expr(max_depth - 1, leaves, kernels, rng))
        }
        _ => {
            let n = rng.random_range(2..4);
            OperatorExpr::superpose(
                (0..n)
                    .map(|_| random_expr(max_depth - 1, leaves, kernels, rng))
                    .collect(),
            )
        }
    }
}

/// Expected mixing proportions of the epoch measures inside the measure at
/// epoch m: proportional to q^{m-j} times the expected total mass M_j a_j.
pub fn expected_chain_weights(params: &[NggParams], q: f64) -> Result<Vec<f64>, OpsError> {
    let masses: Vec<f64> = params.iter().map(|p| p.mass * p.a).collect();
    realized_chain_weights(&masses, q)
}

/// Mixing proportions q^{m-j} T_j / sum_i q^{m-i} T_i from realized total
/// masses T_1..T_m.
pub fn realized_chain_weights(masses: &[f64], q: f64) -> Result<Vec<f64>, OpsError> {
    if masses.is_empty() {
        return Err(OpsError::InvalidArgument("at least one epoch is required".into()));
    }
    if !(q > 0.0 && q <= 1.0) {
        return Err(OpsError::InvalidArgument(format!("rate {q} outside (0, 1]")));
    }
    let m = masses.len();
    let ln: Vec<f64> = masses
        .iter()
        .enumerate()
        .map(|(j, t)| (m - 1 - j) as f64 * q.ln() + t.ln())
        .collect();
    let z = log_sum_exp(&ln);
    Ok(ln.iter().map(|v| (v - z).exp()).collect())
}

/// Measure at the last epoch built on the unnormalized side: each epoch's
/// measure is thinned, moved and superposed with the next epoch's fresh
/// measure, and only the result is normalized.
pub fn tdnrm_crm_side(
    epochs: &[CrmRealization],
    q: f64,
    kernel_name: &str,
    kernels: &KernelRegistry,
    seed: u64,
) -> Result<NrmRealization, OpsError> {
    if epochs.is_empty() {
        return Err(OpsError::InvalidArgument("at least one epoch is required".into()));
    }
    let mut leaves = HashMap::new();
    let mut expr: Option<OperatorExpr> = None;
    for (j, crm) in epochs.iter().enumerate() {
        let id = format!("epoch{j}");
        leaves.insert(id.clone(), crm.clone());
        let leaf = OperatorExpr::leaf(&id, crm.params);
        expr = Some(match expr {
            None => leaf,
            Some(prev) => OperatorExpr::superpose(vec![
                OperatorExpr::transition(kernel_name, OperatorExpr::subsample(q, prev)),
                leaf,
            ]),
        });
    }
    let crm = evaluate_expr_keyed(&expr.expect("non-empty"), &leaves, kernels, seed)?;
    Ok(crate::levy_core::normalize(&crm)?)
}

/// The same measure built from normalized pieces: each epoch's normalized
/// measure is thinned with the accumulated rate and moved, then the pieces
/// are mixed with weights proportional to their thinned total masses.
pub fn tdnrm_nrm_side(
    epochs: &[CrmRealization],
    q: f64,
    kernel_name: &str,
    kernels: &KernelRegistry,
    seed: u64,
) -> Result<NrmRealization, OpsError> {
    if epochs.is_empty() {
        return Err(OpsError::InvalidArgument("at least one epoch is required".into()));
    }
    check_rate(q)?;
    let kernel = kernels.get(kernel_name)?.clone();
    let m = epochs.len();
    let mut pieces = Vec::with_capacity(m);
    for (j, crm) in epochs.iter().enumerate() {
        let rounds = m - 1 - j;
        let mut nrm = crate::levy_core::normalize(crm)?;
        if rounds > 0 {
            let mut rate = 1.0;
            for _ in 0..rounds {
                rate *= q;
            }
            nrm = nrm_thin_by_survival(&nrm, |id| keyed_uniform(id, seed) < rate)?;
            for step in 0..rounds {
                nrm = nrm_transition_keyed(&nrm, kernel.as_ref(), kernel_name, step as u32, seed);
            }
        }
        pieces.push(nrm);
    }
    let masses: Vec<f64> = pieces.iter().map(|p| p.total_mass).collect();
    let weights = realized_chain_weights(&masses, 1.0)?;
    let total: f64 = masses.iter().sum();
    let atoms = pieces
        .iter()
        .zip(&weights)
        .flat_map(|(p, w)| {
            p.atoms.iter().map(move |a| NrmAtom {
                id: a.id,
                weight: a.weight * w,
                location: a.location.clone(),
            })
        })
        .collect();
    Ok(NrmRealization {
        atoms,
        total_mass: total,
    })
}

/// Posterior of a superposition of generalized gamma intensities given the
/// latent variable u and the counts at the fixed atoms.
#[derive(Debug, Clone, PartialEq)]
pub struct SuperpositionPosterior {
    pub components: Vec<NggParams>,
    pub latent: f64,
    pub counts: Vec<usize>,
}

impl SuperpositionPosterior {
    pub fn new(components: Vec<NggParams>, latent: f64, counts: Vec<usize>) -> Result<Self, OpsError> {
        if components.is_empty() {
            return Err(OpsError::InvalidArgument("no Levy components".into()));
        }
        if !(latent >= 0.0) {
            return Err(OpsError::InvalidArgument(format!("latent value {latent} must be >= 0")));
        }
        if counts.contains(&0) {
            return Err(OpsError::InvalidArgument("fixed atoms need positive counts".into()));
        }
        Ok(SuperpositionPosterior {
            components,
            latent,
            counts,
        })
    }

    fn ln_summed_density(&self, t: f64) -> f64 {
        let terms: Vec<f64> = self
            .components
            .iter()
            .map(|p| p.mass.ln() + ln_unit_levy_density(p.a, t))
            .collect();
        log_sum_exp(&terms)
    }

    /// Levy density e^{-u t} sum_i nu_i(t) of the continuous part.
    pub fn continuous_density(&self, t: f64) -> f64 {
        (self.ln_summed_density(t) - self.latent * t).exp()
    }

    /// Laplace exponent of the continuous part, by quadrature.
    pub fn continuous_exponent(&self, v: f64) -> Result<f64, OpsError> {
        let f = |t: f64| {
            if t <= 0.0 {
                return 0.0;
            }
            -(-v * t).exp_m1() * self.continuous_density(t)
        };
        let scale = 1.0 / (1.0 + self.latent + v);
        Ok(integrate_breakpoints(
            f,
            &[0.0, 1e-8 * scale, 1e-4 * scale, scale, 10.0 * scale, f64::INFINITY],
            QuadOptions::rel(1e-11),
        )?
        .value)
    }

    /// Closed form sum_i M_i ((1 + u + v)^{a_i} - (1 + u)^{a_i}).
    pub fn continuous_exponent_closed(&self, v: f64) -> f64 {
        let b = 1.0 + self.latent;
        self.components
            .iter()
            .map(|p| p.mass * ((b + v).powf(p.a) - b.powf(p.a)))
            .sum()
    }

    /// ln of each component's contribution to the normalizer of the jump at
    /// a fixed atom with count n.
    fn ln_component_normalizers(&self, n: usize) -> Vec<f64> {
        let b = 1.0 + self.latent;
        self.components
            .iter()
            .map(|p| {
                let s = n as f64 - p.a;
                p.mass.ln() + p.a.ln() - ln_gamma(1.0 - p.a) + ln_gamma(s) - s * b.ln()
            })
            .collect()
    }

    /// ln int t^n e^{-u t} sum_i nu_i(t) dt in closed form.
    pub fn ln_fixed_normalizer(&self, k: usize) -> f64 {
        log_sum_exp(&self.ln_component_normalizers(self.counts[k]))
    }

    /// The same normalizer by quadrature.
    pub fn fixed_normalizer_quadrature(&self, k: usize) -> Result<f64, OpsError> {
        let n = self.counts[k] as f64;
        let f = |t: f64| {
            if t <= 0.0 {
                return 0.0;
            }
            (n * t.ln() + self.ln_summed_density(t) - self.latent * t).exp()
        };
        let b = 1.0 + self.latent;
        Ok(integrate_breakpoints(f, &[0.0, 1e-6 / b, n / b, f64::INFINITY], QuadOptions::rel(1e-11))?.value)
    }

    /// Normalized density of the jump at fixed atom k.
    pub fn fixed_jump_density(&self, k: usize, t: f64) -> f64 {
        if t <= 0.0 {
            return 0.0;
        }
        let n = self.counts[k] as f64;
        (n * t.ln() + self.ln_summed_density(t) - self.latent * t - self.ln_fixed_normalizer(k)).exp()
    }

    /// Exact draw: a component chosen by its share of the normalizer, then
    /// Gamma(n - a_i, rate 1 + u).
    pub fn sample_fixed_jump<R: Rng + ?Sized>(&self, k: usize, rng: &mut R) -> f64 {
        let n = self.counts[k];
        let ln_w = self.ln_component_normalizers(n);
        let z = log_sum_exp(&ln_w);
        let mut target = rng.random::<f64>();
        let mut pick = ln_w.len() - 1;
        for (i, w) in ln_w.iter().enumerate() {
            let p = (w - z).exp();
            if target < p {
                pick = i;
                break;
            }
            target -= p;
        }
        let shape = n as f64 - self.components[pick].a;
        Gamma::new(shape, 1.0 / (1.0 + self.latent))
            .expect("positive shape")
            .sample(rng)
    }
}

fn acceptance_probability(ln_prior_in: f64, ln_prior_out: f64, with: f64, without: f64, n: usize) -> f64 {
    let n = n as f64;
    if without <= 0.0 {
        if n > 0.0 {
            log::warn!("acceptance posterior degenerate: no mass remains without the atom");
            return 1.0;
        }
        return (ln_prior_in.exp()).clamp(0.0, 1.0);
    }
    let ln_in = ln_prior_in - n * with.ln();
    let ln_out = ln_prior_out - n * without.ln();
    if ln_out == f64::NEG_INFINITY {
        return 1.0;
    }
    1.0 / (1.0 + (ln_out - ln_in).exp())
}

/// Posterior probability that the subsampling indicator of atom k is one,
/// given n allocations among the accepted atoms and n_k of them at k.
pub fn subsample_z_posterior(
    jumps: &[f64],
    z: &[bool],
    q: f64,
    k: usize,
    n: usize,
    n_k: usize,
) -> Result<f64, OpsError> {
    if jumps.len() != z.len() || k >= jumps.len() {
        return Err(OpsError::InvalidArgument("jumps, indicators and index disagree".into()));
    }
    check_rate(q)?;
    if n_k > 0 {
        return Ok(1.0);
    }
    let without: f64 = jumps
        .iter()
        .zip(z)
        .enumerate()
        .filter(|&(i, (_, &zi))| i != k && zi)
        .map(|(_, (j, _))| j)
        .sum();
    let with = without + jumps[k];
    Ok(acceptance_probability(q.ln(), (1.0 - q).ln(), with, without, n))
}

/// Position of an atom among epoch-indexed jumps.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct EpochAtom {
    pub epoch: usize,
    pub index: usize,
}

/// Acceptance posterior at epoch `m` for an atom born at `target.epoch`,
/// with prior acceptance q^{m - m'} and totals over every epoch up to m.
pub fn hierarchical_z_posterior(
    m: usize,
    target: EpochAtom,
    jumps: &[Vec<f64>],
    z: &[Vec<bool>],
    q: f64,
    count_at_target: usize,
    total_count: usize,
) -> Result<f64, OpsError> {
    if target.epoch > m || m >= jumps.len() || jumps.len() != z.len() {
        return Err(OpsError::InvalidArgument("epoch indices out of range".into()));
    }
    check_rate(q)?;
    if jumps.iter().zip(z).any(|(j, zz)| j.len() != zz.len()) || target.index >= jumps[target.epoch].len() {
        return Err(OpsError::InvalidArgument("jumps, indicators and index disagree".into()));
    }
    if count_at_target > 0 {
        return Ok(1.0);
    }
    let mut without = 0.0;
    for e in 0..=m {
        for (i, (&j, &zi)) in jumps[e].iter().zip(&z[e]).enumerate() {
            if zi && !(e == target.epoch && i == target.index) {
                without += j;
            }
        }
    }
    let with = without + jumps[target.epoch][target.index];
    let rate = q.powi((m - target.epoch) as i32);
    Ok(acceptance_probability(
        rate.ln(),
        (1.0 - rate).ln(),
        with,
        without,
        total_count,
    ))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::levy_core::{sample_crm_threshold, UniformCube};

    fn p(a: f64, m: f64) -> NggParams {
        NggParams::new(a, m).unwrap()
    }

    #[test]
    fn parse_display_round_trip() {
        let d = p(0.5, 1.0);
        let e = OperatorExpr::parse(
            "(superpose (transition rw (subsample 0.5 (leaf m1))) (leaf m2 0.3 2))",
            d,
        )
        .unwrap();
        let again = OperatorExpr::parse(&e.to_string(), d).unwrap();
        assert_eq!(e, again);
        assert!(OperatorExpr::parse("(superpose (leaf m1))", d).is_err());
        assert!(OperatorExpr::parse("(subsample 1.5 (leaf m1))", d).is_err());
        assert!(OperatorExpr::parse("(leaf m1", d).is_err());
        assert!(OperatorExpr::parse("(bogus (leaf m1))", d).is_err());
    }

    #[test]
    fn rewrite_rules() {
        let d = p(0.5, 1.0);
        let parse = |s: &str| OperatorExpr::parse(s, d).unwrap();
        assert_eq!(
            normal_form(&parse("(subsample 0.5 (subsample 0.4 (leaf l)))")),
            parse("(subsample 0.2 (leaf l))")
        );
        assert_eq!(
            normal_form(&parse("(subsample 0.5 (transition rw (leaf l)))")),
            parse("(transition rw (subsample 0.5 (leaf l)))")
        );
        assert_eq!(
            normal_form(&parse("(subsample 0.5 (superpose (leaf a) (leaf b)))")),
            parse("(superpose (subsample 0.5 (leaf a)) (subsample 0.5 (leaf b)))")
        );
    }

    #[test]
    fn z_posterior_numeric_case() {
        let v = subsample_z_posterior(&[1.0, 1.0], &[true, true], 0.5, 1, 3, 0).unwrap();
        assert!((v - 1.0 / 9.0).abs() < 1e-15);
        assert_eq!(
            subsample_z_posterior(&[1.0, 1.0], &[true, true], 0.5, 1, 3, 2).unwrap(),
            1.0
        );
        assert_eq!(
            subsample_z_posterior(&[1.0, 1.0], &[true, true], 1.0, 1, 3, 0).unwrap(),
            1.0
        );
    }

    #[test]
    fn fixed_jump_single_component_is_gamma() {
        let post = SuperpositionPosterior::new(vec![p(0.5, 2.0)], 1.5, vec![3]).unwrap();
        let g = statrs::distribution::Gamma::new(2.5, 2.5).unwrap();
        use statrs::distribution::Continuous;
        for t in [0.1, 0.7, 1.3, 4.0] {
            assert!((post.fixed_jump_density(0, t) / g.pdf(t) - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn keyed_evaluation_reproducible() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let base = UniformCube { dim: 1 };
        let crm = sample_crm_threshold(&p(0.5, 3.0), &base, 1e-3, &mut rng).unwrap();
        let mut leaves = HashMap::new();
        leaves.insert("m".to_string(), crm.clone());
        let k = KernelRegistry::standard(1);
        let e = OperatorExpr::parse("(transition rw (subsample 0.6 (leaf m)))", p(0.5, 3.0)).unwrap();
        let x = evaluate_expr_keyed(&e, &leaves, &k, 4).unwrap();
        let y = evaluate_expr_keyed(&e, &leaves, &k, 4).unwrap();
        assert_eq!(x, y);
        assert_eq!(
            evaluate_expr_keyed(&OperatorExpr::leaf("m", crm.params), &leaves, &k, 4).unwrap(),
            crm
        );
    }
}
