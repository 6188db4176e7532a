//! Slice-truncated Gibbs sampler for mixtures driven by a normalized
//! generalized gamma measure. The state keeps every jump above the current
//! slice level L; the jumps below L enter only through their Laplace
//! exponent.

use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Gamma, Normal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::levy_core::{
    self, exp_tilted_tail, ln_unit_levy_density, ln_unit_tail, truncated_exponent, JumpMethod, LevyError, NggParams,
};
use crate::log_concave::grid_inverse_cdf;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum SliceError {
    #[error("configuration error: {0}")]
    Config(String),
    #[error("data error: {0}")]
    Data(String),
    #[error(transparent)]
    Levy(#[from] LevyError),
    #[error("numerical failure: {0}")]
    Numerical(String),
    #[error("state invariant broken: {detail}; state: {dump}")]
    Invariant { detail: String, dump: String },
}

/// Kernel family of the mixture: likelihood g0(x | theta) and prior h(theta).
pub trait ComponentModel: Sync {
    fn data_dim(&self) -> usize;
    fn ln_likelihood(&self, x: &[f64], theta: &[f64]) -> f64;
    fn ln_prior(&self, theta: &[f64]) -> f64;
    fn sample_prior(&self, rng: &mut dyn RngCore) -> Vec<f64>;
    /// Exact draw from the posterior of theta given the assigned points, or
    /// `None` when the model is not conjugate.
    fn sample_posterior(&self, data: &[&[f64]], rng: &mut dyn RngCore) -> Option<Vec<f64>>;
}

/// Gaussian kernel with known standard deviation and an isotropic Gaussian
/// prior on the component mean.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct GaussianMeanModel {
    pub obs_sd: f64,
    pub prior_mean: Vec<f64>,
    pub prior_sd: f64,
}

impl GaussianMeanModel {
    pub fn new(obs_sd: f64, prior_mean: Vec<f64>, prior_sd: f64) -> Result<Self, SliceError> {
        if !(obs_sd > 0.0 && prior_sd > 0.0) || prior_mean.is_empty() {
            return Err(SliceError::Config(
                "gaussian model needs positive sds and a non-empty prior mean".into(),
            ));
        }
        Ok(GaussianMeanModel {
            obs_sd,
            prior_mean,
            prior_sd,
        })
    }
}

fn ln_normal(x: &[f64], mean: &[f64], sd: f64) -> f64 {
    let ss: f64 = x.iter().zip(mean).map(|(a, b)| (a - b) * (a - b)).sum();
    -0.5 * ss / (sd * sd) - x.len() as f64 * (sd.ln() + 0.5 * (2.0 * std::f64::consts::PI).ln())
}

impl ComponentModel for GaussianMeanModel {
    fn data_dim(&self) -> usize {
        self.prior_mean.len()
    }
    fn ln_likelihood(&self, x: &[f64], theta: &[f64]) -> f64 {
        ln_normal(x, theta, self.obs_sd)
    }
    fn ln_prior(&self, theta: &[f64]) -> f64 {
        ln_normal(theta, &self.prior_mean, self.prior_sd)
    }
    fn sample_prior(&self, rng: &mut dyn RngCore) -> Vec<f64> {
        let n = Normal::new(0.0, self.prior_sd).expect("validated sd");
        self.prior_mean.iter().map(|m| m + n.sample(rng)).collect()
    }
    fn sample_posterior(&self, data: &[&[f64]], rng: &mut dyn RngCore) -> Option<Vec<f64>> {
        let prec0 = 1.0 / (self.prior_sd * self.prior_sd);
        let prec1 = 1.0 / (self.obs_sd * self.obs_sd);
        let prec = prec0 + data.len() as f64 * prec1;
        let sd = prec.sqrt().recip();
        let n = Normal::new(0.0, sd).expect("positive sd");
        Some(
            (0..self.prior_mean.len())
                .map(|d| {
                    let sum: f64 = data.iter().map(|x| x[d]).sum();
                    (self.prior_mean[d] * prec0 + sum * prec1) / prec + n.sample(rng)
                })
                .collect(),
        )
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum MassPrior {
    Fixed { mass: f64 },
    Gamma { shape: f64, rate: f64 },
}

impl Default for MassPrior {
    fn default() -> Self {
        MassPrior::Gamma { shape: 1.0, rate: 1.0 }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SliceConfig {
    pub a: f64,
    pub mass_prior: MassPrior,
    /// Random-walk scale for non-conjugate component updates.
    pub proposal_sd: Option<f64>,
    pub mh_steps: usize,
    /// Points in the inverse-CDF fallback grid for U_N.
    pub grid_points: usize,
    /// Acceptance rate below which the U_N step switches to the grid.
    pub acceptance_floor: f64,
}

impl SliceConfig {
    pub fn new(a: f64, mass_prior: MassPrior) -> Result<Self, SliceError> {
        let c = SliceConfig {
            a,
            mass_prior,
            proposal_sd: None,
            mh_steps: 5,
            grid_points: 2048,
            acceptance_floor: 1e-4,
        };
        c.validate()?;
        Ok(c)
    }

    pub fn validate(&self) -> Result<(), SliceError> {
        if !(self.a > 0.0 && self.a < 1.0) {
            return Err(SliceError::Config(format!("a = {} not in (0, 1)", self.a)));
        }
        match self.mass_prior {
            MassPrior::Fixed { mass } if !(mass > 0.0) => {
                Err(SliceError::Config(format!("fixed mass {mass} must be positive")))
            }
            MassPrior::Gamma { shape, rate } if !(shape > 0.0 && rate > 0.0) => Err(SliceError::Config(format!(
                "mass prior Gamma({shape}, {rate}) needs positive parameters"
            ))),
            _ => Ok(()),
        }
    }

    fn params(&self, mass: f64) -> Result<NggParams, SliceError> {
        Ok(NggParams::new(self.a, mass)?)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Component {
    pub jump: f64,
    pub theta: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MixtureState {
    /// Every component whose jump exceeds `level`; occupied ones first.
    pub components: Vec<Component>,
    pub allocations: Vec<usize>,
    pub slices: Vec<f64>,
    /// Latent relative mass U_N.
    pub latent: f64,
    pub mass: f64,
    /// Slice level L = min slices.
    pub level: f64,
}

impl MixtureState {
    pub fn occupancy(&self) -> Vec<usize> {
        let mut n = vec![0; self.components.len()];
        for &s in &self.allocations {
            n[s] += 1;
        }
        n
    }

    pub fn occupied_count(&self) -> usize {
        self.occupancy().iter().filter(|&&c| c > 0).count()
    }

    pub fn total_jump(&self) -> f64 {
        self.components.iter().map(|c| c.jump).sum()
    }

    /// Allocation labels renumbered 0.. in order of first appearance.
    pub fn compact_labels(&self) -> Vec<usize> {
        let mut map = vec![usize::MAX; self.components.len()];
        let mut next = 0;
        self.allocations
            .iter()
            .map(|&s| {
                if map[s] == usize::MAX {
                    map[s] = next;
                    next += 1;
                }
                map[s]
            })
            .collect()
    }
}

/// Verifies L = min u_i, 0 < u_i <= J_{s_i} and J_k > L for every k.
pub fn check_invariants(state: &MixtureState) -> Result<(), SliceError> {
    let fail = |detail: String| {
        Err(SliceError::Invariant {
            detail,
            dump: serde_json::to_string(state).unwrap_or_default(),
        })
    };
    if state.allocations.len() != state.slices.len() {
        return fail("allocation and slice counts differ".into());
    }
    let mut min = f64::INFINITY;
    for (i, (&s, &u)) in state.allocations.iter().zip(&state.slices).enumerate() {
        let Some(c) = state.components.get(s) else {
            return fail(format!("item {i} allocated to missing component {s}"));
        };
        if !(u > 0.0 && u <= c.jump) {
            return fail(format!("slice {u} of item {i} outside (0, {}]", c.jump));
        }
        min = min.min(u);
    }
    if min != state.level {
        return fail(format!("level {} differs from minimum slice {min}", state.level));
    }
    if let Some(c) = state.components.iter().find(|c| !(c.jump > state.level)) {
        return fail(format!("jump {} not above level {}", c.jump, state.level));
    }
    if !(state.latent > 0.0 && state.mass > 0.0) {
        return fail(format!(
            "latent {} and mass {} must be positive",
            state.latent, state.mass
        ));
    }
    Ok(())
}

fn debug_check(state: &MixtureState) -> Result<(), SliceError> {
    if cfg!(debug_assertions) {
        check_invariants(state)?;
    }
    Ok(())
}

fn check_data(data: &[Vec<f64>], model: &dyn ComponentModel) -> Result<(), SliceError> {
    if data.is_empty() {
        return Err(SliceError::Data("no observations".into()));
    }
    let d = model.data_dim();
    for (i, x) in data.iter().enumerate() {
        if x.len() != d {
            return Err(SliceError::Data(format!(
                "row {} has {} values, expected {d}",
                i + 1,
                x.len()
            )));
        }
        if x.iter().any(|v| !v.is_finite()) {
            return Err(SliceError::Data(format!("row {} has a non-finite value", i + 1)));
        }
    }
    Ok(())
}

/// Parses headerless comma-separated rows of numbers, one observation per
/// row. Blank lines are skipped; rows must all have the same width and at
/// least one row is required.
pub fn parse_data_csv(text: &str) -> Result<Vec<Vec<f64>>, SliceError> {
    let mut rows: Vec<Vec<f64>> = Vec::new();
    for (i, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() {
            continue;
        }
        let row = line
            .split(',')
            .map(|f| f.trim().parse::<f64>())
            .collect::<Result<Vec<f64>, _>>()
            .map_err(|e| SliceError::Data(format!("line {}: {e}", i + 1)))?;
        if let Some(first) = rows.first() {
            if first.len() != row.len() {
                return Err(SliceError::Data(format!(
                    "line {}: {} columns, expected {}",
                    i + 1,
                    row.len(),
                    first.len()
                )));
            }
        }
        rows.push(row);
    }
    if rows.is_empty() {
        return Err(SliceError::Data("no observations".into()));
    }
    Ok(rows)
}

/// One occupied component with jump Gamma(N - a, 1), slices below it, mass
/// from the prior, U_N from Gamma(N, J_1) and fresh jumps above the level.
pub fn initial_state<R: RngCore>(
    data: &[Vec<f64>],
    model: &dyn ComponentModel,
    config: &SliceConfig,
    rng: &mut R,
) -> Result<MixtureState, SliceError> {
    config.validate()?;
    check_data(data, model)?;
    let n = data.len();
    let mass = match config.mass_prior {
        MassPrior::Fixed { mass } => mass,
        MassPrior::Gamma { shape, rate } => gamma_draw(shape, rate, rng)?,
    };
    let jump = gamma_draw(n as f64 - config.a, 1.0, rng)?;
    let refs: Vec<&[f64]> = data.iter().map(|x| x.as_slice()).collect();
    let theta = model
        .sample_posterior(&refs, rng)
        .unwrap_or_else(|| model.sample_prior(rng));
    let latent = gamma_draw(n as f64, jump, rng)?;
    let mut state = MixtureState {
        components: vec![Component { jump, theta }],
        allocations: vec![0; n],
        slices: vec![0.0; n],
        latent,
        mass,
        level: 0.0,
    };
    sample_slices(&mut state, rng)?;
    sample_new_jumps(&mut state, model, config, rng)?;
    Ok(state)
}

fn gamma_draw<R: Rng + ?Sized>(shape: f64, rate: f64, rng: &mut R) -> Result<f64, SliceError> {
    Gamma::new(shape, 1.0 / rate)
        .map(|g| g.sample(rng))
        .map_err(|e| SliceError::Numerical(format!("Gamma({shape}, {rate}): {e}")))
}

/// s_i drawn over the components with J_k > u_i, proportional to
/// g0(x_i | theta_k).
pub fn sample_allocations<R: RngCore>(
    state: &mut MixtureState,
    data: &[Vec<f64>],
    model: &dyn ComponentModel,
    rng: &mut R,
) -> Result<(), SliceError> {
    let mut ln_w = Vec::with_capacity(state.components.len());
    for (i, x) in data.iter().enumerate() {
        let u = state.slices[i];
        ln_w.clear();
        for (k, c) in state.components.iter().enumerate() {
            if c.jump > u {
                ln_w.push((k, model.ln_likelihood(x, &c.theta)));
            }
        }
        if ln_w.is_empty() {
            return Err(SliceError::Numerical(format!(
                "no component above slice {u} for item {i}"
            )));
        }
        let top = ln_w.iter().map(|w| w.1).fold(f64::NEG_INFINITY, f64::max);
        let total: f64 = ln_w.iter().map(|w| (w.1 - top).exp()).sum();
        let mut target = rng.random::<f64>() * total;
        let mut pick = ln_w[ln_w.len() - 1].0;
        for &(k, w) in ln_w.iter() {
            let e = (w - top).exp();
            if target < e {
                pick = k;
                break;
            }
            target -= e;
        }
        state.allocations[i] = pick;
    }
    Ok(())
}

/// U_N from its conditional: Gamma(N, sum J) proposals accepted with
/// probability exp(-truncated exponent at U); a grid inverse-CDF on log U
/// takes over if acceptance collapses.
pub fn sample_latent_mass<R: RngCore>(
    state: &mut MixtureState,
    config: &SliceConfig,
    rng: &mut R,
) -> Result<(), SliceError> {
    let p = config.params(state.mass)?;
    let n = state.allocations.len() as f64;
    let total = state.total_jump();
    let proposal = Gamma::new(n, 1.0 / total).map_err(|e| SliceError::Numerical(e.to_string()))?;
    let max_tries = (1.0 / config.acceptance_floor).ceil() as usize;
    for _ in 0..max_tries {
        let u = proposal.sample(rng);
        let penalty = truncated_exponent(&p, u, state.level)?;
        if rng.random::<f64>() < (-penalty).exp() {
            state.latent = u;
            return Ok(());
        }
    }
    log::warn!(
        "latent-mass acceptance below {}; using grid fallback",
        config.acceptance_floor
    );
    let level = state.level;
    let h = |s: f64| {
        let u = s.exp();
        n * s - u * total - truncated_exponent(&p, u, level).unwrap_or(f64::INFINITY)
    };
    let centre = (n / total).ln();
    let half = 12.0 * (1.0 / n.sqrt()).max(0.05) + 5.0;
    let s = grid_inverse_cdf(&h, centre - half, centre + half, config.grid_points, rng);
    state.latent = s.exp();
    Ok(())
}

/// Occupied components from their posterior (exact when conjugate, else
/// random-walk Metropolis); empty ones from the prior.
pub fn sample_components<R: RngCore>(
    state: &mut MixtureState,
    data: &[Vec<f64>],
    model: &dyn ComponentModel,
    config: &SliceConfig,
    rng: &mut R,
) -> Result<(), SliceError> {
    let mut members: Vec<Vec<&[f64]>> = vec![Vec::new(); state.components.len()];
    for (i, &s) in state.allocations.iter().enumerate() {
        members[s].push(&data[i]);
    }
    for (k, comp) in state.components.iter_mut().enumerate() {
        if members[k].is_empty() {
            comp.theta = model.sample_prior(rng);
            continue;
        }
        if let Some(t) = model.sample_posterior(&members[k], rng) {
            comp.theta = t;
            continue;
        }
        let sd = config
            .proposal_sd
            .ok_or_else(|| SliceError::Config("non-conjugate model requires a proposal scale".into()))?;
        let step = Normal::new(0.0, sd).map_err(|e| SliceError::Config(e.to_string()))?;
        let target = |t: &[f64]| model.ln_prior(t) + members[k].iter().map(|x| model.ln_likelihood(x, t)).sum::<f64>();
        let mut current = target(&comp.theta);
        for _ in 0..config.mh_steps {
            let cand: Vec<f64> = comp.theta.iter().map(|v| v + step.sample(rng)).collect();
            let value = target(&cand);
            if rng.random::<f64>().ln() < value - current {
                comp.theta = cand;
                current = value;
            }
        }
    }
    Ok(())
}

/// Occupied jumps J_k ~ Gamma(n_k - a, rate 1 + U), with the slices
/// integrated out.
pub fn sample_fixed_jumps<R: RngCore>(
    state: &mut MixtureState,
    config: &SliceConfig,
    rng: &mut R,
) -> Result<(), SliceError> {
    let occ = state.occupancy();
    let rate = 1.0 + state.latent;
    for (k, comp) in state.components.iter_mut().enumerate() {
        if occ[k] > 0 {
            comp.jump = gamma_draw(occ[k] as f64 - config.a, rate, rng)?;
        }
    }
    Ok(())
}

/// u_i ~ Uniform(0, J_{s_i}] and L = min u_i.
pub fn sample_slices<R: RngCore>(state: &mut MixtureState, rng: &mut R) -> Result<(), SliceError> {
    let mut level = f64::INFINITY;
    for (i, &s) in state.allocations.iter().enumerate() {
        let j = state.components[s].jump;
        let u = j * (1.0 - rng.random::<f64>());
        state.slices[i] = u;
        level = level.min(u);
    }
    if !(level > 0.0) {
        return Err(SliceError::Numerical("slice level collapsed to zero".into()));
    }
    state.level = level;
    Ok(())
}

/// Drops the unoccupied components and regenerates them: a Poisson number
/// of jumps above L from the intensity tilted by e^{-U t}, with parameters
/// from the prior. Occupied components are moved to the front.
pub fn sample_new_jumps<R: RngCore>(
    state: &mut MixtureState,
    model: &dyn ComponentModel,
    config: &SliceConfig,
    rng: &mut R,
) -> Result<(), SliceError> {
    let occ = state.occupancy();
    let mut remap = vec![usize::MAX; state.components.len()];
    let mut kept = Vec::new();
    for (k, comp) in state.components.drain(..).enumerate() {
        if occ[k] > 0 {
            remap[k] = kept.len();
            kept.push(comp);
        }
    }
    for s in state.allocations.iter_mut() {
        *s = remap[*s];
    }
    let p = config.params(state.mass)?;
    let jumps = levy_core::sample_tilted_jumps_above(&p, state.latent, state.level, JumpMethod::Rejection, rng)?;
    for jump in jumps {
        kept.push(Component {
            jump,
            theta: model.sample_prior(rng),
        });
    }
    state.components = kept;
    Ok(())
}

/// Mass from Gamma(alpha + K, beta + |Q(-a, L)| + truncated exponent at U)
/// under a Gamma(alpha, beta) prior; K counts every jump above L.
pub fn sample_mass<R: RngCore>(state: &mut MixtureState, config: &SliceConfig, rng: &mut R) -> Result<(), SliceError> {
    match config.mass_prior {
        MassPrior::Fixed { mass } => {
            state.mass = mass;
            Ok(())
        }
        MassPrior::Gamma { shape, rate } => {
            let unit = config.params(1.0)?;
            let extra =
                ln_unit_tail(config.a, state.level)?.exp() + truncated_exponent(&unit, state.latent, state.level)?;
            state.mass = gamma_draw(shape + state.components.len() as f64, rate + extra, rng)?;
            Ok(())
        }
    }
}

/// One full sweep: allocations, U_N, component parameters, occupied jumps,
/// slices, unoccupied jumps, mass.
pub fn sweep<R: RngCore>(
    state: &mut MixtureState,
    data: &[Vec<f64>],
    model: &dyn ComponentModel,
    config: &SliceConfig,
    rng: &mut R,
) -> Result<(), SliceError> {
    sample_allocations(state, data, model, rng)?;
    debug_check(state)?;
    sample_latent_mass(state, config, rng)?;
    sample_components(state, data, model, config, rng)?;
    sample_fixed_jumps(state, config, rng)?;
    sample_slices(state, rng)?;
    sample_new_jumps(state, model, config, rng)?;
    debug_check(state)?;
    sample_mass(state, config, rng)?;
    check_invariants(state)
}

/// Log of the joint density of data, allocations, slices, jumps above L,
/// component parameters and U_N, up to a constant.
pub fn log_joint(
    state: &MixtureState,
    data: &[Vec<f64>],
    model: &dyn ComponentModel,
    config: &SliceConfig,
) -> Result<f64, SliceError> {
    let p = config.params(state.mass)?;
    let n = data.len() as f64;
    let u = state.latent;
    let mut lj = -u * state.total_jump() - truncated_exponent(&p, u, state.level)? + (n - 1.0) * u.ln();
    let ln_tail = ln_unit_tail(config.a, state.level)?;
    for c in &state.components {
        lj += ln_unit_levy_density(config.a, c.jump) - ln_tail + model.ln_prior(&c.theta);
    }
    for (i, x) in data.iter().enumerate() {
        let c = &state.components[state.allocations[i]];
        if !(state.slices[i] <= c.jump) {
            return Ok(f64::NEG_INFINITY);
        }
        lj += model.ln_likelihood(x, &c.theta);
    }
    Ok(lj)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChainRecord {
    pub iter: usize,
    /// Number of occupied components.
    #[serde(rename = "K")]
    pub k: usize,
    #[serde(rename = "M")]
    pub mass: f64,
    #[serde(rename = "U_N")]
    pub latent: f64,
    #[serde(rename = "L")]
    pub level: f64,
    pub log_joint: f64,
    pub allocations: Vec<usize>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RunSettings {
    pub iterations: usize,
    pub burn_in: usize,
    pub thin: usize,
    pub seed: u64,
}

/// Runs `iterations` sweeps after `burn_in` and keeps every `thin`-th state.
pub fn run_chain(
    data: &[Vec<f64>],
    model: &dyn ComponentModel,
    config: &SliceConfig,
    settings: &RunSettings,
) -> Result<Vec<ChainRecord>, SliceError> {
    let mut out = Vec::new();
    run_chain_with(data, model, config, settings, |r| {
        out.push(r);
        Ok(())
    })?;
    Ok(out)
}

/// Streaming form of [`run_chain`]: each kept record is handed to `sink`.
pub fn run_chain_with<F>(
    data: &[Vec<f64>],
    model: &dyn ComponentModel,
    config: &SliceConfig,
    settings: &RunSettings,
    mut sink: F,
) -> Result<(), SliceError>
where
    F: FnMut(ChainRecord) -> Result<(), SliceError>,
{
    if settings.thin == 0 {
        return Err(SliceError::Config("thin must be >= 1".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(settings.seed);
    let mut state = initial_state(data, model, config, &mut rng)?;
    for it in 0..settings.burn_in + settings.iterations {
        sweep(&mut state, data, model, config, &mut rng)?;
        if it >= settings.burn_in && (it - settings.burn_in).is_multiple_of(settings.thin) {
            sink(ChainRecord {
                iter: it - settings.burn_in,
                k: state.occupied_count(),
                mass: state.mass,
                latent: state.latent,
                level: state.level,
                log_joint: log_joint(&state, data, model, config)?,
                allocations: state.compact_labels(),
            })?;
        }
    }
    Ok(())
}

/// Expected number of jumps the new-jump step will add.
pub fn expected_new_jumps(state: &MixtureState, config: &SliceConfig) -> Result<f64, SliceError> {
    Ok(exp_tilted_tail(&config.params(state.mass)?, state.latent, state.level)?)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn toy() -> (Vec<Vec<f64>>, GaussianMeanModel, SliceConfig) {
        let data = vec![vec![0.1], vec![-0.2], vec![5.0], vec![5.3]];
        let model = GaussianMeanModel::new(1.0, vec![0.0], 5.0).unwrap();
        let config = SliceConfig::new(0.5, MassPrior::default()).unwrap();
        (data, model, config)
    }

    #[test]
    fn slices_respect_jumps() {
        let (data, model, config) = toy();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut state = initial_state(&data, &model, &config, &mut rng).unwrap();
        for _ in 0..50 {
            sweep(&mut state, &data, &model, &config, &mut rng).unwrap();
            for (i, &s) in state.allocations.iter().enumerate() {
                assert!(state.slices[i] <= state.components[s].jump);
            }
            let min = state.slices.iter().copied().fold(f64::INFINITY, f64::min);
            assert_eq!(min, state.level);
            assert!(state.components.iter().all(|c| c.jump > state.level));
        }
    }

    #[test]
    fn single_component_slices_bounded() {
        let mut state = MixtureState {
            components: vec![Component {
                jump: 2.0,
                theta: vec![0.0],
            }],
            allocations: vec![0],
            slices: vec![0.0],
            latent: 1.0,
            mass: 1.0,
            level: 0.0,
        };
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        for _ in 0..100 {
            sample_slices(&mut state, &mut rng).unwrap();
            assert!(state.slices[0] > 0.0 && state.slices[0] <= 2.0);
        }
    }

    #[test]
    fn non_conjugate_without_proposal_is_config_error() {
        struct Opaque;
        impl ComponentModel for Opaque {
            fn data_dim(&self) -> usize {
                1
            }
            fn ln_likelihood(&self, x: &[f64], t: &[f64]) -> f64 {
                -0.5 * (x[0] - t[0]).powi(2)
            }
            fn ln_prior(&self, t: &[f64]) -> f64 {
                -0.5 * t[0] * t[0]
            }
            fn sample_prior(&self, rng: &mut dyn RngCore) -> Vec<f64> {
                vec![rng.random::<f64>()]
            }
            fn sample_posterior(&self, _: &[&[f64]], _: &mut dyn RngCore) -> Option<Vec<f64>> {
                None
            }
        }
        let data = vec![vec![0.3]];
        let config = SliceConfig::new(0.5, MassPrior::Fixed { mass: 1.0 }).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut state = initial_state(&data, &Opaque, &config, &mut rng).unwrap();
        let r = sample_components(&mut state, &data, &Opaque, &config, &mut rng);
        assert!(matches!(r, Err(SliceError::Config(_))));
    }

    #[test]
    fn rejects_empty_and_ragged_data() {
        let (_, model, config) = toy();
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        assert!(matches!(
            initial_state(&[], &model, &config, &mut rng),
            Err(SliceError::Data(_))
        ));
        let ragged = vec![vec![0.0], vec![1.0, 2.0]];
        assert!(matches!(
            initial_state(&ragged, &model, &config, &mut rng),
            Err(SliceError::Data(_))
        ));
    }

    #[test]
    fn csv_rows_parse() {
        let rows = parse_data_csv("1.5,2\n\n-3,4e-1\n").unwrap();
        assert_eq!(rows, vec![vec![1.5, 2.0], vec![-3.0, 0.4]]);
        assert!(parse_data_csv("1,2\n3\n").is_err());
        assert!(parse_data_csv("1,x\n").is_err());
        assert!(parse_data_csv("").is_err());
        assert!(parse_data_csv("\n \n").is_err());
    }

    #[test]
    fn chain_is_reproducible() {
        let (data, model, config) = toy();
        let s = RunSettings {
            iterations: 20,
            burn_in: 5,
            thin: 2,
            seed: 99,
        };
        let a = run_chain(&data, &model, &config, &s).unwrap();
        let b = run_chain(&data, &model, &config, &s).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.len(), 10);
    }
}
