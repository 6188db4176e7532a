use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::io::Write;
use std::path::PathBuf;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use nrmkit::dependency_ops::{evaluate_expr_keyed, hash_name, normal_form, KernelRegistry, OperatorExpr};
use nrmkit::levy_core::{
    normalize, sample_crm_decreasing, sample_crm_threshold, BaseMeasure, IsotropicGaussian, NggParams, UniformCube,
};
use nrmkit::moments::{
    cov_subsampling, cov_subsampling_lower_region, cov_superposition, cov_superposition_lower_region, cov_transition,
    monte_carlo_moments, ngg_variance_closed, nrm_mean, nrm_variance_quadrature, Family, McSettings, MomentOp,
};
use nrmkit::ngg_posterior::sequential_sample;
use nrmkit::slice_sampler::{
    parse_data_csv, run_chain_with, GaussianMeanModel, MassPrior, RunSettings, SliceConfig, SliceError,
};
use nrmkit::stats::Estimate;
use nrmkit::tak::{TableOptions, TakTable};
use nrmkit::verify::run_verify;

use crate::{
    open_out, AlgebraArgs, Base, CliError, Common, Construction, FamilyArg, FitArgs, Meta, MomentKind, MomentsArgs,
    PowerlawArgs, RunConfig, SampleArgs, TakArgs, VerifyArgs, VERSION,
};

fn params(c: &Common, default_a: f64, default_mass: f64) -> Result<NggParams, CliError> {
    Ok(NggParams::new(
        c.a.unwrap_or(default_a),
        c.mass.unwrap_or(default_mass),
    )?)
}

fn base_measure(base: Base, dim: usize) -> Result<Box<dyn BaseMeasure>, CliError> {
    if dim == 0 {
        return Err(CliError::Config("--dim must be at least 1".into()));
    }
    Ok(match base {
        Base::Uniform => Box::new(UniformCube { dim }),
        Base::Gaussian => Box::new(IsotropicGaussian {
            mean: vec![0.0; dim],
            sd: 1.0,
        }),
    })
}

fn write_json<T: Serialize>(out: Option<&PathBuf>, value: &T) -> Result<(), CliError> {
    let mut w = open_out(out)?;
    serde_json::to_writer_pretty(&mut w, value)?;
    writeln!(w)?;
    w.flush()?;
    Ok(())
}

pub fn sample(c: &Common, args: &SampleArgs) -> Result<(), CliError> {
    let p = params(c, 0.5, 1.0)?;
    let base = base_measure(args.base, args.dim)?;
    let mut rng = ChaCha8Rng::seed_from_u64(c.seed());
    let crm = match args.construction {
        Construction::Decreasing => sample_crm_decreasing(&p, base.as_ref(), args.kmax, &mut rng)?,
        Construction::Threshold => sample_crm_threshold(&p, base.as_ref(), args.z, &mut rng)?,
    };
    // No atom above the truncation level leaves nothing to normalize.
    let nrm = if crm.atoms.is_empty() {
        None
    } else {
        Some(normalize(&crm)?)
    };
    let config = RunConfig {
        subcommand: "sample",
        common: c,
        args,
    };
    #[derive(Serialize)]
    struct Output<'a, C: Serialize> {
        #[serde(flatten)]
        meta: Meta<'a, C>,
        crm: nrmkit::levy_core::CrmRealization,
        nrm: Option<nrmkit::levy_core::NrmRealization>,
    }
    write_json(
        c.out.as_ref(),
        &Output {
            meta: Meta {
                version: VERSION,
                seed: c.seed(),
                config: &config,
            },
            crm,
            nrm,
        },
    )
}

/// Keys of the `fit` configuration file.
#[derive(Debug, Clone, Default, Deserialize, Serialize)]
#[serde(deny_unknown_fields)]
pub struct FitFile {
    pub a: Option<f64>,
    #[serde(rename = "M")]
    pub mass: Option<f64>,
    #[serde(rename = "M_shape")]
    pub mass_shape: Option<f64>,
    #[serde(rename = "M_rate")]
    pub mass_rate: Option<f64>,
    pub iterations: Option<usize>,
    pub burn_in: Option<usize>,
    pub thin: Option<usize>,
    pub seed: Option<u64>,
    pub model: Option<String>,
    pub obs_sd: Option<f64>,
    pub prior_mean: Option<Vec<f64>>,
    pub prior_sd: Option<f64>,
    pub proposal_sd: Option<f64>,
}

/// Fully resolved `fit` settings, as embedded in the chain header.
#[derive(Debug, Clone, Serialize)]
pub struct FitSettings {
    pub data: PathBuf,
    pub a: f64,
    pub mass_prior: MassPrior,
    pub model: String,
    pub obs_sd: f64,
    pub prior_mean: Vec<f64>,
    pub prior_sd: f64,
    pub proposal_sd: Option<f64>,
    pub iterations: usize,
    pub burn_in: usize,
    pub thin: usize,
    pub seed: u64,
}

fn resolve_fit(c: &Common, args: &FitArgs, dim: usize) -> Result<FitSettings, CliError> {
    let file: FitFile = match &args.config {
        Some(path) => {
            let text = std::fs::read_to_string(path)
                .map_err(|e| CliError::Config(format!("cannot read {}: {e}", path.display())))?;
            toml::from_str(&text).map_err(|e| CliError::Config(format!("config {}: {e}", path.display())))?
        }
        None => FitFile::default(),
    };
    let mass_prior = match (c.mass.or(file.mass), file.mass_shape, file.mass_rate) {
        (Some(mass), None, None) => MassPrior::Fixed { mass },
        (None, shape, rate) => MassPrior::Gamma {
            shape: shape.unwrap_or(1.0),
            rate: rate.unwrap_or(1.0),
        },
        _ => return Err(CliError::Config("give either M or M_shape/M_rate, not both".into())),
    };
    let model = file.model.unwrap_or_else(|| "gaussian".into());
    if model != "gaussian" {
        return Err(CliError::Config(format!(
            "unknown model family '{model}'; supported: gaussian"
        )));
    }
    Ok(FitSettings {
        data: args.data.clone(),
        a: c.a.or(file.a).unwrap_or(0.5),
        mass_prior,
        model,
        obs_sd: file.obs_sd.unwrap_or(1.0),
        prior_mean: file.prior_mean.unwrap_or_else(|| vec![0.0; dim]),
        prior_sd: file.prior_sd.unwrap_or(10.0),
        proposal_sd: file.proposal_sd,
        iterations: args.iters.or(file.iterations).unwrap_or(1000),
        burn_in: args.burn_in.or(file.burn_in).unwrap_or(200),
        thin: args.thin.or(file.thin).unwrap_or(1),
        seed: c.seed.or(file.seed).unwrap_or(1),
    })
}

pub fn fit(c: &Common, args: &FitArgs) -> Result<(), CliError> {
    let text = std::fs::read_to_string(&args.data)
        .map_err(|e| CliError::Config(format!("cannot read {}: {e}", args.data.display())))?;
    let data = parse_data_csv(&text)?;
    let s = resolve_fit(c, args, data[0].len())?;
    let model = GaussianMeanModel::new(s.obs_sd, s.prior_mean.clone(), s.prior_sd)?;
    let mut config = SliceConfig::new(s.a, s.mass_prior)?;
    config.proposal_sd = s.proposal_sd;
    config.validate()?;
    let settings = RunSettings {
        iterations: s.iterations,
        burn_in: s.burn_in,
        thin: s.thin,
        seed: s.seed,
    };
    let mut w = open_out(c.out.as_ref())?;
    #[derive(Serialize)]
    struct Header<'a> {
        #[serde(flatten)]
        meta: Meta<'a, FitSettings>,
    }
    serde_json::to_writer(
        &mut w,
        &Header {
            meta: Meta {
                version: VERSION,
                seed: s.seed,
                config: &s,
            },
        },
    )?;
    writeln!(w)?;
    if s.iterations > 0 {
        run_chain_with(&data, &model, &config, &settings, |r| {
            let line = serde_json::to_string(&r).map_err(|e| SliceError::Numerical(e.to_string()))?;
            writeln!(w, "{line}").map_err(|e| SliceError::Data(format!("write failed: {e}")))
        })?;
    }
    w.flush()?;
    Ok(())
}

/// Log-spaced item counts in [1, n], always including n.
fn growth_grid(n: usize, per_decade: usize) -> Vec<usize> {
    let mut grid = BTreeSet::new();
    let steps = ((n as f64).log10() * per_decade as f64).ceil() as usize;
    for i in 0..=steps {
        let v = 10f64.powf(i as f64 / per_decade as f64).round() as usize;
        grid.insert(v.clamp(1, n));
    }
    grid.insert(n);
    grid.into_iter().collect()
}

pub fn powerlaw(c: &Common, args: &PowerlawArgs) -> Result<(), CliError> {
    let p = params(c, 0.5, 10.0)?;
    if args.n == 0 || args.runs == 0 || args.per_decade == 0 {
        return Err(CliError::Config("--n, --runs and --per-decade must be positive".into()));
    }
    let runs: Vec<_> = (0..args.runs)
        .into_par_iter()
        .map(|r| {
            let mut rng = ChaCha8Rng::seed_from_u64(c.seed());
            rng.set_stream(r as u64);
            sequential_sample(&p, args.n, &mut rng)
        })
        .collect::<Result<_, _>>()?;
    let prefix = c.out.clone().unwrap_or_else(|| PathBuf::from("powerlaw"));
    let with_suffix = |s: &str| {
        let mut name = prefix.clone().into_os_string();
        name.push(s);
        PathBuf::from(name)
    };
    let config = RunConfig {
        subcommand: "powerlaw",
        common: c,
        args,
    };
    let meta = serde_json::to_string(&Meta {
        version: VERSION,
        seed: c.seed(),
        config: &config,
    })?;
    let grid = growth_grid(args.n, args.per_decade);
    let mut w = open_out(Some(&with_suffix("_growth.csv")))?;
    writeln!(w, "# {meta}")?;
    writeln!(w, "n,K_n,run_id")?;
    for (r, s) in runs.iter().enumerate() {
        for &n in &grid {
            writeln!(w, "{n},{},{r}", s.clusters_after[n - 1])?;
        }
    }
    w.flush()?;
    let mut sizes: BTreeMap<usize, u64> = BTreeMap::new();
    for s in &runs {
        for &size in &s.counts {
            *sizes.entry(size).or_default() += 1;
        }
    }
    let mut w = open_out(Some(&with_suffix("_sizes.csv")))?;
    writeln!(w, "# {meta}")?;
    writeln!(w, "cluster_size,count")?;
    for (size, count) in sizes {
        writeln!(w, "{size},{count}")?;
    }
    w.flush()?;
    Ok(())
}

#[derive(Serialize)]
struct McOut {
    value: f64,
    se: f64,
    reps: usize,
}

impl McOut {
    fn new(e: Estimate, reps: usize) -> Self {
        McOut {
            value: e.value,
            se: e.se,
            reps,
        }
    }
}

pub fn moments(c: &Common, args: &MomentsArgs) -> Result<(), CliError> {
    let p = params(c, 0.5, 1.0)?;
    let family = match args.family {
        FamilyArg::Ngg => Family::Ngg { a: p.a },
        FamilyArg::Dp => Family::Dirichlet,
    };
    let need = |v: Option<f64>, flag: &str| v.ok_or_else(|| CliError::Config(format!("--op needs {flag}")));
    let masses = args.masses.clone().unwrap_or_else(|| vec![p.mass / 2.0, p.mass / 2.0]);
    let (closed, formula, lower_region, op, mc_mass) = match args.op {
        MomentKind::Mean => (Some(nrm_mean(args.pb)?), None, None, MomentOp::Mean, p.mass),
        MomentKind::Var => {
            let closed = match family {
                Family::Ngg { a } => Some(ngg_variance_closed(a, p.mass, args.pb)?),
                Family::Dirichlet => Some(args.pb * (1.0 - args.pb) / (p.mass + 1.0)),
            };
            let quad = nrm_variance_quadrature(family, p.mass, args.pb)?;
            (closed, Some(quad), None, MomentOp::Variance, p.mass)
        }
        MomentKind::Super => (
            None,
            Some(cov_superposition(family, &masses, args.k, args.pb)?),
            Some(cov_superposition_lower_region(family, &masses, args.k, args.pb)?),
            MomentOp::Superposition {
                masses: masses.clone(),
                k: args.k,
            },
            masses.iter().sum(),
        ),
        MomentKind::Sub => {
            let q = need(args.q, "--q")?;
            (
                None,
                Some(cov_subsampling(family, p.mass, q, args.pb)?),
                Some(cov_subsampling_lower_region(family, p.mass, q, args.pb)?),
                MomentOp::Subsampling { q },
                p.mass,
            )
        }
        MomentKind::Trans => {
            let pa = need(args.pa, "--pa")?;
            (
                None,
                Some(cov_transition(family, p.mass, pa, args.pb)?),
                None,
                MomentOp::Transition { p_a: pa },
                p.mass,
            )
        }
    };
    let mc = match args.mc {
        Some(reps) => {
            let r = monte_carlo_moments(family, mc_mass, args.pb, &op, &McSettings::new(reps, c.seed()))?;
            let e = if args.op == MomentKind::Mean { r.mean } else { r.second };
            Some(McOut::new(e, r.reps))
        }
        None => None,
    };
    let config = RunConfig {
        subcommand: "moments",
        common: c,
        args,
    };
    #[derive(Serialize)]
    struct Output<'a, C: Serialize> {
        #[serde(flatten)]
        meta: Meta<'a, C>,
        closed_form: Option<f64>,
        quadrature: Option<f64>,
        lower_region: Option<f64>,
        monte_carlo: Option<McOut>,
    }
    write_json(
        c.out.as_ref(),
        &Output {
            meta: Meta {
                version: VERSION,
                seed: c.seed(),
                config: &config,
            },
            closed_form: closed,
            quadrature: formula,
            lower_region,
            monte_carlo: mc,
        },
    )
}

fn parse_cell(s: &str) -> Result<(usize, usize), CliError> {
    let bad = || CliError::Config(format!("--cell expects N,K, got '{s}'"));
    let (n, k) = s.split_once(',').ok_or_else(bad)?;
    Ok((
        n.trim().parse().map_err(|_| bad())?,
        k.trim().parse().map_err(|_| bad())?,
    ))
}

pub fn tak(c: &Common, args: &TakArgs) -> Result<(), CliError> {
    let p = params(c, 0.5, 1.0)?;
    let cells = args.cell.iter().map(|s| parse_cell(s)).collect::<Result<Vec<_>, _>>()?;
    let n_max = cells.iter().map(|x| x.0).max().unwrap_or(args.n_max).max(1);
    let k_max = cells.iter().map(|x| x.1).max().unwrap_or(args.k_max).max(1);
    let table = TakTable::fill(p.a, p.mass, n_max, k_max, TableOptions::default())?;
    let config = RunConfig {
        subcommand: "tak",
        common: c,
        args,
    };
    let mut w = open_out(c.out.as_ref())?;
    writeln!(
        w,
        "# {}",
        serde_json::to_string(&Meta {
            version: VERSION,
            seed: c.seed(),
            config: &config,
        })?
    )?;
    if cells.is_empty() {
        write!(w, "{}", table.to_csv())?;
    } else {
        writeln!(w, "N,K,log_value,method")?;
        for (n, k) in cells {
            let cell = table
                .cell(n, k)
                .ok_or_else(|| CliError::Config(format!("cell ({n},{k}) outside the table")))?;
            writeln!(w, "{n},{k},{},{}", cell.ln_value, cell.method)?;
        }
    }
    w.flush()?;
    Ok(())
}

pub fn algebra(c: &Common, args: &AlgebraArgs) -> Result<(), CliError> {
    let default = params(c, 0.5, 1.0)?;
    let expr = OperatorExpr::parse(&args.expr, default)?;
    let nf = normal_form(&expr);
    let realization = if args.evaluate {
        let base = base_measure(Base::Uniform, args.dim)?;
        let mut leaves = HashMap::new();
        for (id, p) in leaf_params(&expr) {
            // each leaf gets its own stream, so adding a leaf leaves the others unchanged
            let mut rng = ChaCha8Rng::seed_from_u64(c.seed());
            rng.set_stream(hash_name(&id));
            leaves.insert(id, sample_crm_threshold(&p, base.as_ref(), args.z, &mut rng)?);
        }
        let kernels = KernelRegistry::standard(args.dim);
        let crm = evaluate_expr_keyed(&expr, &leaves, &kernels, c.seed())?;
        let nrm = normalize(&crm)?;
        Some((crm, nrm))
    } else {
        None
    };
    let config = RunConfig {
        subcommand: "algebra",
        common: c,
        args,
    };
    #[derive(Serialize)]
    struct Output<'a, C: Serialize> {
        #[serde(flatten)]
        meta: Meta<'a, C>,
        expression: String,
        normal_form: String,
        #[serde(skip_serializing_if = "Option::is_none")]
        crm: Option<nrmkit::levy_core::CrmRealization>,
        #[serde(skip_serializing_if = "Option::is_none")]
        nrm: Option<nrmkit::levy_core::NrmRealization>,
    }
    let (crm, nrm) = realization.unzip();
    write_json(
        c.out.as_ref(),
        &Output {
            meta: Meta {
                version: VERSION,
                seed: c.seed(),
                config: &config,
            },
            expression: expr.to_string(),
            normal_form: nf.to_string(),
            crm,
            nrm,
        },
    )
}

/// Leaf ids with their parameters; a repeated id must carry the same ones.
fn leaf_params(e: &OperatorExpr) -> Vec<(String, NggParams)> {
    fn walk(e: &OperatorExpr, out: &mut Vec<(String, NggParams)>) {
        match e {
            OperatorExpr::Leaf { id, params } => {
                if !out.iter().any(|(i, _)| i == id) {
                    out.push((id.clone(), *params));
                }
            }
            OperatorExpr::Subsample { child, .. } | OperatorExpr::Transition { child, .. } => walk(child, out),
            OperatorExpr::Superpose { children } => children.iter().for_each(|ch| walk(ch, out)),
        }
    }
    let mut out = Vec::new();
    walk(e, &mut out);
    out
}

pub fn verify(c: &Common, args: &VerifyArgs) -> Result<(), CliError> {
    let report = run_verify(&args.only, c.seed()).map_err(CliError::Config)?;
    let config = RunConfig {
        subcommand: "verify",
        common: c,
        args,
    };
    #[derive(Serialize)]
    struct Output<'a, C: Serialize> {
        #[serde(flatten)]
        meta: Meta<'a, C>,
        #[serde(flatten)]
        report: &'a nrmkit::verify::VerifyReport,
    }
    write_json(
        c.out.as_ref(),
        &Output {
            meta: Meta {
                version: VERSION,
                seed: c.seed(),
                config: &config,
            },
            report: &report,
        },
    )?;
    if report.passed {
        Ok(())
    } else {
        Err(CliError::VerifyFailed)
    }
}
