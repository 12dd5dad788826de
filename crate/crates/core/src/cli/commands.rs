//! One function per verb. Each validates its keys, reads checked inputs,
//! runs the library and writes stamped outputs plus manifests.

use std::path::{Path, PathBuf};

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};

use super::config::Config;
use super::files::{self, fmt, CsvOut, ReportRow, Table, CONFIG_HASH, DATASET_HASH};
use super::Command;
use crate::bayes_mmnl::{run_gibbs, GibbsConfig, MmnlPriors};
use crate::bayes_mnl::{
    grid_posterior, log_posterior_kernel, posterior_summary, rw_metropolis, GridSpec, MetropolisConfig,
    Prior,
};
use crate::divergence::{divergence_report, DivergenceReport};
use crate::error::{Error, Result};
use crate::linalg::vech;
use crate::mle::{fit_mmnl_msl, fit_mnl, mmnl_param_count, FitOptions, FitResult, MslOptions, WnMode};
use crate::model::{ChoiceSets, CorrectionMode, Dataset, Observation, SampledSet, UtilityParams};
use crate::protocols::{draw_for_dataset, Protocol};
use crate::streams::{self, domain};
use crate::synth::{generate_mmnl, generate_mnl, CovariateLaw, MmnlDgpConfig, MnlDgpConfig};

pub fn dispatch(command: Command, config: &Config, out: &Path) -> Result<Vec<PathBuf>> {
    match command {
        Command::Generate => cmd_generate(config, out),
        Command::Sample => cmd_sample(config, out),
        Command::Fit => cmd_fit(config, out),
        Command::Bayes => cmd_bayes(config, out),
        Command::Divergence => cmd_divergence(config, out),
    }
}

/// Writes `body` as `out/name` with the config hash header, plus manifest.
struct Emitter<'a> {
    config: &'a Config,
    command: Command,
    out: &'a Path,
    hash: String,
    written: Vec<PathBuf>,
}

impl<'a> Emitter<'a> {
    fn new(config: &'a Config, command: Command, out: &'a Path) -> Self {
        Self { config, command, out, hash: config.hash(), written: Vec::new() }
    }

    fn run_id(&self) -> String {
        format!("{}-{}", self.command.name(), &self.hash[..12])
    }

    fn emit(&mut self, name: &str, extra: &[(&str, String)], body: Vec<u8>) -> Result<()> {
        let path = self.out.join(name);
        let mut headers = vec![(CONFIG_HASH, self.hash.as_str())];
        headers.extend(extra.iter().map(|(k, v)| (*k, v.as_str())));
        files::write_table(&path, &headers, body)?;
        files::write_manifest(&path, self.command.name(), self.config, extra)?;
        self.written.push(path);
        Ok(())
    }

    fn report(&self, metric: impl Into<String>, value: f64, context: impl Into<String>) -> ReportRow {
        ReportRow {
            run_id: self.run_id(),
            config_hash: self.hash.clone(),
            metric: metric.into(),
            value,
            context: context.into(),
        }
    }
}

// ---------------------------------------------------------------------------
// Shared config readers.

fn covariate_law(config: &Config) -> Result<CovariateLaw> {
    match config.get("dgp.covariates").unwrap_or("normal") {
        "normal" => Ok(CovariateLaw::StandardNormal),
        "uniform" => Ok(CovariateLaw::Uniform01),
        "fixed" => {
            let m = config
                .matrix("dgp.design")?
                .ok_or_else(|| Error::Config("dgp.covariates = fixed needs dgp.design".into()))?;
            Ok(CovariateLaw::Fixed(matrix_rows(&m)))
        }
        "shifted" => {
            let m = config
                .matrix("dgp.means")?
                .ok_or_else(|| Error::Config("dgp.covariates = shifted needs dgp.means".into()))?;
            Ok(CovariateLaw::ShiftedNormal(matrix_rows(&m)))
        }
        other => Err(Error::Config(format!("unknown dgp.covariates '{other}'"))),
    }
}

fn matrix_rows(m: &DMatrix<f64>) -> Vec<Vec<f64>> {
    (0..m.nrows()).map(|r| m.row(r).iter().copied().collect()).collect()
}

/// `uniform_wor:M` or `importance:p1,p2,...`.
pub fn parse_protocol(spec: &str) -> Result<Protocol> {
    let (kind, arg) = spec
        .trim()
        .split_once(':')
        .ok_or_else(|| Error::Config(format!("protocol '{spec}' must be kind:argument")))?;
    match kind.trim() {
        "uniform_wor" => {
            let m = arg
                .trim()
                .parse()
                .map_err(|_| Error::Config(format!("bad sample size in '{spec}'")))?;
            Protocol::uniform_wor(m)
        }
        "importance" => {
            let p = arg
                .split(',')
                .map(|s| s.trim().parse::<f64>())
                .collect::<std::result::Result<Vec<_>, _>>()
                .map_err(|_| Error::Config(format!("bad inclusion probabilities in '{spec}'")))?;
            Protocol::importance(p)
        }
        other => Err(Error::Config(format!("unknown protocol kind '{other}'"))),
    }
}

fn protocol_from(config: &Config) -> Result<Protocol> {
    match config.require("protocol.kind")? {
        "uniform_wor" => Protocol::uniform_wor(config.require_parse("protocol.m")?),
        "importance" => Protocol::importance(config.require_floats("protocol.p")?),
        other => Err(Error::Config(format!("unknown protocol.kind '{other}'"))),
    }
}

/// `full` or a correction mode; the latter needs sampled sets.
fn correction(config: &Config) -> Result<Option<CorrectionMode>> {
    match config.get("correction").unwrap_or("full") {
        "full" => Ok(None),
        other => other
            .parse()
            .map(Some)
            .map_err(|_| Error::Config(format!("unknown correction '{other}'"))),
    }
}

struct Inputs {
    dataset: Dataset,
    dataset_hash: String,
    sets: Option<Vec<SampledSet>>,
}

impl Inputs {
    fn choice_sets(&self, mode: Option<CorrectionMode>) -> Result<ChoiceSets<'_>> {
        match (mode, &self.sets) {
            (None, None) => Ok(ChoiceSets::Full),
            (None, Some(_)) => Err(Error::Config("input.sets given but correction = full".into())),
            (Some(_), None) => Err(Error::Config("a sampled correction needs input.sets".into())),
            (Some(m), Some(s)) => Ok(ChoiceSets::sampled(s, m)),
        }
    }
}

fn read_dataset(config: &Config) -> Result<(Dataset, String)> {
    let path = PathBuf::from(config.require("input.dataset")?);
    let table: Table = files::read_checked(&path, config.get("input.dataset_hash"))?;
    let hash = table.header(&path, CONFIG_HASH)?.to_string();
    Ok((files::parse_dataset(&path, &table)?, hash))
}

fn read_inputs(config: &Config) -> Result<Inputs> {
    let (dataset, dataset_hash) = read_dataset(config)?;
    let sets = match config.get("input.sets") {
        None => None,
        Some(p) => {
            let path = PathBuf::from(p);
            let table = files::read_checked(&path, None)?;
            let recorded = table.header(&path, DATASET_HASH)?;
            if recorded != dataset_hash {
                return Err(Error::Config(format!(
                    "refusing {}: sets were drawn for dataset {recorded}, not {dataset_hash}",
                    path.display()
                )));
            }
            Some(files::parse_sets(&path, &table, &dataset)?)
        }
    };
    Ok(Inputs { dataset, dataset_hash, sets })
}

const INPUT_KEYS: &[&str] = &["seed", "input.dataset", "input.dataset_hash", "input.sets", "model", "correction"];

// ---------------------------------------------------------------------------
// Verbs.

pub fn cmd_generate(config: &Config, out: &Path) -> Result<Vec<PathBuf>> {
    config.check_known(&["seed"], &["dgp."])?;
    let seed = config.seed()?;
    let j = config.require_parse("dgp.j")?;
    let k = config.require_parse("dgp.k")?;
    let law = covariate_law(config)?;
    let mut em = Emitter::new(config, Command::Generate, out);
    match config.require("dgp.kind")? {
        "mnl" => {
            let ds = generate_mnl(&MnlDgpConfig {
                n: config.require_parse("dgp.n")?,
                j,
                k,
                beta_star: UtilityParams::new(config.require_floats("dgp.beta")?)?,
                covariate_law: law,
                seed,
            })?;
            em.emit("dataset.csv", &[], files::dataset_body(&ds))?;
        }
        "mmnl" => {
            let sigma = config
                .matrix("dgp.sigma")?
                .ok_or_else(|| Error::Config("missing required key 'dgp.sigma'".into()))?;
            let panel = generate_mmnl(&MmnlDgpConfig {
                individuals: config.require_parse("dgp.individuals")?,
                choices_per_individual: config.require_parse("dgp.choices")?,
                j,
                k,
                mu_star: config.require_floats("dgp.mu")?,
                sigma_star: sigma,
                covariate_law: law,
                seed,
            })?;
            em.emit("dataset.csv", &[], files::dataset_body(&panel.dataset))?;
            let cols: Vec<String> = std::iter::once("individual_id".to_string())
                .chain((0..k).map(|d| format!("beta[{d}]")))
                .collect();
            let mut csv = CsvOut::new(&cols);
            for (n, b) in panel.true_betas.iter().enumerate() {
                csv.row(std::iter::once(n.to_string()).chain(b.as_slice().iter().map(|x| fmt(*x))));
            }
            em.emit("true_betas.csv", &[], csv.into_bytes())?;
        }
        other => return Err(Error::Config(format!("unknown dgp.kind '{other}'"))),
    }
    Ok(em.written)
}

pub fn cmd_sample(config: &Config, out: &Path) -> Result<Vec<PathBuf>> {
    config.check_known(&["seed", "input.dataset", "input.dataset_hash"], &["protocol."])?;
    let seed = config.seed()?;
    let (dataset, dataset_hash) = read_dataset(config)?;
    let protocol = protocol_from(config)?;
    let sets = draw_for_dataset(&protocol, &dataset, seed)?;
    let mut em = Emitter::new(config, Command::Sample, out);
    em.emit(
        "sets.csv",
        &[(DATASET_HASH, dataset_hash), ("protocol", protocol.name())],
        files::sets_body(&dataset, &sets),
    )?;
    Ok(em.written)
}

fn fit_rows(em: &Emitter<'_>, fit: &FitResult, context: &str) -> Vec<ReportRow> {
    let mut rows = Vec::new();
    for ((name, est), se) in fit.param_names.iter().zip(&fit.estimate).zip(&fit.std_errors) {
        rows.push(em.report(format!("estimate[{name}]"), *est, context));
        rows.push(em.report(format!("se[{name}]"), *se, context));
    }
    rows.push(em.report("loglik", fit.loglik, context));
    rows.push(em.report("converged", f64::from(u8::from(fit.converged)), context));
    rows.push(em.report("iterations", fit.iterations as f64, context));
    rows.push(em.report("grad_max_norm", fit.grad_max_norm, context));
    rows
}

fn identity_vech(k: usize) -> Vec<f64> {
    vech(&DMatrix::identity(k, k))
}

pub fn cmd_fit(config: &Config, out: &Path) -> Result<Vec<PathBuf>> {
    config.check_known(INPUT_KEYS, &["fit.", "msl."])?;
    config.seed()?;
    let mode = correction(config)?;
    let inputs = read_inputs(config)?;
    let sets = inputs.choice_sets(mode)?;
    let k = inputs.dataset.k();
    let model = config.get("model").unwrap_or("mnl");
    let mode_name = mode.map_or("full", CorrectionMode::as_str);
    let (fit, context) = match model {
        "mnl" => {
            let opts = FitOptions {
                tol: config.parse_or("fit.tol", FitOptions::default().tol)?,
                max_iter: config.parse_or("fit.max_iter", FitOptions::default().max_iter)?,
            };
            let init = config.floats("fit.init")?.unwrap_or_else(|| vec![0.0; k]);
            let fit = fit_mnl(&inputs.dataset, sets, &UtilityParams::new(init)?, &opts)?;
            (fit, format!("model=mnl;correction={mode_name};tol={}", opts.tol))
        }
        "mmnl" => {
            let d = MslOptions::default();
            let wn: WnMode = config
                .get("msl.wn")
                .unwrap_or("naive_one")
                .parse()
                .map_err(|e: Error| Error::Config(e.to_string()))?;
            let opts = MslOptions {
                wn_mode: wn,
                draws_per_individual: config.parse_or("msl.draws", d.draws_per_individual)?,
                halton_skip: config.parse_or("msl.skip", d.halton_skip)?,
                tol: config.parse_or("msl.tol", d.tol)?,
                max_iter: config.parse_or("msl.max_iter", d.max_iter)?,
            };
            let init = match config.floats("msl.init")? {
                Some(v) => v,
                None => vec![0.0; k].into_iter().chain(identity_vech(k)).collect(),
            };
            if init.len() != mmnl_param_count(k) {
                return Err(Error::Config(format!("msl.init needs {} values", mmnl_param_count(k))));
            }
            let fit = fit_mmnl_msl(&inputs.dataset, sets, &init, &opts)?;
            let wn_name = match wn {
                WnMode::NaiveOne => "naive_one",
                WnMode::ExactFullSet => "exact_full_set",
            };
            let context = format!(
                "model=mmnl;correction={mode_name};wn={wn_name};draws={};tol={}",
                opts.draws_per_individual, opts.tol
            );
            (fit, context)
        }
        other => return Err(Error::Config(format!("unknown model '{other}'"))),
    };
    let mut em = Emitter::new(config, Command::Fit, out);
    let rows = fit_rows(&em, &fit, &context);
    em.emit("fit.csv", &[(DATASET_HASH, inputs.dataset_hash.clone())], files::report_body(&rows))?;
    Ok(em.written)
}

/// Column means and standard deviations, in row order.
fn column_moments(rows: &[Vec<f64>]) -> (Vec<f64>, Vec<f64>) {
    let dim = rows.first().map_or(0, Vec::len);
    let n = rows.len() as f64;
    let mean: Vec<f64> = (0..dim).map(|d| rows.iter().map(|r| r[d]).sum::<f64>() / n).collect();
    let sd = (0..dim)
        .map(|d| (rows.iter().map(|r| (r[d] - mean[d]).powi(2)).sum::<f64>() / (n - 1.0).max(1.0)).sqrt())
        .collect();
    (mean, sd)
}

fn prior_from(config: &Config, k: usize) -> Result<Prior> {
    let mean = config.floats("prior.mean")?.unwrap_or_else(|| vec![0.0; k]);
    let cov = match config.matrix("prior.cov")? {
        Some(c) => c,
        None => DMatrix::identity(k, k) * config.parse_or("prior.var", 10.0)?,
    };
    Prior::normal(mean, cov)
}

pub fn cmd_bayes(config: &Config, out: &Path) -> Result<Vec<PathBuf>> {
    config.check_known(INPUT_KEYS, &["prior.", "mcmc.", "grid.", "gibbs."])?;
    let seed = config.seed()?;
    let mode = correction(config)?;
    let inputs = read_inputs(config)?;
    let sets = inputs.choice_sets(mode)?;
    let mode_name = mode.map_or("full", CorrectionMode::as_str);
    let mut em = Emitter::new(config, Command::Bayes, out);
    let dh = [(DATASET_HASH, inputs.dataset_hash.clone())];
    match config.get("model").unwrap_or("mnl") {
        "mnl" => bayes_mnl(config, &inputs.dataset, sets, seed, mode_name, &mut em, &dh)?,
        "mmnl" => bayes_mmnl(config, &inputs.dataset, sets, seed, mode_name, &mut em, &dh)?,
        other => return Err(Error::Config(format!("unknown model '{other}'"))),
    }
    Ok(em.written)
}

fn bayes_mnl(
    config: &Config,
    ds: &Dataset,
    sets: ChoiceSets<'_>,
    seed: u64,
    mode_name: &str,
    em: &mut Emitter<'_>,
    dh: &[(&str, String)],
) -> Result<()> {
    let k = ds.k();
    let prior = prior_from(config, k)?;
    let mle = fit_mnl(ds, sets, &UtilityParams::zeros(k), &FitOptions::default())?;
    let d = MetropolisConfig::default();
    let proposal = mle
        .std_errors
        .iter()
        .all(|s| s.is_finite() && *s > 0.0)
        .then(|| DMatrix::from_diagonal(&DVector::from_vec(mle.std_errors.clone())));
    let mcmc = MetropolisConfig {
        n_chains: config.parse_or("mcmc.chains", d.n_chains)?,
        n_iter: config.parse_or("mcmc.iter", d.n_iter)?,
        burn_in: config.parse_or("mcmc.burn_in", d.burn_in)?,
        scale: config.parse_or("mcmc.scale", 2.38 / (k as f64).sqrt())?,
        proposal_chol: proposal,
        adapt: config.parse_or("mcmc.adapt", d.adapt)?,
        seed,
    };
    let kernel = |b: &[f64]| {
        UtilityParams::new(b.to_vec())
            .and_then(|b| log_posterior_kernel(&b, ds, sets, &prior))
            .unwrap_or(f64::NEG_INFINITY)
    };
    let draws = rw_metropolis(kernel, &mle.estimate, &mcmc)?;
    let summary = posterior_summary(&draws)?;

    let cols: Vec<String> = ["iteration", "chain"]
        .iter()
        .map(|s| s.to_string())
        .chain(mle.param_names.iter().cloned())
        .collect();
    let mut csv = CsvOut::new(&cols);
    for (c, chain) in draws.chains.iter().enumerate() {
        for (i, b) in chain.draws.iter().enumerate() {
            csv.row([(mcmc.burn_in + i).to_string(), c.to_string()].into_iter().chain(b.iter().map(|x| fmt(*x))));
        }
    }
    em.emit("draws.csv", dh, csv.into_bytes())?;

    let ctx = format!("model=mnl;correction={mode_name};chains={};burn_in={}", mcmc.n_chains, mcmc.burn_in);
    let (mean, sd) = column_moments(&draws.all_draws());
    let mcse = summary.mcse();
    let mut rows = Vec::new();
    for (d, name) in mle.param_names.iter().enumerate() {
        rows.push(em.report(format!("mean[{name}]"), mean[d], &ctx));
        rows.push(em.report(format!("sd[{name}]"), sd[d], &ctx));
        for (q, label) in summary.quantiles[d].iter().zip(["q2.5", "q50", "q97.5"]) {
            rows.push(em.report(format!("{label}[{name}]"), *q, &ctx));
        }
        rows.push(em.report(format!("ess[{name}]"), summary.ess[d], &ctx));
        rows.push(em.report(format!("mcse[{name}]"), mcse[d], &ctx));
    }
    for (c, chain) in draws.chains.iter().enumerate() {
        rows.push(em.report("acceptance", chain.acceptance_rate, format!("{ctx};chain={c}")));
    }
    rows.push(em.report("n_draws", summary.n_draws as f64, &ctx));

    if let Some(points) = config.parse_key::<usize>("grid.points")? {
        let spec = GridSpec::around_estimate(&mle, config.parse_or("grid.ses", 6.0)?, points)?;
        let grid = grid_posterior(ds, sets, &prior, &spec)?;
        let gcols: Vec<String> = mle.param_names.iter().cloned().chain(["density".to_string()]).collect();
        let mut gcsv = CsvOut::new(&gcols);
        for (p, dens) in grid.points.iter().zip(grid.density()) {
            gcsv.row(p.iter().chain([&dens]).map(|x| fmt(*x)));
        }
        em.emit("grid.csv", dh, gcsv.into_bytes())?;
        let gctx = format!("{ctx};grid_points={points}");
        for (name, m) in mle.param_names.iter().zip(grid.mean()) {
            rows.push(em.report(format!("grid_mean[{name}]"), m, &gctx));
        }
        rows.push(em.report("log_marginal", grid.log_marginal, &gctx));
        rows.push(em.report("grid_doubling_delta", grid.doubling_delta, &gctx));
        rows.push(em.report("grid_converged", f64::from(u8::from(grid.converged)), &gctx));
    }
    em.emit("summary.csv", dh, files::report_body(&rows))
}

fn bayes_mmnl(
    config: &Config,
    ds: &Dataset,
    sets: ChoiceSets<'_>,
    seed: u64,
    mode_name: &str,
    em: &mut Emitter<'_>,
    dh: &[(&str, String)],
) -> Result<()> {
    let k = ds.k();
    let dp = MmnlPriors::default_for(k);
    let priors = MmnlPriors::new(
        config.floats("prior.m0")?.map_or(dp.m0, DVector::from_vec),
        config.matrix("prior.a0")?.unwrap_or(dp.a0),
        config.parse_or("prior.v0", dp.v0)?,
        config.matrix("prior.s0")?.unwrap_or(dp.s0),
    )?;
    let d = GibbsConfig::default();
    let gibbs = GibbsConfig {
        iterations: config.parse_or("gibbs.iterations", d.iterations)?,
        burn_in: config.parse_or("gibbs.burn_in", d.burn_in)?,
        thin: config.parse_or("gibbs.thin", d.thin)?,
        seed,
        rho: config.parse_or("gibbs.rho", d.rho)?,
        adapt: config.parse_or("gibbs.adapt", d.adapt)?,
        store_beta_n: config.parse_or("gibbs.store_beta_n", d.store_beta_n)?,
    };
    let draws = run_gibbs(ds, sets, &priors, &gibbs)?;
    let rows_raw = draws.rows();
    let iteration = |i: usize| gibbs.burn_in + i * gibbs.thin;

    let mut names: Vec<String> = (0..k).map(|d| format!("mu[{d}]")).collect();
    for a in 0..k {
        for b in 0..=a {
            names.push(format!("sigma[{a},{b}]"));
        }
    }
    let cols: Vec<String> = std::iter::once("iteration".to_string()).chain(names.iter().cloned()).collect();
    let mut csv = CsvOut::new(&cols);
    for (i, r) in rows_raw.iter().enumerate() {
        csv.row(std::iter::once(iteration(i).to_string()).chain(r.iter().map(|x| fmt(*x))));
    }
    em.emit("draws.csv", dh, csv.into_bytes())?;

    if let Some(beta_n) = &draws.beta_n {
        let bcols: Vec<String> = ["iteration", "individual"]
            .iter()
            .map(|s| s.to_string())
            .chain((0..k).map(|d| format!("beta[{d}]")))
            .collect();
        let mut bcsv = CsvOut::new(&bcols);
        for (i, m) in beta_n.iter().enumerate() {
            for n in 0..m.nrows() {
                bcsv.row([iteration(i).to_string(), n.to_string()].into_iter().chain(m.row(n).iter().map(|x| fmt(*x))));
            }
        }
        em.emit("beta_n.csv", dh, bcsv.into_bytes())?;
    }

    let ctx = format!(
        "model=mmnl;correction={mode_name};burn_in={};thin={}",
        gibbs.burn_in, gibbs.thin
    );
    let (mean, sd) = column_moments(&rows_raw);
    let mut rows = Vec::new();
    for (d, name) in names.iter().enumerate() {
        rows.push(em.report(format!("mean[{name}]"), mean[d], &ctx));
        rows.push(em.report(format!("sd[{name}]"), sd[d], &ctx));
    }
    let acc = &draws.acceptance;
    let acc_mean = acc.iter().sum::<f64>() / acc.len().max(1) as f64;
    rows.push(em.report("acceptance_mean", acc_mean, &ctx));
    rows.push(em.report("acceptance_min", acc.iter().copied().fold(f64::INFINITY, f64::min), &ctx));
    rows.push(em.report("acceptance_max", acc.iter().copied().fold(f64::NEG_INFINITY, f64::max), &ctx));
    rows.push(em.report("degeneracy_events", draws.degeneracy_events as f64, &ctx));
    rows.push(em.report("n_draws", rows_raw.len() as f64, &ctx));
    em.emit("summary.csv", dh, files::report_body(&rows))
}

/// Designs for the divergence verb: either `design.count` random designs
/// of `design.n` observations, or `design.n` copies of a fixed `design.x`.
pub fn designs_from(config: &Config, seed: u64) -> Result<Vec<Vec<Observation>>> {
    let n: usize = config.parse_or("design.n", 1)?;
    if n == 0 {
        return Err(Error::Config("design.n must be at least 1".into()));
    }
    match config.get("design.kind").unwrap_or("random") {
        "fixed" => {
            let x = config
                .matrix("design.x")?
                .ok_or_else(|| Error::Config("design.kind = fixed needs design.x".into()))?;
            let rows = matrix_rows(&x);
            let design = (0..n)
                .map(|i| Observation::from_design(i, i, &rows, 0))
                .collect::<Result<Vec<_>>>()?;
            Ok(vec![design])
        }
        "random" => {
            let count: usize = config.parse_or("design.count", 1)?;
            let j: usize = config.require_parse("design.j")?;
            let k: usize = config.require_parse("design.k")?;
            let uniform = match config.get("design.law").unwrap_or("normal") {
                "normal" => false,
                "uniform" => true,
                other => return Err(Error::Config(format!("unknown design.law '{other}'"))),
            };
            (0..count)
                .map(|d| {
                    let mut rng = streams::derive(seed, domain::DESIGN, d as u64);
                    (0..n)
                        .map(|i| {
                            let rows: Vec<Vec<f64>> = (0..j)
                                .map(|_| {
                                    (0..k)
                                        .map(|_| {
                                            if uniform {
                                                rng.random::<f64>()
                                            } else {
                                                StandardNormal.sample(&mut rng)
                                            }
                                        })
                                        .collect()
                                })
                                .collect();
                            Observation::from_design(i, i, &rows, 0)
                        })
                        .collect()
                })
                .collect()
        }
        other => Err(Error::Config(format!("unknown design.kind '{other}'"))),
    }
}

pub const DIVERGENCE_COLUMNS: &[&str] = &[
    "run_id",
    "config_hash",
    "design",
    "protocol",
    "mode",
    "grid_points",
    "prior_variance",
    "expected_quasi_ll",
    "expected_true_ll",
    "expected_divergence",
    "split_vs_direct",
    "regrouped_vs_direct",
    "closed_form_residual",
    "identity_residual",
    "kl_a",
    "kl_a_entropy",
    "kl_b",
    "kl_total",
    "kl_direct",
    "kl_decomposition_residual",
    "kl_entropy_residual",
    "kl_doubling_delta",
    "kl_converged",
];

fn opt(x: Option<f64>) -> String {
    x.map(fmt).unwrap_or_default()
}

fn divergence_row(run_id: &str, hash: &str, design: usize, r: &DivergenceReport) -> Vec<String> {
    let kl = r.kl.as_ref();
    vec![
        run_id.to_string(),
        hash.to_string(),
        design.to_string(),
        r.protocol.clone(),
        r.mode.as_str().to_string(),
        r.grid.as_ref().map(|g| g.points.to_string()).unwrap_or_default(),
        opt(r.prior_variance),
        fmt(r.expected_quasi_ll),
        fmt(r.expected_true_ll),
        fmt(r.expected_divergence),
        fmt(r.split_vs_direct),
        fmt(r.regrouped_vs_direct),
        opt(r.closed_form_residual),
        fmt(r.identity_residual),
        opt(kl.map(|t| t.a)),
        opt(kl.and_then(|t| t.a_entropy)),
        opt(kl.map(|t| t.b)),
        opt(kl.map(|t| t.total)),
        opt(kl.map(|t| t.direct)),
        opt(kl.map(|t| t.decomposition_residual())),
        opt(kl.and_then(|t| t.entropy_residual())),
        opt(kl.map(|t| t.doubling_delta)),
        kl.map(|t| u8::from(t.converged).to_string()).unwrap_or_default(),
    ]
}

pub fn cmd_divergence(config: &Config, out: &Path) -> Result<Vec<PathBuf>> {
    config.check_known(&["seed", "beta", "protocols", "modes"], &["design.", "kl.", "prior.", "grid."])?;
    let seed = config.seed()?;
    let designs = designs_from(config, seed)?;
    let beta = UtilityParams::new(config.require_floats("beta")?)?;
    let protocols = config
        .require("protocols")?
        .split('|')
        .map(parse_protocol)
        .collect::<Result<Vec<_>>>()?;
    let modes = config
        .get("modes")
        .unwrap_or("mcfadden")
        .split(',')
        .map(|m| m.trim().parse::<CorrectionMode>().map_err(|e| Error::Config(e.to_string())))
        .collect::<Result<Vec<_>>>()?;
    let kl_setup = if config.parse_or("kl.enabled", false)? {
        let prior = prior_from(config, beta.len())?;
        let spec = GridSpec::around_prior(&prior, config.parse_or("grid.sds", 5.0)?, config.parse_or("grid.points", 51)?)?;
        Some((prior, spec))
    } else {
        None
    };

    let mut em = Emitter::new(config, Command::Divergence, out);
    let run_id = em.run_id();
    let mut table = CsvOut::new(&DIVERGENCE_COLUMNS.iter().map(|s| s.to_string()).collect::<Vec<_>>());
    let mut coverage = CsvOut::new(
        &["design", "protocol", "obs_id", "members", "r"].iter().map(|s| s.to_string()).collect::<Vec<_>>(),
    );
    for (d, design) in designs.iter().enumerate() {
        for protocol in &protocols {
            for (mi, mode) in modes.iter().enumerate() {
                let report = divergence_report(design, protocol, *mode, &beta, kl_setup.as_ref().map(|(p, g)| (p, g)))
                    .map_err(|e| match e {
                        Error::Capacity { count, cap, context } => Error::Capacity {
                            count,
                            cap,
                            context: format!("{context} (design {d}, protocol {})", protocol.name()),
                        },
                        other => other,
                    })?;
                table.row(divergence_row(&run_id, &em.hash, d, &report));
                if mi == 0 {
                    for c in &report.coverage {
                        let members = c.member_ids.iter().map(usize::to_string).collect::<Vec<_>>().join(" ");
                        coverage.row([d.to_string(), report.protocol.clone(), c.obs_id.to_string(), members, fmt(c.r)]);
                    }
                }
            }
        }
    }
    em.emit("divergence.csv", &[], table.into_bytes())?;
    em.emit("coverage.csv", &[], coverage.into_bytes())?;
    Ok(em.written)
}
