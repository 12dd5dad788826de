//! Bayesian MNL: normal priors, exact grid posteriors for `K ≤ 2`, and a
//! random-walk Metropolis sampler for general `K`.

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::linalg::{cholesky, pairwise_sum, spd_inverse};
use crate::mle::{quasi_loglik, FitResult};
use crate::model::{lse, ChoiceSets, Dataset, UtilityParams};
use crate::streams::{self, domain};

/// Minimum lattice points per dimension.
pub const MIN_GRID_POINTS: usize = 51;

/// Largest change in the log marginal likelihood under grid doubling that
/// still counts as converged.
pub const GRID_DOUBLING_TOL: f64 = 1e-6;

/// Normal prior `N(mean, covariance)`.
#[derive(Clone, Debug)]
pub struct Prior {
    mean: Vec<f64>,
    covariance: DMatrix<f64>,
    precision: DMatrix<f64>,
    log_norm: f64,
}

impl Prior {
    pub fn normal(mean: Vec<f64>, covariance: DMatrix<f64>) -> Result<Self> {
        let k = mean.len();
        if k == 0 || covariance.shape() != (k, k) {
            return Err(Error::invalid("prior mean and covariance dimensions differ"));
        }
        let chol = cholesky(&covariance)
            .map_err(|_| Error::invalid("prior covariance must be symmetric positive-definite"))?;
        let log_det: f64 = 2.0 * chol.diagonal().iter().map(|d| d.ln()).sum::<f64>();
        let precision = spd_inverse(&covariance)?;
        Ok(Self {
            log_norm: -0.5 * (k as f64 * (2.0 * std::f64::consts::PI).ln() + log_det),
            mean,
            covariance,
            precision,
        })
    }

    /// `N(0, variance · I)`.
    pub fn isotropic(k: usize, variance: f64) -> Result<Self> {
        Self::normal(vec![0.0; k], DMatrix::identity(k, k) * variance)
    }

    pub fn dim(&self) -> usize {
        self.mean.len()
    }

    pub fn mean(&self) -> &[f64] {
        &self.mean
    }

    pub fn covariance(&self) -> &DMatrix<f64> {
        &self.covariance
    }

    pub fn log_density(&self, beta: &[f64]) -> f64 {
        let d = DVector::from_iterator(self.dim(), beta.iter().zip(&self.mean).map(|(b, m)| b - m));
        self.log_norm - 0.5 * (d.transpose() * &self.precision * &d)[(0, 0)]
    }
}

/// `ln p(β) + ln L(β)`, with the quasi likelihood when `sets` is sampled.
pub fn log_posterior_kernel(
    beta: &UtilityParams,
    dataset: &Dataset,
    sets: ChoiceSets<'_>,
    prior: &Prior,
) -> Result<f64> {
    if prior.dim() != beta.len() {
        return Err(Error::invalid("prior dimension differs from beta"));
    }
    Ok(prior.log_density(beta.as_slice()) + quasi_loglik(dataset, sets, beta)?)
}

/// Uniform lattice over a box, the same number of points per dimension.
#[derive(Clone, Debug, PartialEq)]
pub struct GridSpec {
    pub lower: Vec<f64>,
    pub upper: Vec<f64>,
    pub points: usize,
}

impl GridSpec {
    pub fn new(lower: Vec<f64>, upper: Vec<f64>, points: usize) -> Result<Self> {
        let k = lower.len();
        if k == 0 || upper.len() != k {
            return Err(Error::invalid("grid bounds must have equal, non-zero length"));
        }
        if k > 2 {
            return Err(Error::UnsupportedDimension(k));
        }
        if points < MIN_GRID_POINTS {
            return Err(Error::invalid(format!(
                "grid needs at least {MIN_GRID_POINTS} points per dimension, got {points}"
            )));
        }
        if lower.iter().zip(&upper).any(|(l, u)| !(l < u) || !l.is_finite() || !u.is_finite()) {
            return Err(Error::invalid("grid bounds must be finite with lower < upper"));
        }
        Ok(Self { lower, upper, points })
    }

    /// Prior mean ± `sds` prior standard deviations.
    pub fn around_prior(prior: &Prior, sds: f64, points: usize) -> Result<Self> {
        let sd: Vec<f64> = (0..prior.dim()).map(|d| prior.covariance()[(d, d)].sqrt()).collect();
        Self::new(
            prior.mean().iter().zip(&sd).map(|(m, s)| m - sds * s).collect(),
            prior.mean().iter().zip(&sd).map(|(m, s)| m + sds * s).collect(),
            points,
        )
    }

    /// MLE ± `ses` asymptotic standard errors.
    pub fn around_estimate(fit: &FitResult, ses: f64, points: usize) -> Result<Self> {
        if fit.std_errors.iter().any(|s| !s.is_finite() || *s <= 0.0) {
            return Err(Error::NumericalDegeneracy(
                "standard errors unavailable for grid bounds".into(),
            ));
        }
        Self::new(
            fit.estimate.iter().zip(&fit.std_errors).map(|(m, s)| m - ses * s).collect(),
            fit.estimate.iter().zip(&fit.std_errors).map(|(m, s)| m + ses * s).collect(),
            points,
        )
    }

    /// Same box, step halved.
    pub fn doubled(&self) -> Self {
        Self {
            points: 2 * self.points - 1,
            ..self.clone()
        }
    }

    pub fn dim(&self) -> usize {
        self.lower.len()
    }

    pub fn step(&self, d: usize) -> f64 {
        (self.upper[d] - self.lower[d]) / (self.points - 1) as f64
    }

    pub fn axis(&self, d: usize) -> Vec<f64> {
        let h = self.step(d);
        (0..self.points).map(|i| self.lower[d] + i as f64 * h).collect()
    }

    /// Lattice points, last dimension fastest.
    pub fn lattice(&self) -> Vec<Vec<f64>> {
        let axes: Vec<Vec<f64>> = (0..self.dim()).map(|d| self.axis(d)).collect();
        match self.dim() {
            1 => axes[0].iter().map(|&x| vec![x]).collect(),
            _ => axes[0]
                .iter()
                .flat_map(|&x| axes[1].iter().map(move |&y| vec![x, y]))
                .collect(),
        }
    }

    /// Log trapezoid weights aligned with [`GridSpec::lattice`].
    pub fn log_weights(&self) -> Vec<f64> {
        let one_d = |d: usize| -> Vec<f64> {
            let h = self.step(d);
            (0..self.points)
                .map(|i| if i == 0 || i + 1 == self.points { 0.5 * h } else { h }.ln())
                .collect()
        };
        let w0 = one_d(0);
        match self.dim() {
            1 => w0,
            _ => {
                let w1 = one_d(1);
                w0.iter().flat_map(|a| w1.iter().map(move |b| a + b)).collect()
            }
        }
    }
}

/// Trapezoid log-integral `ln ∫ exp(f)` from log values on the lattice.
pub(crate) fn log_quadrature(log_weights: &[f64], log_values: &[f64]) -> f64 {
    let terms: Vec<f64> = log_weights.iter().zip(log_values).map(|(w, v)| w + v).collect();
    lse(&terms)
}

/// Normalised posterior on a lattice.
#[derive(Clone, Debug)]
pub struct GridPosterior {
    pub spec: GridSpec,
    pub points: Vec<Vec<f64>>,
    pub log_weights: Vec<f64>,
    pub log_prior: Vec<f64>,
    pub log_lik: Vec<f64>,
    pub log_kernel: Vec<f64>,
    pub log_marginal: f64,
    pub log_density: Vec<f64>,
    /// Change in `log_marginal` when the grid step is halved.
    pub doubling_delta: f64,
    pub converged: bool,
}

impl GridPosterior {
    pub fn density(&self) -> Vec<f64> {
        self.log_density.iter().map(|l| l.exp()).collect()
    }

    /// Quadrature of the normalised density; 1 up to rounding.
    pub fn total_mass(&self) -> f64 {
        log_quadrature(&self.log_weights, &self.log_density).exp()
    }

    pub fn mean(&self) -> Vec<f64> {
        let k = self.spec.dim();
        let terms: Vec<Vec<f64>> = self
            .points
            .iter()
            .zip(self.log_weights.iter().zip(&self.log_density))
            .map(|(p, (w, d))| p.iter().map(|x| x * (w + d).exp()).collect())
            .collect();
        crate::linalg::pairwise_sum_vecs(&terms, k)
    }

    /// Lattice point with the largest kernel.
    pub fn mode(&self) -> Vec<f64> {
        let best = self
            .log_kernel
            .iter()
            .enumerate()
            .fold(0, |b, (i, v)| if *v > self.log_kernel[b] { i } else { b });
        self.points[best].clone()
    }
}

type Data<'d, 's> = Option<(&'d Dataset, ChoiceSets<'s>)>;

fn grid_log_parts(spec: &GridSpec, data: Data<'_, '_>, prior: &Prior) -> Result<(Vec<Vec<f64>>, Vec<f64>, Vec<f64>)> {
    let points = spec.lattice();
    let log_prior: Vec<f64> = points.iter().map(|p| prior.log_density(p)).collect();
    let log_lik = match data {
        None => vec![0.0; points.len()],
        Some((dataset, sets)) => points
            .par_iter()
            .map(|p| quasi_loglik(dataset, sets, &UtilityParams::new(p.clone())?))
            .collect::<Result<Vec<f64>>>()?,
    };
    Ok((points, log_prior, log_lik))
}

fn build_posterior(spec: &GridSpec, data: Data<'_, '_>, prior: &Prior) -> Result<GridPosterior> {
    if spec.dim() != prior.dim() {
        return Err(Error::invalid("grid and prior dimensions differ"));
    }
    if let Some((dataset, sets)) = data {
        if dataset.k() > 2 {
            return Err(Error::UnsupportedDimension(dataset.k()));
        }
        if dataset.k() != spec.dim() {
            return Err(Error::invalid("grid and dataset dimensions differ"));
        }
        sets.validate(dataset)?;
    }
    let log_marginal_of = |spec: &GridSpec| -> Result<_> {
        let (points, log_prior, log_lik) = grid_log_parts(spec, data, prior)?;
        let log_kernel: Vec<f64> = log_prior.iter().zip(&log_lik).map(|(a, b)| a + b).collect();
        let lm = log_quadrature(&spec.log_weights(), &log_kernel);
        Ok((lm, points, log_prior, log_lik, log_kernel))
    };
    let (log_marginal, points, log_prior, log_lik, log_kernel) = log_marginal_of(spec)?;
    let doubling_delta = (log_marginal_of(&spec.doubled())?.0 - log_marginal).abs();
    Ok(GridPosterior {
        spec: spec.clone(),
        log_density: log_kernel.iter().map(|k| k - log_marginal).collect(),
        log_weights: spec.log_weights(),
        points,
        log_prior,
        log_lik,
        log_kernel,
        log_marginal,
        converged: doubling_delta < GRID_DOUBLING_TOL,
        doubling_delta,
    })
}

/// Posterior on the lattice `spec`, with a grid-doubling convergence check.
pub fn grid_posterior(
    dataset: &Dataset,
    sets: ChoiceSets<'_>,
    prior: &Prior,
    spec: &GridSpec,
) -> Result<GridPosterior> {
    build_posterior(spec, Some((dataset, sets)), prior)
}

/// The posterior after zero observations: the prior normalised on the box.
pub fn grid_prior(prior: &Prior, spec: &GridSpec) -> Result<GridPosterior> {
    build_posterior(spec, None, prior)
}

fn check_same_grid(p: &GridPosterior, q: &GridPosterior) -> Result<()> {
    if p.spec != q.spec {
        return Err(Error::invalid("posteriors live on different grids"));
    }
    Ok(())
}

/// `∫ p ln(p/q)` by the lattice quadrature.
pub fn kl_divergence_grid(p: &GridPosterior, q: &GridPosterior) -> Result<f64> {
    check_same_grid(p, q)?;
    let terms: Vec<f64> = p
        .log_weights
        .iter()
        .zip(p.log_density.iter().zip(&q.log_density))
        .map(|(w, (lp, lq))| (w + lp).exp() * (lp - lq))
        .collect();
    Ok(pairwise_sum(&terms))
}

/// KL split into the expected log-likelihood ratio under `p_true` and the
/// log Bayes factor `ln(m_sampled / m_true)`.
#[derive(Clone, Debug)]
pub struct KlDecomposition {
    pub kl: f64,
    pub likelihood_ratio_term: f64,
    pub log_bayes_factor: f64,
    pub residual: f64,
}

pub fn kl_decomposition(p_true: &GridPosterior, p_sampled: &GridPosterior) -> Result<KlDecomposition> {
    let kl = kl_divergence_grid(p_true, p_sampled)?;
    let terms: Vec<f64> = p_true
        .log_weights
        .iter()
        .zip(&p_true.log_density)
        .zip(p_true.log_lik.iter().zip(&p_sampled.log_lik))
        .map(|((w, d), (lt, ls))| (w + d).exp() * (lt - ls))
        .collect();
    let likelihood_ratio_term = pairwise_sum(&terms);
    let log_bayes_factor = p_sampled.log_marginal - p_true.log_marginal;
    Ok(KlDecomposition {
        kl,
        likelihood_ratio_term,
        log_bayes_factor,
        residual: kl - likelihood_ratio_term - log_bayes_factor,
    })
}

// ---------------------------------------------------------------------------
// Random-walk Metropolis.

#[derive(Clone, Debug)]
pub struct MetropolisConfig {
    pub n_chains: usize,
    /// Iterations per chain, burn-in included.
    pub n_iter: usize,
    pub burn_in: usize,
    /// Initial proposal scale multiplying `proposal_chol · z`.
    pub scale: f64,
    /// Lower Cholesky factor of the proposal shape; identity if `None`.
    pub proposal_chol: Option<DMatrix<f64>>,
    pub adapt: bool,
    pub seed: u64,
}

impl Default for MetropolisConfig {
    fn default() -> Self {
        Self {
            n_chains: 2,
            n_iter: 20_000,
            burn_in: 5_000,
            scale: 1.0,
            proposal_chol: None,
            adapt: true,
            seed: 1,
        }
    }
}

/// Acceptance rate the burn-in adaptation aims for.
pub const TARGET_ACCEPTANCE: f64 = 0.3;
const ADAPT_BATCH: usize = 50;

#[derive(Clone, Debug)]
pub struct Chain {
    /// Post-burn-in draws.
    pub draws: Vec<Vec<f64>>,
    /// Post-burn-in acceptance rate.
    pub acceptance_rate: f64,
    pub final_scale: f64,
}

#[derive(Clone, Debug)]
pub struct PosteriorDraws {
    pub chains: Vec<Chain>,
    pub burn_in: usize,
    pub seed: u64,
}

impl PosteriorDraws {
    pub fn all_draws(&self) -> Vec<Vec<f64>> {
        self.chains.iter().flat_map(|c| c.draws.iter().cloned()).collect()
    }

    pub fn dim(&self) -> usize {
        self.chains
            .first()
            .and_then(|c| c.draws.first())
            .map_or(0, |d| d.len())
    }
}

fn run_chain<F>(kernel: &F, init: &[f64], cfg: &MetropolisConfig, chain: usize) -> Chain
where
    F: Fn(&[f64]) -> f64,
{
    let k = init.len();
    let chol = cfg
        .proposal_chol
        .clone()
        .unwrap_or_else(|| DMatrix::identity(k, k));
    let mut rng = streams::derive(cfg.seed, domain::MCMC_CHAIN, chain as u64);
    let mut scale = cfg.scale;
    let mut current = init.to_vec();
    let mut current_lk = kernel(&current);
    let mut batch_accepts = 0usize;
    let mut accepts = 0usize;
    let mut draws = Vec::with_capacity(cfg.n_iter.saturating_sub(cfg.burn_in));
    for it in 0..cfg.n_iter {
        let z: Vec<f64> = (0..k).map(|_| StandardNormal.sample(&mut rng)).collect();
        let proposal: Vec<f64> = (0..k)
            .map(|a| current[a] + scale * (0..=a).map(|b| chol[(a, b)] * z[b]).sum::<f64>())
            .collect();
        let proposal_lk = kernel(&proposal);
        let log_u: f64 = rng.random::<f64>().ln();
        let accepted = proposal_lk.is_finite() && log_u < proposal_lk - current_lk;
        if accepted {
            current = proposal;
            current_lk = proposal_lk;
        }
        if it < cfg.burn_in {
            batch_accepts += accepted as usize;
            if cfg.adapt && (it + 1) % ADAPT_BATCH == 0 {
                let rate = batch_accepts as f64 / ADAPT_BATCH as f64;
                scale *= ((rate - TARGET_ACCEPTANCE) * 2.0).exp();
                batch_accepts = 0;
            }
        } else {
            accepts += accepted as usize;
            draws.push(current.clone());
        }
    }
    let kept = draws.len().max(1);
    Chain {
        acceptance_rate: accepts as f64 / kept as f64,
        draws,
        final_scale: scale,
    }
}

/// Gaussian random-walk Metropolis on a log kernel. Chains run in parallel,
/// each on its own stream; the proposal scale adapts only during burn-in.
pub fn rw_metropolis<F>(kernel: F, init: &[f64], config: &MetropolisConfig) -> Result<PosteriorDraws>
where
    F: Fn(&[f64]) -> f64 + Sync,
{
    if !(config.scale > 0.0) {
        return Err(Error::invalid("proposal scale must be positive"));
    }
    if config.n_chains == 0 || config.n_iter <= config.burn_in {
        return Err(Error::invalid("need n_chains >= 1 and n_iter > burn_in"));
    }
    if let Some(c) = &config.proposal_chol {
        if c.shape() != (init.len(), init.len()) {
            return Err(Error::invalid("proposal factor dimension differs from init"));
        }
    }
    if !kernel(init).is_finite() {
        return Err(Error::invalid("kernel is not finite at the initial point"));
    }
    let chains = (0..config.n_chains)
        .into_par_iter()
        .map(|c| run_chain(&kernel, init, config, c))
        .collect();
    Ok(PosteriorDraws {
        chains,
        burn_in: config.burn_in,
        seed: config.seed,
    })
}

// ---------------------------------------------------------------------------
// Summaries.

/// Fewest post-burn-in draws a summary accepts.
pub const MIN_SUMMARY_DRAWS: usize = 100;

#[derive(Clone, Debug)]
pub struct PosteriorSummary {
    pub mean: Vec<f64>,
    pub sd: Vec<f64>,
    /// 2.5%, 50% and 97.5% quantiles per dimension.
    pub quantiles: Vec<[f64; 3]>,
    pub ess: Vec<f64>,
    pub n_draws: usize,
}

impl PosteriorSummary {
    /// Monte Carlo standard error of each posterior mean.
    pub fn mcse(&self) -> Vec<f64> {
        self.sd.iter().zip(&self.ess).map(|(s, e)| s / e.sqrt()).collect()
    }
}

fn quantile(sorted: &[f64], q: f64) -> f64 {
    let pos = q * (sorted.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    sorted[lo] + (sorted[hi] - sorted[lo]) * (pos - lo as f64)
}

/// Effective sample size of one chain, summing autocorrelation pairs
/// until the first negative pair.
pub fn effective_sample_size(x: &[f64]) -> f64 {
    let n = x.len();
    let mean = x.iter().sum::<f64>() / n as f64;
    let c0 = x.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n as f64;
    if c0 == 0.0 {
        return n as f64;
    }
    let rho = |lag: usize| -> f64 {
        x[..n - lag]
            .iter()
            .zip(&x[lag..])
            .map(|(a, b)| (a - mean) * (b - mean))
            .sum::<f64>()
            / (n as f64 * c0)
    };
    let mut tau = -1.0;
    let mut lag = 0;
    while lag + 1 < n {
        let pair = rho(lag) + rho(lag + 1);
        if pair < 0.0 {
            break;
        }
        tau += 2.0 * pair;
        lag += 2;
    }
    (n as f64 / tau.max(1e-12)).min(n as f64)
}

pub fn posterior_summary(draws: &PosteriorDraws) -> Result<PosteriorSummary> {
    let all = draws.all_draws();
    if all.len() < MIN_SUMMARY_DRAWS {
        return Err(Error::InsufficientDraws {
            got: all.len(),
            needed: MIN_SUMMARY_DRAWS,
        });
    }
    let k = draws.dim();
    let n = all.len();
    let mut mean = vec![0.0; k];
    let mut sd = vec![0.0; k];
    let mut quantiles = Vec::with_capacity(k);
    let mut ess = vec![0.0; k];
    for d in 0..k {
        let xs: Vec<f64> = all.iter().map(|b| b[d]).collect();
        let m = pairwise_sum(&xs) / n as f64;
        let sq: Vec<f64> = xs.iter().map(|x| (x - m).powi(2)).collect();
        mean[d] = m;
        sd[d] = (pairwise_sum(&sq) / (n as f64 - 1.0)).sqrt();
        let mut sorted = xs;
        sorted.sort_by(f64::total_cmp);
        quantiles.push([quantile(&sorted, 0.025), quantile(&sorted, 0.5), quantile(&sorted, 0.975)]);
        ess[d] = draws
            .chains
            .iter()
            .filter(|c| c.draws.len() > 1)
            .map(|c| effective_sample_size(&c.draws.iter().map(|b| b[d]).collect::<Vec<_>>()))
            .sum::<f64>()
            .min(n as f64);
    }
    Ok(PosteriorSummary {
        mean,
        sd,
        quantiles,
        ess,
        n_draws: n,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::mle::{fit_mnl, FitOptions};
    use crate::model::{CorrectionMode, SampledSet};
    use crate::protocols::{draw_for_dataset, Protocol};
    use crate::synth::{generate_mnl, CovariateLaw, MnlDgpConfig};
    use proptest::prelude::*;

    fn data(n: usize, seed: u64) -> Dataset {
        generate_mnl(&MnlDgpConfig {
            n,
            j: 4,
            k: 1,
            beta_star: UtilityParams::new(vec![0.7]).unwrap(),
            covariate_law: CovariateLaw::StandardNormal,
            seed,
        })
        .unwrap()
    }

    #[test]
    fn prior_density_matches_closed_form() {
        let p = Prior::isotropic(1, 4.0).unwrap();
        let x: f64 = 1.3;
        let expected = -0.5 * (2.0 * std::f64::consts::PI * 4.0).ln() - x * x / 8.0;
        assert!((p.log_density(&[x]) - expected).abs() < 1e-14);
        assert!(Prior::normal(vec![0.0, 0.0], DMatrix::from_row_slice(2, 2, &[1.0, 2.0, 2.0, 1.0])).is_err());
    }

    #[test]
    fn grid_rules() {
        assert!(GridSpec::new(vec![-1.0], vec![1.0], 50).is_err());
        assert!(matches!(
            GridSpec::new(vec![0.0; 3], vec![1.0; 3], 51),
            Err(Error::UnsupportedDimension(3))
        ));
        let g = GridSpec::new(vec![-1.0, 0.0], vec![1.0, 2.0], 51).unwrap();
        assert_eq!(g.lattice().len(), 51 * 51);
        let total: f64 = g.log_weights().iter().map(|w| w.exp()).sum();
        assert!((total - 4.0).abs() < 1e-12);
        assert_eq!(g.doubled().points, 101);
    }

    #[test]
    fn empty_data_gives_prior() {
        let prior = Prior::isotropic(1, 1.0).unwrap();
        let spec = GridSpec::around_prior(&prior, 8.0, 401).unwrap();
        let post = grid_prior(&prior, &spec).unwrap();
        for (lp, ld) in post.log_prior.iter().zip(&post.log_density) {
            assert!((lp - ld).abs() < 1e-8);
        }
        assert!((post.total_mass() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn grid_mode_matches_mle() {
        let ds = data(800, 3);
        let fit = fit_mnl(&ds, ChoiceSets::Full, &UtilityParams::zeros(1), &FitOptions::default()).unwrap();
        let prior = Prior::isotropic(1, 1e6).unwrap();
        let spec = GridSpec::around_estimate(&fit, 6.0, 201).unwrap();
        let post = grid_posterior(&ds, ChoiceSets::Full, &prior, &spec).unwrap();
        assert!(post.converged, "delta {}", post.doubling_delta);
        assert!((post.mode()[0] - fit.estimate[0]).abs() <= spec.step(0));
        assert!((post.total_mass() - 1.0).abs() < 1e-8);
    }

    #[test]
    fn constant_modes_give_identical_posteriors() {
        let ds = data(60, 4);
        let sets = draw_for_dataset(&Protocol::uniform_wor(2).unwrap(), &ds, 2).unwrap();
        let prior = Prior::isotropic(1, 100.0).unwrap();
        let spec = GridSpec::new(vec![-2.0], vec![3.0], 101).unwrap();
        let none = grid_posterior(&ds, ChoiceSets::sampled(&sets, CorrectionMode::None), &prior, &spec).unwrap();
        let uc = grid_posterior(&ds, ChoiceSets::sampled(&sets, CorrectionMode::UniformConstant), &prior, &spec).unwrap();
        let mf = grid_posterior(&ds, ChoiceSets::sampled(&sets, CorrectionMode::McFadden), &prior, &spec).unwrap();
        for i in 0..none.log_density.len() {
            assert!((none.density()[i] - uc.density()[i]).abs() < 1e-12);
            assert!((none.density()[i] - mf.density()[i]).abs() < 1e-12);
        }
        assert!(kl_divergence_grid(&none, &mf).unwrap().abs() < 1e-10);
    }

    #[test]
    fn full_sets_as_sampled_give_zero_kl() {
        let ds = data(30, 5);
        let sets: Vec<SampledSet> = ds
            .observations()
            .iter()
            .map(|o| SampledSet::new(vec![0, 1, 2, 3], vec![0.0; 4], CorrectionMode::None, o.chosen).unwrap())
            .collect();
        let prior = Prior::isotropic(1, 10.0).unwrap();
        let spec = GridSpec::new(vec![-3.0], vec![3.0], 81).unwrap();
        let t = grid_posterior(&ds, ChoiceSets::Full, &prior, &spec).unwrap();
        let s = grid_posterior(&ds, ChoiceSets::sampled(&sets, CorrectionMode::None), &prior, &spec).unwrap();
        assert!(kl_divergence_grid(&t, &s).unwrap().abs() < 1e-10);
        let other = grid_posterior(&ds, ChoiceSets::Full, &prior, &GridSpec::new(vec![-3.0], vec![3.0], 83).unwrap()).unwrap();
        assert!(kl_divergence_grid(&t, &other).is_err());
    }

    #[test]
    fn kernel_flat_prior_tracks_loglik() {
        let ds = data(50, 6);
        let prior = Prior::isotropic(1, 1e12).unwrap();
        let a = UtilityParams::new(vec![0.2]).unwrap();
        let b = UtilityParams::new(vec![1.1]).unwrap();
        let dk = log_posterior_kernel(&a, &ds, ChoiceSets::Full, &prior).unwrap()
            - log_posterior_kernel(&b, &ds, ChoiceSets::Full, &prior).unwrap();
        let dl = quasi_loglik(&ds, ChoiceSets::Full, &a).unwrap() - quasi_loglik(&ds, ChoiceSets::Full, &b).unwrap();
        assert!((dk - dl).abs() < 1e-6);
    }

    #[test]
    fn metropolis_samples_standard_normal() {
        let prior = Prior::isotropic(1, 1.0).unwrap();
        let cfg = MetropolisConfig {
            n_chains: 2,
            n_iter: 30_000,
            burn_in: 5_000,
            scale: 0.5,
            seed: 9,
            ..Default::default()
        };
        let draws = rw_metropolis(|b| prior.log_density(b), &[0.0], &cfg).unwrap();
        let s = posterior_summary(&draws).unwrap();
        assert!(s.mean[0].abs() <= 3.0 / s.ess[0].sqrt(), "mean {} ess {}", s.mean[0], s.ess[0]);
        assert!((s.sd[0].powi(2) - 1.0).abs() < 0.1);
        assert!(s.ess[0] <= s.n_draws as f64);
        assert!((s.mean[0] - s.quantiles[0][1]).abs() < 0.05);
        for c in &draws.chains {
            assert!((c.acceptance_rate - TARGET_ACCEPTANCE).abs() < 0.1);
        }
    }

    #[test]
    fn metropolis_is_reproducible_and_checks_inputs() {
        let f = |b: &[f64]| -0.5 * b[0] * b[0];
        let cfg = MetropolisConfig { n_iter: 500, burn_in: 100, ..Default::default() };
        let a = rw_metropolis(f, &[0.0], &cfg).unwrap();
        let b = rw_metropolis(f, &[0.0], &cfg).unwrap();
        assert_eq!(a.all_draws(), b.all_draws());
        assert!(rw_metropolis(f, &[0.0], &MetropolisConfig { scale: 0.0, ..cfg.clone() }).is_err());
        let few = MetropolisConfig { n_chains: 1, n_iter: 150, burn_in: 100, ..cfg };
        assert!(matches!(
            posterior_summary(&rw_metropolis(f, &[0.0], &few).unwrap()),
            Err(Error::InsufficientDraws { got: 50, needed: 100 })
        ));
    }

    #[test]
    fn ess_of_white_noise_is_near_n() {
        let mut rng = streams::derive(1, 0, 0);
        let x: Vec<f64> = (0..5000).map(|_| StandardNormal.sample(&mut rng)).collect();
        let e = effective_sample_size(&x);
        assert!(e > 4000.0 && e <= 5000.0, "{e}");
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(16))]
        #[test]
        fn kl_nonnegative_and_decomposes(seed in 0u64..500, p0 in 0.1f64..0.9) {
            let ds = data(15, seed);
            let probs = vec![p0, 0.5, 1.0 - p0 * 0.5, 0.3];
            let sets = draw_for_dataset(&Protocol::importance(probs).unwrap(), &ds, seed).unwrap();
            let prior = Prior::isotropic(1, 2.0).unwrap();
            let spec = GridSpec::new(vec![-4.0], vec![4.0], 101).unwrap();
            let t = grid_posterior(&ds, ChoiceSets::Full, &prior, &spec).unwrap();
            for mode in [CorrectionMode::McFadden, CorrectionMode::None] {
                let s = grid_posterior(&ds, ChoiceSets::sampled(&sets, mode), &prior, &spec).unwrap();
                let d = kl_decomposition(&t, &s).unwrap();
                prop_assert!(d.kl >= -1e-10);
                prop_assert!(d.residual.abs() < 1e-8);
            }
        }
    }
}
