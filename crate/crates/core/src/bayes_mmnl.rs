//! Hierarchical Bayes mixed logit: a three-step Gibbs sampler with data
//! augmentation over the individual coefficients `β_n`.
//!
//! Steps 1 and 2 update `μ` and `Σ` from conjugate posteriors and see only
//! the [`MixingState`] and the priors, never the choice data. Step 3 moves
//! each `β_n` by one Metropolis–Hastings step against the individual's
//! (full or sampled-set) likelihood times the normal mixing density.

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::linalg::{cholesky, inverse_wishart_draw, mvn_draw, spd_inverse, vech};
use crate::model::{log_choice_prob, ChoiceSets, CorrectionMode, Dataset, Observation, SampledSet};
use crate::streams::{self, domain, Stream};

#[derive(Clone, Debug, PartialEq)]
pub struct MixingState {
    pub mu: DVector<f64>,
    pub sigma: DMatrix<f64>,
    /// One row per individual.
    pub beta_all: DMatrix<f64>,
}

impl MixingState {
    pub fn new(mu: DVector<f64>, sigma: DMatrix<f64>, beta_all: DMatrix<f64>) -> Result<Self> {
        let k = mu.len();
        if sigma.shape() != (k, k) || beta_all.ncols() != k {
            return Err(Error::invalid("mixing state dimensions disagree"));
        }
        if beta_all.nrows() == 0 {
            return Err(Error::invalid("mixing state needs at least one individual"));
        }
        cholesky(&sigma)?;
        Ok(Self { mu, sigma, beta_all })
    }

    pub fn k(&self) -> usize {
        self.mu.len()
    }

    pub fn individuals(&self) -> usize {
        self.beta_all.nrows()
    }

    fn beta_mean(&self) -> DVector<f64> {
        let n = self.individuals() as f64;
        DVector::from_fn(self.k(), |d, _| self.beta_all.column(d).sum() / n)
    }
}

#[derive(Clone, Debug)]
pub struct MmnlPriors {
    pub m0: DVector<f64>,
    pub a0: DMatrix<f64>,
    pub v0: f64,
    pub s0: DMatrix<f64>,
}

impl MmnlPriors {
    pub fn new(m0: DVector<f64>, a0: DMatrix<f64>, v0: f64, s0: DMatrix<f64>) -> Result<Self> {
        let k = m0.len();
        if a0.shape() != (k, k) || s0.shape() != (k, k) {
            return Err(Error::invalid("prior dimensions disagree"));
        }
        cholesky(&a0).map_err(|_| Error::invalid("A0 must be positive-definite"))?;
        cholesky(&s0).map_err(|_| Error::invalid("S0 must be positive-definite"))?;
        if !(v0 > k as f64 - 1.0) {
            return Err(Error::invalid(format!("v0 must exceed K - 1, got {v0}")));
        }
        Ok(Self { m0, a0, v0, s0 })
    }

    /// `m0 = 0`, `A0 = 100·I`, `v0 = K + 2`, `S0 = I`.
    pub fn default_for(k: usize) -> Self {
        Self {
            m0: DVector::zeros(k),
            a0: DMatrix::identity(k, k) * 100.0,
            v0: k as f64 + 2.0,
            s0: DMatrix::identity(k, k),
        }
    }
}

/// Mean and covariance of `μ | β_{1..N}, Σ`.
pub fn mu_posterior(state: &MixingState, priors: &MmnlPriors) -> Result<(DVector<f64>, DMatrix<f64>)> {
    let n = state.individuals() as f64;
    let a0_inv = spd_inverse(&priors.a0)?;
    let sigma_inv = spd_inverse(&state.sigma)?;
    let cov = spd_inverse(&(&a0_inv + &sigma_inv * n))?;
    let mean = &cov * (&a0_inv * &priors.m0 + &sigma_inv * state.beta_mean() * n);
    Ok((mean, cov))
}

/// Degrees of freedom and scale of `Σ | β_{1..N}, μ`.
pub fn sigma_posterior(state: &MixingState, priors: &MmnlPriors) -> (f64, DMatrix<f64>) {
    let mut scale = priors.s0.clone();
    for row in state.beta_all.row_iter() {
        let d = row.transpose() - &state.mu;
        scale += &d * d.transpose();
    }
    (priors.v0 + state.individuals() as f64, scale)
}

/// Step 1: `μ ~ N(Λ(A0⁻¹m0 + NΣ⁻¹β̄), Λ)`, `Λ = (A0⁻¹ + NΣ⁻¹)⁻¹`.
pub fn gibbs_step_mu<R: Rng + ?Sized>(state: &MixingState, priors: &MmnlPriors, rng: &mut R) -> Result<DVector<f64>> {
    let (mean, cov) = mu_posterior(state, priors)?;
    Ok(mvn_draw(&mean, &cholesky(&cov)?, rng))
}

/// Step 2: `Σ ~ IW(v0 + N, S0 + Σ_n (β_n − μ)(β_n − μ)ᵀ)`.
pub fn gibbs_step_sigma<R: Rng + ?Sized>(state: &MixingState, priors: &MmnlPriors, rng: &mut R) -> Result<DMatrix<f64>> {
    let (dof, scale) = sigma_posterior(state, priors);
    let draw = inverse_wishart_draw(dof, &scale, rng)?;
    cholesky(&draw)?;
    Ok(draw)
}

/// One individual's observations and the choice sets attached to them.
#[derive(Clone, Debug, Default)]
pub struct IndividualData<'a> {
    pub observations: Vec<&'a Observation>,
    pub sets: Vec<Option<(&'a SampledSet, CorrectionMode)>>,
}

impl<'a> IndividualData<'a> {
    pub fn from_dataset(dataset: &'a Dataset, sets: ChoiceSets<'a>, indices: &[usize]) -> Self {
        Self {
            observations: indices.iter().map(|&i| &dataset.observations()[i]).collect(),
            sets: indices.iter().map(|&i| sets.for_obs(i)).collect(),
        }
    }

    /// `ln P(Y_n | β, sets)`; zero when the individual has no observations.
    pub fn loglik(&self, beta: &[f64]) -> f64 {
        self.observations
            .iter()
            .zip(&self.sets)
            .map(|(o, s)| log_choice_prob(o, *s, beta))
            .sum()
    }
}

/// Mixing density `ln f(β|μ, Σ)` up to a constant, from the lower factor.
fn log_mixing(beta: &[f64], mu: &DVector<f64>, lower: &DMatrix<f64>) -> f64 {
    let d = DVector::from_iterator(mu.len(), beta.iter().zip(mu.iter()).map(|(b, m)| b - m));
    let z = lower
        .solve_lower_triangular(&d)
        .expect("Cholesky factor is non-singular");
    -0.5 * z.norm_squared()
}

fn mh_step(
    data: &IndividualData<'_>,
    beta: &[f64],
    current_ll: f64,
    mu: &DVector<f64>,
    lower: &DMatrix<f64>,
    rho: f64,
    rng: &mut Stream,
) -> (Vec<f64>, f64, bool) {
    let k = beta.len();
    let z: Vec<f64> = (0..k).map(|_| StandardNormal.sample(rng)).collect();
    let proposal: Vec<f64> = (0..k)
        .map(|a| beta[a] + rho * (0..=a).map(|b| lower[(a, b)] * z[b]).sum::<f64>())
        .collect();
    let proposal_ll = data.loglik(&proposal);
    let log_ratio = proposal_ll - current_ll + log_mixing(&proposal, mu, lower) - log_mixing(beta, mu, lower);
    let log_u = rng.random::<f64>().ln();
    if proposal_ll.is_finite() && log_u < log_ratio {
        (proposal, proposal_ll, true)
    } else {
        (beta.to_vec(), current_ll, false)
    }
}

/// Step 3 for one individual: proposal `β′ = β_n + ρ·L·z` with `L` the
/// Cholesky factor of `Σ`, accepted against `P(Y_n|β)·f(β|μ, Σ)`.
pub fn gibbs_step_beta_n(
    state: &MixingState,
    n: usize,
    data: &IndividualData<'_>,
    rho: f64,
    rng: &mut Stream,
) -> Result<(DVector<f64>, bool)> {
    if n >= state.individuals() {
        return Err(Error::invalid(format!("individual {n} out of range")));
    }
    let lower = cholesky(&state.sigma)?;
    let beta: Vec<f64> = state.beta_all.row(n).iter().copied().collect();
    let (b, _, accepted) = mh_step(data, &beta, data.loglik(&beta), &state.mu, &lower, rho, rng);
    Ok((DVector::from_vec(b), accepted))
}

#[derive(Clone, Debug)]
pub struct GibbsConfig {
    pub iterations: usize,
    pub burn_in: usize,
    pub thin: usize,
    pub seed: u64,
    /// Initial step-3 proposal scale.
    pub rho: f64,
    /// Adapt each individual's `ρ` towards the target acceptance during
    /// burn-in.
    pub adapt: bool,
    pub store_beta_n: bool,
}

impl Default for GibbsConfig {
    fn default() -> Self {
        Self {
            iterations: 20_000,
            burn_in: 10_000,
            thin: 1,
            seed: 1,
            rho: 0.4,
            adapt: true,
            store_beta_n: false,
        }
    }
}

impl GibbsConfig {
    pub fn validate(&self) -> Result<()> {
        if self.iterations <= self.burn_in {
            return Err(Error::invalid("iterations must exceed burn_in"));
        }
        if self.thin == 0 {
            return Err(Error::invalid("thin must be at least 1"));
        }
        if !(self.rho >= 0.0) {
            return Err(Error::invalid("rho must be non-negative"));
        }
        Ok(())
    }
}

pub const TARGET_ACCEPTANCE: f64 = 0.3;
const ADAPT_BATCH: usize = 50;
const MAX_RETRIES: usize = 3;

#[derive(Clone, Debug)]
pub struct GibbsDraws {
    pub mu: Vec<DVector<f64>>,
    pub sigma: Vec<DMatrix<f64>>,
    /// `N × K` per stored iteration, when requested.
    pub beta_n: Option<Vec<DMatrix<f64>>>,
    /// Post-burn-in step-3 acceptance rate per individual.
    pub acceptance: Vec<f64>,
    pub final_rho: Vec<f64>,
    pub degeneracy_events: usize,
    pub burn_in: usize,
    pub thin: usize,
    pub seed: u64,
}

impl GibbsDraws {
    pub fn mu_mean(&self) -> DVector<f64> {
        let n = self.mu.len() as f64;
        self.mu.iter().fold(DVector::zeros(self.mu[0].len()), |a, m| a + m) / n
    }

    pub fn mu_sd(&self) -> DVector<f64> {
        let mean = self.mu_mean();
        let n = self.mu.len() as f64;
        let var = self
            .mu
            .iter()
            .fold(DVector::zeros(mean.len()), |a, m| a + (m - &mean).map(|x| x * x))
            / (n - 1.0);
        var.map(f64::sqrt)
    }

    pub fn sigma_mean(&self) -> DMatrix<f64> {
        let k = self.mu[0].len();
        self.sigma.iter().fold(DMatrix::zeros(k, k), |a, s| a + s) / self.sigma.len() as f64
    }

    /// Posterior mean of every `β_n`, when stored.
    pub fn beta_n_mean(&self) -> Option<DMatrix<f64>> {
        let b = self.beta_n.as_ref()?;
        let (r, c) = b[0].shape();
        Some(b.iter().fold(DMatrix::zeros(r, c), |a, m| a + m) / b.len() as f64)
    }

    /// Flattened `(μ, vech Σ)` per stored iteration.
    pub fn rows(&self) -> Vec<Vec<f64>> {
        self.mu
            .iter()
            .zip(&self.sigma)
            .map(|(m, s)| m.iter().copied().chain(vech(s)).collect())
            .collect()
    }
}

struct Walker {
    beta: Vec<f64>,
    ll: f64,
    rng: Stream,
    rho: f64,
    batch: usize,
    accepts: usize,
}

fn hyper_steps(
    state: &MixingState,
    priors: &MmnlPriors,
    rng: &mut Stream,
) -> Result<(DVector<f64>, DMatrix<f64>)> {
    let mu = gibbs_step_mu(state, priors, rng)?;
    let with_mu = MixingState {
        mu: mu.clone(),
        sigma: state.sigma.clone(),
        beta_all: state.beta_all.clone(),
    };
    let sigma = gibbs_step_sigma(&with_mu, priors, rng)?;
    Ok((mu, sigma))
}

/// Runs the three-step sampler. Sampled sets are whatever `sets` holds and
/// stay fixed for the whole run.
pub fn run_gibbs(dataset: &Dataset, sets: ChoiceSets<'_>, priors: &MmnlPriors, config: &GibbsConfig) -> Result<GibbsDraws> {
    config.validate()?;
    sets.validate(dataset)?;
    let k = dataset.k();
    if priors.m0.len() != k {
        return Err(Error::invalid("prior dimension differs from K"));
    }
    let groups = dataset.individuals();
    let people: Vec<IndividualData<'_>> = groups
        .iter()
        .map(|idx| IndividualData::from_dataset(dataset, sets, idx))
        .collect();
    let n = people.len();

    let mut state = MixingState::new(
        priors.m0.clone(),
        priors.s0.clone(),
        DMatrix::from_fn(n, k, |_, d| priors.m0[d]),
    )?;
    let mut hyper_rng = streams::derive(config.seed, domain::GIBBS_HYPER, 0);
    let mut walkers: Vec<Walker> = people
        .iter()
        .enumerate()
        .map(|(i, p)| {
            let beta: Vec<f64> = state.beta_all.row(i).iter().copied().collect();
            Walker {
                ll: p.loglik(&beta),
                beta,
                rng: streams::derive(config.seed, domain::GIBBS_BETA, i as u64),
                rho: config.rho,
                batch: 0,
                accepts: 0,
            }
        })
        .collect();

    let stored = (config.iterations - config.burn_in).div_ceil(config.thin);
    let mut mu_draws = Vec::with_capacity(stored);
    let mut sigma_draws = Vec::with_capacity(stored);
    let mut beta_draws = config.store_beta_n.then(|| Vec::with_capacity(stored));
    let mut degeneracy_events = 0;

    for it in 0..config.iterations {
        // Steps 1 and 2, retried with a jittered state on degeneracy.
        let mut attempt = 0;
        loop {
            match hyper_steps(&state, priors, &mut hyper_rng) {
                Ok((mu, sigma)) => {
                    state.mu = mu;
                    state.sigma = sigma;
                    break;
                }
                Err(e) => {
                    degeneracy_events += 1;
                    log::warn!("iteration {it}: {e}; retry {}", attempt + 1);
                    if attempt == MAX_RETRIES {
                        break;
                    }
                    let mut jitter = streams::derive(config.seed, domain::GIBBS_INIT, (it * 4 + attempt) as u64);
                    for v in state.beta_all.iter_mut() {
                        *v += 1e-6 * <StandardNormal as Distribution<f64>>::sample(&StandardNormal, &mut jitter);
                    }
                    attempt += 1;
                }
            }
        }

        // Step 3, in parallel over individuals.
        let lower = cholesky(&state.sigma)?;
        let mu = &state.mu;
        let burning = it < config.burn_in;
        walkers.par_iter_mut().zip(&people).for_each(|(w, p)| {
            let (b, ll, accepted) = mh_step(p, &w.beta, w.ll, mu, &lower, w.rho, &mut w.rng);
            w.beta = b;
            w.ll = ll;
            if burning {
                w.batch += accepted as usize;
                if config.adapt && (it + 1) % ADAPT_BATCH == 0 {
                    let rate = w.batch as f64 / ADAPT_BATCH as f64;
                    w.rho *= ((rate - TARGET_ACCEPTANCE) * 2.0).exp();
                    w.batch = 0;
                }
            } else {
                w.accepts += accepted as usize;
            }
        });
        for (i, w) in walkers.iter().enumerate() {
            for d in 0..k {
                state.beta_all[(i, d)] = w.beta[d];
            }
        }

        if !burning && (it - config.burn_in) % config.thin == 0 {
            mu_draws.push(state.mu.clone());
            sigma_draws.push(state.sigma.clone());
            if let Some(b) = beta_draws.as_mut() {
                b.push(state.beta_all.clone());
            }
        }
    }

    let post = (config.iterations - config.burn_in) as f64;
    Ok(GibbsDraws {
        mu: mu_draws,
        sigma: sigma_draws,
        beta_n: beta_draws,
        acceptance: walkers.iter().map(|w| w.accepts as f64 / post).collect(),
        final_rho: walkers.iter().map(|w| w.rho).collect(),
        degeneracy_events,
        burn_in: config.burn_in,
        thin: config.thin,
        seed: config.seed,
    })
}
