//! Synthetic datasets from known MNL and MMNL data-generating processes.

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::error::{Error, Result};
use crate::model::{softmax, Alternative, Dataset, Observation, UtilityParams};
use crate::streams::{self, domain, Stream};

#[derive(Clone, Debug, PartialEq)]
pub enum CovariateLaw {
    StandardNormal,
    Uniform01,
    /// The same `J × K` design for every observation.
    Fixed(Vec<Vec<f64>>),
    /// Standard normal noise around alternative-specific `J × K` means.
    ShiftedNormal(Vec<Vec<f64>>),
}

impl CovariateLaw {
    fn draw(&self, j: usize, k: usize, rng: &mut Stream) -> Vec<Vec<f64>> {
        match self {
            CovariateLaw::StandardNormal => (0..j)
                .map(|_| (0..k).map(|_| StandardNormal.sample(rng)).collect())
                .collect(),
            CovariateLaw::Uniform01 => (0..j)
                .map(|_| (0..k).map(|_| rng.random::<f64>()).collect())
                .collect(),
            CovariateLaw::Fixed(design) => design.clone(),
            CovariateLaw::ShiftedNormal(means) => means
                .iter()
                .map(|row| {
                    row.iter()
                        .map(|m| m + Distribution::<f64>::sample(&StandardNormal, rng))
                        .collect::<Vec<f64>>()
                })
                .collect(),
        }
    }

    fn validate(&self, j: usize, k: usize) -> Result<()> {
        if let CovariateLaw::Fixed(design) | CovariateLaw::ShiftedNormal(design) = self {
            if design.len() != j || design.iter().any(|row| row.len() != k) {
                return Err(Error::invalid(format!(
                    "fixed design or mean matrix must be {j} x {k}"
                )));
            }
        }
        Ok(())
    }
}

#[derive(Clone, Debug)]
pub struct MnlDgpConfig {
    pub n: usize,
    pub j: usize,
    pub k: usize,
    pub beta_star: UtilityParams,
    pub covariate_law: CovariateLaw,
    pub seed: u64,
}

#[derive(Clone, Debug)]
pub struct MmnlDgpConfig {
    pub individuals: usize,
    pub choices_per_individual: usize,
    pub j: usize,
    pub k: usize,
    pub mu_star: Vec<f64>,
    pub sigma_star: DMatrix<f64>,
    pub covariate_law: CovariateLaw,
    pub seed: u64,
}

/// A panel dataset with the individual-level coefficients that generated it.
#[derive(Clone, Debug)]
pub struct PanelData {
    pub dataset: Dataset,
    pub true_betas: Vec<UtilityParams>,
}

/// Inverse-CDF draw from a probability vector with a single uniform.
fn draw_index(probs: &[f64], rng: &mut Stream) -> usize {
    let u: f64 = rng.random();
    let mut cum = 0.0;
    for (idx, p) in probs.iter().enumerate() {
        cum += p;
        if u < cum {
            return idx;
        }
    }
    probs.len() - 1
}

fn choice_observation(
    obs_id: usize,
    individual_id: usize,
    law: &CovariateLaw,
    j: usize,
    beta: &[f64],
    rng: &mut Stream,
) -> Result<Observation> {
    let k = beta.len();
    let design = law.draw(j, k, rng);
    let alternatives: Vec<Alternative> = design
        .into_iter()
        .enumerate()
        .map(|(id, attributes)| Alternative { id, attributes })
        .collect();
    let v: Vec<f64> = alternatives
        .iter()
        .map(|a| crate::model::dot(&a.attributes, beta))
        .collect();
    let chosen = draw_index(&softmax(&v), rng);
    Observation::new(obs_id, individual_id, alternatives, chosen)
}

/// Cross-sectional MNL data; each observation is its own individual.
pub fn generate_mnl(config: &MnlDgpConfig) -> Result<Dataset> {
    if config.n == 0 || config.j < 2 || config.k == 0 {
        return Err(Error::invalid(format!(
            "MNL DGP needs N >= 1, J >= 2, K >= 1 (got N={}, J={}, K={})",
            config.n, config.j, config.k
        )));
    }
    if config.beta_star.len() != config.k {
        return Err(Error::invalid("beta_star length differs from K"));
    }
    config.covariate_law.validate(config.j, config.k)?;
    let obs = (0..config.n)
        .map(|n| {
            let mut rng = streams::derive(config.seed, domain::MNL_DGP, n as u64);
            choice_observation(
                n,
                n,
                &config.covariate_law,
                config.j,
                config.beta_star.as_slice(),
                &mut rng,
            )
        })
        .collect::<Result<Vec<_>>>()?;
    Dataset::new(obs)
}

/// Panel MMNL data: `β_n ~ N(μ*, Σ*)` once per individual, then
/// `choices_per_individual` MNL choices with fresh covariates each.
pub fn generate_mmnl(config: &MmnlDgpConfig) -> Result<PanelData> {
    let k = config.k;
    if config.individuals == 0 || config.choices_per_individual == 0 || config.j < 2 || k == 0 {
        return Err(Error::invalid("MMNL DGP needs N, T, K >= 1 and J >= 2"));
    }
    if config.mu_star.len() != k || config.sigma_star.shape() != (k, k) {
        return Err(Error::invalid("mu_star / sigma_star dimensions differ from K"));
    }
    config.covariate_law.validate(config.j, k)?;
    let chol = crate::linalg::cholesky(&config.sigma_star)
        .map_err(|_| Error::invalid("sigma_star is not symmetric positive-definite"))?;
    let mu = DVector::from_column_slice(&config.mu_star);
    let t = config.choices_per_individual;
    let mut observations = Vec::with_capacity(config.individuals * t);
    let mut true_betas = Vec::with_capacity(config.individuals);
    for n in 0..config.individuals {
        let mut beta_rng = streams::derive(config.seed, domain::MMNL_INDIVIDUAL, n as u64);
        let z = DVector::from_fn(k, |_, _| StandardNormal.sample(&mut beta_rng));
        let beta: Vec<f64> = (&mu + &chol * z).iter().copied().collect();
        let mut rng = streams::derive(config.seed, domain::MMNL_CHOICE, n as u64);
        for s in 0..t {
            observations.push(choice_observation(
                n * t + s,
                n,
                &config.covariate_law,
                config.j,
                &beta,
                &mut rng,
            )?);
        }
        true_betas.push(UtilityParams::new(beta)?);
    }
    Ok(PanelData {
        dataset: Dataset::new(observations)?,
        true_betas,
    })
}
