//! Classical estimation: quasi log-likelihood maximisation for MNL on
//! sampled sets, and maximum simulated likelihood for panel MMNL with an
//! optional `W_n` expansion factor.

use nalgebra::DMatrix;
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::halton::{HaltonDraws, DEFAULT_SKIP};
use crate::linalg::{pairwise_sum, pairwise_sum_vecs, spd_inverse};
use crate::model::{
    dot, lse, log_choice_prob, ChoiceSets, CorrectionMode, Dataset, Observation, SampledSet,
    UtilityParams,
};
use crate::optim::{minimize, numerical_gradient, numerical_hessian, BfgsOptions, Objective};

#[derive(Clone, Debug)]
pub struct FitResult {
    /// `β̂` for MNL; `(μ̂, vech L̂)` for MMNL, with `L` the lower Cholesky
    /// factor of `Σ` on its natural scale.
    pub estimate: Vec<f64>,
    pub std_errors: Vec<f64>,
    pub param_names: Vec<String>,
    pub loglik: f64,
    pub converged: bool,
    pub iterations: usize,
    pub grad_max_norm: f64,
}

impl FitResult {
    pub fn beta(&self) -> Result<UtilityParams> {
        UtilityParams::new(self.estimate.clone())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum WnMode {
    /// `W_n = 1`: McFadden's correction only.
    NaiveOne,
    /// `W_n` evaluated on the full choice set, with the denominator's
    /// `P(j|θ, C_n)` averaged over the same draws used by the likelihood.
    ExactFullSet,
}

impl std::str::FromStr for WnMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim() {
            "naive_one" | "naive" => Ok(WnMode::NaiveOne),
            "exact_full_set" | "exact" => Ok(WnMode::ExactFullSet),
            other => Err(Error::invalid(format!("unknown W_n mode '{other}'"))),
        }
    }
}

#[derive(Clone, Debug)]
pub struct FitOptions {
    pub tol: f64,
    pub max_iter: usize,
}

impl Default for FitOptions {
    fn default() -> Self {
        Self {
            tol: 1e-6,
            max_iter: 500,
        }
    }
}

/// Log-probability of the chosen alternative and its gradient in `β`.
fn obs_loglik_grad(
    obs: &Observation,
    set: Option<(&SampledSet, CorrectionMode)>,
    beta: &[f64],
) -> (f64, Vec<f64>) {
    let k = beta.len();
    let (ids, corr): (Vec<usize>, Vec<f64>) = match set {
        None => ((0..obs.num_alternatives()).collect(), vec![0.0; obs.num_alternatives()]),
        Some((s, mode)) => (
            s.member_ids().to_vec(),
            (0..s.len()).map(|p| s.correction_at(p, mode)).collect(),
        ),
    };
    let u: Vec<f64> = ids
        .iter()
        .zip(&corr)
        .map(|(&id, c)| dot(obs.attributes(id), beta) + c)
        .collect();
    let denom = lse(&u);
    let mut grad = obs.attributes(obs.chosen).to_vec();
    let mut chosen_u = 0.0;
    for (pos, &id) in ids.iter().enumerate() {
        let p = (u[pos] - denom).exp();
        let x = obs.attributes(id);
        for d in 0..k {
            grad[d] -= p * x[d];
        }
        if id == obs.chosen {
            chosen_u = u[pos];
        }
    }
    (chosen_u - denom, grad)
}

fn loglik_unchecked(dataset: &Dataset, sets: ChoiceSets<'_>, beta: &[f64]) -> f64 {
    let terms: Vec<f64> = dataset
        .observations()
        .par_iter()
        .enumerate()
        .map(|(idx, obs)| log_choice_prob(obs, sets.for_obs(idx), beta))
        .collect();
    pairwise_sum(&terms)
}

fn grad_unchecked(dataset: &Dataset, sets: ChoiceSets<'_>, beta: &[f64]) -> Vec<f64> {
    let terms: Vec<Vec<f64>> = dataset
        .observations()
        .par_iter()
        .enumerate()
        .map(|(idx, obs)| obs_loglik_grad(obs, sets.for_obs(idx), beta).1)
        .collect();
    pairwise_sum_vecs(&terms, beta.len())
}

fn check_beta(dataset: &Dataset, beta: &UtilityParams) -> Result<()> {
    if beta.len() != dataset.k() {
        return Err(Error::invalid(format!(
            "beta has length {}, dataset has K = {}",
            beta.len(),
            dataset.k()
        )));
    }
    Ok(())
}

/// `Σ_n ln( exp(V_in + c_in) / Σ_{j∈D_n} exp(V_jn + c_jn) )`; with
/// [`ChoiceSets::Full`] this is the full-model log-likelihood.
pub fn quasi_loglik(dataset: &Dataset, sets: ChoiceSets<'_>, beta: &UtilityParams) -> Result<f64> {
    sets.validate(dataset)?;
    check_beta(dataset, beta)?;
    Ok(loglik_unchecked(dataset, sets, beta.as_slice()))
}

/// Analytic gradient of [`quasi_loglik`].
pub fn quasi_loglik_grad(
    dataset: &Dataset,
    sets: ChoiceSets<'_>,
    beta: &UtilityParams,
) -> Result<Vec<f64>> {
    sets.validate(dataset)?;
    check_beta(dataset, beta)?;
    Ok(grad_unchecked(dataset, sets, beta.as_slice()))
}

struct NegQuasiLoglik<'a> {
    dataset: &'a Dataset,
    sets: ChoiceSets<'a>,
}

impl Objective for NegQuasiLoglik<'_> {
    fn value(&self, x: &[f64]) -> f64 {
        -loglik_unchecked(self.dataset, self.sets, x)
    }

    fn gradient(&self, x: &[f64]) -> Vec<f64> {
        grad_unchecked(self.dataset, self.sets, x)
            .into_iter()
            .map(|g| -g)
            .collect()
    }
}

fn standard_errors<O: Objective>(obj: &O, x: &[f64]) -> Vec<f64> {
    let hess = numerical_hessian(obj, x);
    match spd_inverse(&hess) {
        Ok(cov) => (0..x.len()).map(|i| cov[(i, i)].sqrt()).collect(),
        Err(_) => vec![f64::NAN; x.len()],
    }
}

/// Maximises the (quasi) log-likelihood with BFGS. Non-convergence is
/// reported through `converged = false`, never as an error.
pub fn fit_mnl(
    dataset: &Dataset,
    sets: ChoiceSets<'_>,
    init: &UtilityParams,
    opts: &FitOptions,
) -> Result<FitResult> {
    sets.validate(dataset)?;
    check_beta(dataset, init)?;
    let obj = NegQuasiLoglik { dataset, sets };
    let bfgs = BfgsOptions {
        grad_tol: opts.tol,
        max_iter: opts.max_iter,
        ..Default::default()
    };
    let min = minimize(&obj, init.as_slice(), &bfgs);
    let std_errors = standard_errors(&obj, &min.x);
    Ok(FitResult {
        param_names: (0..dataset.k()).map(|d| format!("beta[{d}]")).collect(),
        grad_max_norm: min.gradient.iter().fold(0.0f64, |m, g| m.max(g.abs())),
        estimate: min.x,
        std_errors,
        loglik: -min.value,
        converged: min.converged,
        iterations: min.iterations,
    })
}

// ---------------------------------------------------------------------------
// Mixed logit by maximum simulated likelihood.

/// Number of free parameters for `K` random coefficients.
pub fn mmnl_param_count(k: usize) -> usize {
    k + k * (k + 1) / 2
}

/// Unpacks `θ = (μ, vech L)` where diagonal entries of `L` are stored as
/// logs. Off-diagonals are row-major lower triangle.
pub fn unpack_theta(theta: &[f64], k: usize) -> (Vec<f64>, DMatrix<f64>) {
    let mu = theta[..k].to_vec();
    let mut l = DMatrix::zeros(k, k);
    let mut idx = k;
    for i in 0..k {
        for j in 0..=i {
            l[(i, j)] = if i == j { theta[idx].exp() } else { theta[idx] };
            idx += 1;
        }
    }
    (mu, l)
}

/// Inverse of [`unpack_theta`].
pub fn pack_theta(mu: &[f64], lower: &DMatrix<f64>) -> Result<Vec<f64>> {
    let k = mu.len();
    let mut out = mu.to_vec();
    for i in 0..k {
        for j in 0..=i {
            if i == j {
                if lower[(i, i)] <= 0.0 {
                    return Err(Error::invalid("Cholesky diagonal must be positive"));
                }
                out.push(lower[(i, i)].ln());
            } else {
                out.push(lower[(i, j)]);
            }
        }
    }
    Ok(out)
}

fn beta_from_draw(mu: &[f64], lower: &DMatrix<f64>, z: &[f64]) -> Vec<f64> {
    let k = mu.len();
    (0..k)
        .map(|a| mu[a] + (0..=a).map(|b| lower[(a, b)] * z[b]).sum::<f64>())
        .collect()
}

/// Full-set probabilities `P(j|β_r, C_n)` averaged over the draw set.
pub fn draw_averaged_full_probs(obs: &Observation, betas: &[Vec<f64>]) -> Vec<f64> {
    let j = obs.num_alternatives();
    let mut avg = vec![0.0; j];
    for beta in betas {
        let v = obs.utilities(beta);
        let denom = lse(&v);
        for (a, vj) in avg.iter_mut().zip(&v) {
            *a += (vj - denom).exp();
        }
    }
    avg.iter_mut().for_each(|a| *a /= betas.len() as f64);
    avg
}

fn full_probs(obs: &Observation, beta: &[f64]) -> Vec<f64> {
    let v = obs.utilities(beta);
    let denom = lse(&v);
    v.iter().map(|x| (x - denom).exp()).collect()
}

/// `ln Σ_{j∈D} π(D|j) P(j|·, C)` for full-set probabilities `probs`.
fn log_set_prob(set: &SampledSet, probs: &[f64]) -> f64 {
    let terms: Vec<f64> = set
        .member_ids()
        .iter()
        .zip(set.log_cond_prob())
        .map(|(&id, l)| l + probs[id].ln())
        .collect();
    lse(&terms)
}

/// Expansion factor
/// `W_n = Σ_{j∈D} π(D|j) P(j|β_draw, C) / Σ_{j∈D} π(D|j) P(j|θ, C)`,
/// where `theta_full_probs` holds the (draw-averaged) `P(j|θ, C)` for every
/// alternative in `C_n`.
pub fn compute_wn(
    beta_draw: &UtilityParams,
    theta_full_probs: &[f64],
    observation: &Observation,
    set: &SampledSet,
) -> Result<f64> {
    if theta_full_probs.len() != observation.num_alternatives() {
        return Err(Error::invalid("theta probabilities must cover the full choice set"));
    }
    set.check_against(observation, CorrectionMode::McFadden)?;
    let ln_den = log_set_prob(set, theta_full_probs);
    if !ln_den.is_finite() {
        return Err(Error::NumericalDegeneracy("W_n denominator underflows to zero".into()));
    }
    Ok((log_set_prob(set, &full_probs(observation, beta_draw.as_slice())) - ln_den).exp())
}

#[derive(Clone, Debug)]
pub struct MslOptions {
    pub wn_mode: WnMode,
    pub draws_per_individual: usize,
    pub halton_skip: usize,
    pub tol: f64,
    pub max_iter: usize,
}

impl Default for MslOptions {
    fn default() -> Self {
        Self {
            wn_mode: WnMode::NaiveOne,
            draws_per_individual: 100,
            halton_skip: DEFAULT_SKIP,
            tol: 1e-5,
            max_iter: 300,
        }
    }
}

/// Simulated log-likelihood of a panel MMNL with fixed draws.
pub struct SimulatedLikelihood<'a> {
    dataset: &'a Dataset,
    sets: ChoiceSets<'a>,
    individuals: Vec<Vec<usize>>,
    draws: HaltonDraws,
    wn_mode: WnMode,
    k: usize,
}

impl<'a> SimulatedLikelihood<'a> {
    pub fn new(
        dataset: &'a Dataset,
        sets: ChoiceSets<'a>,
        wn_mode: WnMode,
        draws_per_individual: usize,
        halton_skip: usize,
    ) -> Result<Self> {
        sets.validate(dataset)?;
        if draws_per_individual == 0 {
            return Err(Error::invalid("MSL needs at least one draw per individual"));
        }
        let individuals = dataset.individuals();
        let k = dataset.k();
        let draws = HaltonDraws::new(individuals.len(), draws_per_individual, k, halton_skip);
        Ok(Self {
            dataset,
            sets,
            individuals,
            draws,
            wn_mode,
            k,
        })
    }

    pub fn draws(&self) -> &HaltonDraws {
        &self.draws
    }

    fn individual_betas(&self, n: usize, mu: &[f64], lower: &DMatrix<f64>) -> Vec<Vec<f64>> {
        self.draws
            .individual(n)
            .iter()
            .map(|z| beta_from_draw(mu, lower, z))
            .collect()
    }

    /// Per-draw log kernels `ln W_n(β_r) + Σ_t ln P(i_t|β_r, D_t)`.
    ///
    /// In exact mode `W_n(β_r) = Π_t π(D_t|β_r) / π(D_n|θ)`, where the
    /// panel denominator `π(D_n|θ) = ∫ Π_t π(D_t|β) f(β|θ) dβ` is averaged
    /// over the same draws. With one choice per individual this is the
    /// per-observation factor of [`compute_wn`].
    fn draw_log_kernels(&self, n: usize, betas: &[Vec<f64>]) -> Result<Vec<f64>> {
        let mut kernels = vec![0.0; betas.len()];
        let exact = self.wn_mode == WnMode::ExactFullSet && matches!(self.sets, ChoiceSets::Sampled { .. });
        let mut ln_pi_d = vec![0.0; if exact { betas.len() } else { 0 }];
        for &idx in &self.individuals[n] {
            let obs = &self.dataset.observations()[idx];
            let set = self.sets.for_obs(idx);
            for (r, beta) in betas.iter().enumerate() {
                kernels[r] += log_choice_prob(obs, set, beta);
                if let (true, Some((s, _))) = (exact, set) {
                    ln_pi_d[r] += log_set_prob(s, &full_probs(obs, beta));
                }
            }
        }
        if exact {
            let ln_den = lse(&ln_pi_d) - (betas.len() as f64).ln();
            if !ln_den.is_finite() {
                return Err(Error::NumericalDegeneracy("W_n denominator underflows to zero".into()));
            }
            kernels.iter_mut().zip(&ln_pi_d).for_each(|(k, l)| *k += l - ln_den);
        }
        Ok(kernels)
    }

    pub fn loglik(&self, theta: &[f64]) -> Result<f64> {
        if theta.len() != mmnl_param_count(self.k) {
            return Err(Error::invalid(format!(
                "theta has length {}, expected {}",
                theta.len(),
                mmnl_param_count(self.k)
            )));
        }
        let (mu, lower) = unpack_theta(theta, self.k);
        let ln_r = (self.draws.per_individual() as f64).ln();
        let terms = (0..self.individuals.len())
            .into_par_iter()
            .map(|n| {
                let betas = self.individual_betas(n, &mu, &lower);
                Ok(lse(&self.draw_log_kernels(n, &betas)?) - ln_r)
            })
            .collect::<Result<Vec<f64>>>()?;
        Ok(pairwise_sum(&terms))
    }

    /// Analytic gradient for the naive estimator.
    fn naive_gradient(&self, theta: &[f64]) -> Vec<f64> {
        let k = self.k;
        let (mu, lower) = unpack_theta(theta, k);
        let p = theta.len();
        let terms: Vec<Vec<f64>> = (0..self.individuals.len())
            .into_par_iter()
            .map(|n| {
                let zs = self.draws.individual(n);
                let betas = self.individual_betas(n, &mu, &lower);
                let mut kernels = vec![0.0; betas.len()];
                let mut grads = vec![vec![0.0; k]; betas.len()];
                for &idx in &self.individuals[n] {
                    let obs = &self.dataset.observations()[idx];
                    for (r, beta) in betas.iter().enumerate() {
                        let (l, g) = obs_loglik_grad(obs, self.sets.for_obs(idx), beta);
                        kernels[r] += l;
                        grads[r].iter_mut().zip(&g).for_each(|(a, b)| *a += b);
                    }
                }
                let total = lse(&kernels);
                let mut out = vec![0.0; p];
                for r in 0..betas.len() {
                    let w = (kernels[r] - total).exp();
                    let g = &grads[r];
                    for a in 0..k {
                        out[a] += w * g[a];
                    }
                    let mut idx = k;
                    for a in 0..k {
                        for b in 0..=a {
                            let dbeta = if a == b { lower[(a, a)] * zs[r][a] } else { zs[r][b] };
                            out[idx] += w * g[a] * dbeta;
                            idx += 1;
                        }
                    }
                }
                out
            })
            .collect();
        pairwise_sum_vecs(&terms, p)
    }

    pub fn gradient(&self, theta: &[f64]) -> Vec<f64> {
        match (self.wn_mode, self.sets) {
            (WnMode::ExactFullSet, ChoiceSets::Sampled { .. }) => numerical_gradient(
                |t| self.loglik(t).unwrap_or(f64::NEG_INFINITY),
                theta,
                1e-6,
            ),
            _ => self.naive_gradient(theta),
        }
    }
}

struct NegSimulated<'s, 'a>(&'s SimulatedLikelihood<'a>);

impl Objective for NegSimulated<'_, '_> {
    fn value(&self, x: &[f64]) -> f64 {
        match self.0.loglik(x) {
            Ok(v) if v.is_finite() => -v,
            _ => f64::NAN,
        }
    }

    fn gradient(&self, x: &[f64]) -> Vec<f64> {
        self.0.gradient(x).into_iter().map(|g| -g).collect()
    }
}

/// Maximum simulated likelihood for a panel MMNL with normal mixing.
///
/// `init` is `(μ, vech L)` with `L` on its natural scale (positive diagonal).
pub fn fit_mmnl_msl(
    dataset: &Dataset,
    sets: ChoiceSets<'_>,
    init: &[f64],
    opts: &MslOptions,
) -> Result<FitResult> {
    let k = dataset.k();
    if init.len() != mmnl_param_count(k) {
        return Err(Error::invalid(format!(
            "init has length {}, expected {}",
            init.len(),
            mmnl_param_count(k)
        )));
    }
    let (mu0, l0) = natural_to_lower(init, k);
    let theta0 = pack_theta(&mu0, &l0)?;
    let sim = SimulatedLikelihood::new(dataset, sets, opts.wn_mode, opts.draws_per_individual, opts.halton_skip)?;
    let obj = NegSimulated(&sim);
    let bfgs = BfgsOptions {
        grad_tol: opts.tol,
        max_iter: opts.max_iter,
        ..Default::default()
    };
    let min = minimize(&obj, &theta0, &bfgs);
    let se_internal = standard_errors(&obj, &min.x);

    // Report L on its natural scale; delta method for log-diagonal entries.
    let mut estimate = min.x.clone();
    let mut std_errors = se_internal;
    let mut names: Vec<String> = (0..k).map(|d| format!("mu[{d}]")).collect();
    let mut idx = k;
    for a in 0..k {
        for b in 0..=a {
            if a == b {
                estimate[idx] = min.x[idx].exp();
                std_errors[idx] *= estimate[idx];
            }
            names.push(format!("L[{a},{b}]"));
            idx += 1;
        }
    }
    Ok(FitResult {
        estimate,
        std_errors,
        param_names: names,
        loglik: -min.value,
        converged: min.converged,
        iterations: min.iterations,
        grad_max_norm: min.gradient.iter().fold(0.0f64, |m, g| m.max(g.abs())),
    })
}

fn natural_to_lower(theta: &[f64], k: usize) -> (Vec<f64>, DMatrix<f64>) {
    let mu = theta[..k].to_vec();
    let mut l = DMatrix::zeros(k, k);
    let mut idx = k;
    for a in 0..k {
        for b in 0..=a {
            l[(a, b)] = theta[idx];
            idx += 1;
        }
    }
    (mu, l)
}

/// `Σ = L Lᵀ` from an MMNL [`FitResult`] estimate.
pub fn sigma_from_estimate(estimate: &[f64], k: usize) -> DMatrix<f64> {
    let (_, l) = natural_to_lower(estimate, k);
    &l * l.transpose()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::protocols::{draw_for_dataset, Protocol};
    use crate::synth::{generate_mnl, CovariateLaw, MnlDgpConfig};
    use proptest::prelude::*;

    fn two_alt(chosen: usize) -> Dataset {
        let o = Observation::from_design(0, 0, &[vec![0.0], vec![1.0]], chosen).unwrap();
        Dataset::new(vec![o]).unwrap()
    }

    fn small_data(seed: u64, n: usize) -> Dataset {
        generate_mnl(&MnlDgpConfig {
            n,
            j: 6,
            k: 2,
            beta_star: UtilityParams::new(vec![0.8, -0.6]).unwrap(),
            covariate_law: CovariateLaw::StandardNormal,
            seed,
        })
        .unwrap()
    }

    #[test]
    fn full_sets_match_full_loglik() {
        let ds = small_data(1, 40);
        let beta = UtilityParams::new(vec![0.3, 0.1]).unwrap();
        let direct: f64 = ds
            .observations()
            .iter()
            .map(|o| {
                let v = o.utilities(beta.as_slice());
                v[o.chosen] - lse(&v)
            })
            .sum();
        let full_sets: Vec<SampledSet> = ds
            .observations()
            .iter()
            .map(|o| SampledSet::new((0..6).collect(), vec![0.0; 6], CorrectionMode::None, o.chosen).unwrap())
            .collect();
        let ll_full = quasi_loglik(&ds, ChoiceSets::Full, &beta).unwrap();
        let ll_sets = quasi_loglik(&ds, ChoiceSets::sampled(&full_sets, CorrectionMode::None), &beta).unwrap();
        assert!((ll_full - direct).abs() < 1e-12);
        assert!((ll_sets - direct).abs() < 1e-12);
    }

    #[test]
    fn single_observation_half() {
        let ds = two_alt(0);
        let ll = quasi_loglik(&ds, ChoiceSets::Full, &UtilityParams::zeros(1)).unwrap();
        assert!((ll - 0.5f64.ln()).abs() < 1e-15);
    }

    #[test]
    fn hand_gradient_two_alternatives() {
        for chosen in 0..2 {
            let g = quasi_loglik_grad(&two_alt(chosen), ChoiceSets::Full, &UtilityParams::zeros(1)).unwrap();
            let expected = if chosen == 1 { 0.5 } else { -0.5 };
            assert!((g[0] - expected).abs() < 1e-15);
        }
    }

    #[test]
    fn uniform_mcfadden_equals_no_correction() {
        let ds = small_data(2, 60);
        let sets = draw_for_dataset(&Protocol::uniform_wor(3).unwrap(), &ds, 7).unwrap();
        let beta = UtilityParams::new(vec![0.5, -0.2]).unwrap();
        let a = quasi_loglik(&ds, ChoiceSets::sampled(&sets, CorrectionMode::McFadden), &beta).unwrap();
        let b = quasi_loglik(&ds, ChoiceSets::sampled(&sets, CorrectionMode::None), &beta).unwrap();
        let c = quasi_loglik(&ds, ChoiceSets::sampled(&sets, CorrectionMode::UniformConstant), &beta).unwrap();
        assert!((a - b).abs() < 1e-12 && (a - c).abs() < 1e-12);
        let ga = quasi_loglik_grad(&ds, ChoiceSets::sampled(&sets, CorrectionMode::UniformConstant), &beta).unwrap();
        let gb = quasi_loglik_grad(&ds, ChoiceSets::sampled(&sets, CorrectionMode::None), &beta).unwrap();
        assert!(ga.iter().zip(&gb).all(|(x, y)| (x - y).abs() < 1e-12));
    }

    #[test]
    fn constant_shift_in_corrections_is_invisible() {
        let ds = small_data(3, 30);
        let sets = draw_for_dataset(&Protocol::importance(vec![0.2, 0.4, 0.6, 0.8, 0.3, 0.5]).unwrap(), &ds, 1).unwrap();
        let shifted: Vec<SampledSet> = sets
            .iter()
            .zip(ds.observations())
            .enumerate()
            .map(|(i, (s, o))| {
                let kappa = -(i as f64) * 0.37;
                SampledSet::new(
                    s.member_ids().to_vec(),
                    s.log_cond_prob().iter().map(|l| l + kappa).collect(),
                    CorrectionMode::McFadden,
                    o.chosen,
                )
                .unwrap()
            })
            .collect();
        let beta = UtilityParams::new(vec![0.4, 0.9]).unwrap();
        let a = quasi_loglik(&ds, ChoiceSets::sampled(&sets, CorrectionMode::McFadden), &beta).unwrap();
        let b = quasi_loglik(&ds, ChoiceSets::sampled(&shifted, CorrectionMode::McFadden), &beta).unwrap();
        assert!((a - b).abs() < 1e-12);
    }

    #[test]
    fn mismatched_sets_rejected() {
        let ds = small_data(4, 5);
        let sets = draw_for_dataset(&Protocol::uniform_wor(2).unwrap(), &ds, 1).unwrap();
        assert!(quasi_loglik(&ds, ChoiceSets::sampled(&sets[..4], CorrectionMode::None), &UtilityParams::zeros(2)).is_err());
        assert!(quasi_loglik(&ds, ChoiceSets::Full, &UtilityParams::zeros(3)).is_err());
    }

    #[test]
    fn fit_reaches_first_order_condition() {
        let ds = small_data(5, 400);
        let fit = fit_mnl(&ds, ChoiceSets::Full, &UtilityParams::zeros(2), &FitOptions::default()).unwrap();
        assert!(fit.converged);
        let g = quasi_loglik_grad(&ds, ChoiceSets::Full, &fit.beta().unwrap()).unwrap();
        assert!(g.iter().all(|x| x.abs() <= 1e-6));
        assert!(fit.std_errors.iter().all(|s| *s > 0.0));
    }

    #[test]
    fn fit_is_order_invariant() {
        let ds = small_data(6, 300);
        let order: Vec<usize> = (0..ds.len()).rev().collect();
        let rev = ds.reordered(&order).unwrap();
        let opts = FitOptions { tol: 1e-9, max_iter: 500 };
        let a = fit_mnl(&ds, ChoiceSets::Full, &UtilityParams::zeros(2), &opts).unwrap();
        let b = fit_mnl(&rev, ChoiceSets::Full, &UtilityParams::zeros(2), &opts).unwrap();
        assert!(a.estimate.iter().zip(&b.estimate).all(|(x, y)| (x - y).abs() < 1e-8));
    }

    #[test]
    fn non_convergence_is_reported() {
        let ds = small_data(7, 200);
        let opts = FitOptions { tol: 1e-12, max_iter: 1 };
        let fit = fit_mnl(&ds, ChoiceSets::Full, &UtilityParams::zeros(2), &opts).unwrap();
        assert!(!fit.converged);
        assert_eq!(fit.iterations, 1);
    }

    #[test]
    fn wn_is_one_when_draw_matches_average() {
        let o = Observation::from_design(0, 0, &[vec![0.2], vec![-1.0], vec![0.5], vec![1.5]], 2).unwrap();
        let beta = UtilityParams::new(vec![0.7]).unwrap();
        let probs = draw_averaged_full_probs(&o, &[beta.as_slice().to_vec()]);
        let p = Protocol::importance(vec![0.3, 0.6, 0.5, 0.2]).unwrap();
        let mut rng = crate::streams::derive(3, 0, 0);
        let set = p.draw(&o, &mut rng).unwrap();
        let w = compute_wn(&beta, &probs, &o, &set).unwrap();
        assert!((w - 1.0).abs() < 1e-14);
    }

    #[test]
    fn wn_matches_direct_summation() {
        let o = Observation::from_design(0, 0, &[vec![0.2, 1.0], vec![-1.0, 0.3], vec![0.5, -0.4], vec![1.5, 0.0]], 1).unwrap();
        let set = SampledSet::new(vec![1, 3, 0], vec![-1.2, -0.7, -2.1], CorrectionMode::McFadden, 1).unwrap();
        let draw = [0.4, -0.9];
        let theta = [0.1, 0.2, 0.3, 0.4];
        let soft = |b: &[f64]| {
            let e: Vec<f64> = o.alternatives.iter().map(|a| (a.attributes[0] * b[0] + a.attributes[1] * b[1]).exp()).collect();
            let s: f64 = e.iter().sum();
            e.into_iter().map(|x| x / s).collect::<Vec<f64>>()
        };
        let p = soft(&draw);
        let (mut num, mut den) = (0.0, 0.0);
        for (id, l) in [(1usize, -1.2f64), (3, -0.7), (0, -2.1)] {
            num += l.exp() * p[id];
            den += l.exp() * theta[id];
        }
        let w = compute_wn(&UtilityParams::new(draw.to_vec()).unwrap(), &theta, &o, &set).unwrap();
        assert!((w - num / den).abs() < 1e-12);
    }

    #[test]
    fn exact_kernel_reduces_to_compute_wn_with_one_choice() {
        let panel = crate::synth::generate_mmnl(&crate::synth::MmnlDgpConfig {
            individuals: 6,
            choices_per_individual: 1,
            j: 5,
            k: 1,
            mu_star: vec![0.5],
            sigma_star: DMatrix::from_element(1, 1, 0.4),
            covariate_law: crate::synth::CovariateLaw::StandardNormal,
            seed: 4,
        })
        .unwrap();
        let ds = &panel.dataset;
        let sets = crate::protocols::draw_for_dataset(&Protocol::importance(vec![0.6, 0.5, 0.4, 0.3, 0.2]).unwrap(), ds, 2).unwrap();
        let cs = ChoiceSets::sampled(&sets, CorrectionMode::McFadden);
        let sl = SimulatedLikelihood::new(ds, cs, WnMode::ExactFullSet, 7, 10).unwrap();
        let theta = [0.3, 0.2f64.ln()];
        let (mu, lower) = unpack_theta(&theta, 1);
        let mut manual = 0.0;
        for (n, obs) in ds.observations().iter().enumerate() {
            let betas: Vec<Vec<f64>> = sl.draws().individual(n).iter().map(|z| beta_from_draw(&mu, &lower, z)).collect();
            let avg = draw_averaged_full_probs(obs, &betas);
            let mean: f64 = betas
                .iter()
                .map(|b| {
                    let w = compute_wn(&UtilityParams::new(b.clone()).unwrap(), &avg, obs, &sets[n]).unwrap();
                    w * log_choice_prob(obs, Some((&sets[n], CorrectionMode::McFadden)), b).exp()
                })
                .sum::<f64>()
                / betas.len() as f64;
            manual += mean.ln();
        }
        assert!((sl.loglik(&theta).unwrap() - manual).abs() < 1e-10);
    }

    #[test]
    fn theta_round_trip() {
        let l = DMatrix::from_row_slice(2, 2, &[0.7, 0.0, -0.2, 0.4]);
        let theta = pack_theta(&[1.0, -1.0], &l).unwrap();
        let (mu, l2) = unpack_theta(&theta, 2);
        assert_eq!(mu, vec![1.0, -1.0]);
        assert!((l2 - l).abs().max() < 1e-15);
    }

    #[test]
    fn naive_msl_gradient_matches_finite_differences() {
        let panel = crate::synth::generate_mmnl(&crate::synth::MmnlDgpConfig {
            individuals: 12,
            choices_per_individual: 3,
            j: 5,
            k: 2,
            mu_star: vec![0.5, -0.5],
            sigma_star: DMatrix::from_row_slice(2, 2, &[0.4, 0.1, 0.1, 0.3]),
            covariate_law: CovariateLaw::StandardNormal,
            seed: 8,
        })
        .unwrap();
        let ds = &panel.dataset;
        let sets = draw_for_dataset(&Protocol::importance(vec![0.3, 0.7, 0.5, 0.4, 0.6]).unwrap(), ds, 2).unwrap();
        let sim = SimulatedLikelihood::new(ds, ChoiceSets::sampled(&sets, CorrectionMode::McFadden), WnMode::NaiveOne, 20, 50).unwrap();
        let theta = [0.3, -0.2, (0.5f64).ln(), 0.1, (0.6f64).ln()];
        let g = sim.gradient(&theta);
        let fd = numerical_gradient(|t| sim.loglik(t).unwrap(), &theta, 1e-6);
        for (a, b) in g.iter().zip(&fd) {
            assert!((a - b).abs() <= 1e-6 * (1.0 + b.abs()), "{a} vs {b}");
        }
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(40))]
        #[test]
        fn gradient_matches_finite_differences(
            seed in 0u64..1000,
            b0 in -2.0f64..2.0,
            b1 in -2.0f64..2.0,
            use_importance in any::<bool>(),
        ) {
            let ds = small_data(seed, 25);
            let protocol = if use_importance {
                Protocol::importance(vec![0.15, 0.8, 0.5, 0.35, 0.6, 0.9]).unwrap()
            } else {
                Protocol::uniform_wor(3).unwrap()
            };
            let sets = draw_for_dataset(&protocol, &ds, seed + 1).unwrap();
            let cs = ChoiceSets::sampled(&sets, CorrectionMode::McFadden);
            let beta = UtilityParams::new(vec![b0, b1]).unwrap();
            let g = quasi_loglik_grad(&ds, cs, &beta).unwrap();
            let fd = numerical_gradient(|b| loglik_unchecked(&ds, cs, b), beta.as_slice(), 1e-6);
            for (a, b) in g.iter().zip(&fd) {
                prop_assert!((a - b).abs() <= 1e-6 * b.abs().max(1.0));
            }
        }
    }
}
