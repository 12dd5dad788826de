//! Exact enumeration oracles for expectations over choices and sampled sets.
//!
//! Everything here sums over every feasible `(i, D)` pair, so it is only
//! usable at small `J`. The per-observation quantities are:
//!
//! * coverage `R(β) = Σ_{j∈D} exp(V_j + ln π(D|j)) / Σ_{j∈C} exp(V_j)`;
//! * the expected quasi log-likelihood `E_{β*}[ln P⁺(i|β, D)]`;
//! * the expected divergence `E_β[ln P⁺(i|β, D) − ln P(i|β, C)]`.
//!
//! For a design of several observations sharing a prior over `β`, the
//! expected posterior KL divergence splits into a likelihood-ratio term `A`
//! and a Bayes-factor term `B`.

use rayon::prelude::*;

use crate::bayes_mnl::{log_quadrature, GridSpec, Prior};
use crate::error::{Error, Result};
use crate::linalg::pairwise_sum;
use crate::model::{lse, CorrectionMode, Observation, UtilityParams, UNIFORM_TOL};
use crate::protocols::{EnumeratedSet, Protocol, DEFAULT_ENUMERATION_CAP};

fn check_beta(obs: &Observation, beta: &UtilityParams) -> Result<()> {
    if beta.len() != obs.num_attributes() {
        return Err(Error::invalid(format!(
            "beta has length {}, observation has K = {}",
            beta.len(),
            obs.num_attributes()
        )));
    }
    Ok(())
}

fn is_uniform(set: &EnumeratedSet) -> bool {
    let first = set.log_cond_prob[0];
    set.log_cond_prob.iter().all(|l| (l - first).abs() <= UNIFORM_TOL)
}

/// Correction vector for an enumerated set.
fn corrections(set: &EnumeratedSet, mode: CorrectionMode) -> Result<Vec<f64>> {
    match mode {
        CorrectionMode::McFadden => Ok(set.log_cond_prob.clone()),
        CorrectionMode::None => Ok(vec![0.0; set.member_ids.len()]),
        CorrectionMode::UniformConstant => {
            if !is_uniform(set) {
                return Err(Error::InvalidState(
                    "uniform_constant correction requested under non-uniform conditioning".into(),
                ));
            }
            Ok(vec![set.log_cond_prob[0]; set.member_ids.len()])
        }
    }
}

/// `ln P⁺(j|β, D)` for every member of `set`, aligned with `member_ids`.
fn log_sampled_probs(v: &[f64], set: &EnumeratedSet, c: &[f64]) -> Vec<f64> {
    let u: Vec<f64> = set.member_ids.iter().zip(c).map(|(&id, cj)| v[id] + cj).collect();
    let denom = lse(&u);
    u.iter().map(|x| x - denom).collect()
}

fn log_full_probs(v: &[f64]) -> Vec<f64> {
    let denom = lse(v);
    v.iter().map(|x| x - denom).collect()
}

/// `ln R` for `set` at utilities `v`.
fn log_coverage(v: &[f64], set: &EnumeratedSet) -> f64 {
    let num: Vec<f64> = set
        .member_ids
        .iter()
        .zip(&set.log_cond_prob)
        .map(|(&id, l)| v[id] + l)
        .collect();
    lse(&num) - lse(v)
}

/// Coverage `R` of `set` for `observation` at `beta`.
pub fn coverage_r(observation: &Observation, set: &EnumeratedSet, beta: &UtilityParams) -> Result<f64> {
    check_beta(observation, beta)?;
    if set.member_ids.len() != set.log_cond_prob.len() || set.member_ids.is_empty() {
        return Err(Error::invalid("enumerated set needs one ln π(D|j) per member"));
    }
    if set.member_ids.iter().any(|&id| id >= observation.num_alternatives()) {
        return Err(Error::invalid("set member outside the choice set"));
    }
    Ok(log_coverage(&observation.utilities(beta.as_slice()), set).exp())
}

/// One row of the coverage table.
#[derive(Clone, Debug)]
pub struct CoverageEntry {
    pub obs_id: usize,
    pub member_ids: Vec<usize>,
    pub r: f64,
}

/// `R` for every feasible set of `observation`.
pub fn coverage_table(observation: &Observation, protocol: &Protocol, beta: &UtilityParams) -> Result<Vec<CoverageEntry>> {
    check_beta(observation, beta)?;
    let v = observation.utilities(beta.as_slice());
    Ok(protocol
        .enumerate_all(observation.num_alternatives(), DEFAULT_ENUMERATION_CAP)?
        .into_iter()
        .map(|s| CoverageEntry {
            obs_id: observation.obs_id,
            r: log_coverage(&v, &s).exp(),
            member_ids: s.member_ids,
        })
        .collect())
}

/// `Σ_i P(i|β*, C) ln P(i|β, C)`.
pub fn expected_true_ll(observation: &Observation, beta_star: &UtilityParams, beta: &UtilityParams) -> Result<f64> {
    check_beta(observation, beta_star)?;
    check_beta(observation, beta)?;
    let ps = log_full_probs(&observation.utilities(beta_star.as_slice()));
    let lp = log_full_probs(&observation.utilities(beta.as_slice()));
    Ok(pairwise_sum(&ps.iter().zip(&lp).map(|(a, b)| a.exp() * b).collect::<Vec<_>>()))
}

/// `Σ_i P(i|β*, C) Σ_{D∋i} π(D|i) ln P⁺(i|β, D)`, enumerating sets per
/// chosen alternative.
pub fn expected_quasi_ll(
    observation: &Observation,
    protocol: &Protocol,
    beta_star: &UtilityParams,
    beta: &UtilityParams,
    mode: CorrectionMode,
) -> Result<f64> {
    check_beta(observation, beta_star)?;
    check_beta(observation, beta)?;
    let log_ps = log_full_probs(&observation.utilities(beta_star.as_slice()));
    let v = observation.utilities(beta.as_slice());
    let mut terms = Vec::new();
    for (i, lpi) in log_ps.iter().enumerate() {
        for set in protocol.enumerate_sets(observation, i, DEFAULT_ENUMERATION_CAP)? {
            let c = corrections(&set, mode)?;
            let pos = set.member_ids.iter().position(|&m| m == i).expect("chosen is a member");
            let lq = log_sampled_probs(&v, &set, &c)[pos];
            terms.push((lpi + set.log_prob_given_chosen).exp() * lq);
        }
    }
    Ok(pairwise_sum(&terms))
}

/// The same expectation regrouped by set:
/// `Σ_D R(β*) Σ_{i∈D} P(i|β*, D) ln P⁺(i|β, D)`, where `P(i|β*, D)` is the
/// McFadden-corrected sampled probability.
pub fn expected_quasi_ll_regrouped(
    observation: &Observation,
    protocol: &Protocol,
    beta_star: &UtilityParams,
    beta: &UtilityParams,
    mode: CorrectionMode,
) -> Result<f64> {
    check_beta(observation, beta_star)?;
    check_beta(observation, beta)?;
    let vs = observation.utilities(beta_star.as_slice());
    let v = observation.utilities(beta.as_slice());
    let mut terms = Vec::new();
    for set in protocol.enumerate_all(observation.num_alternatives(), DEFAULT_ENUMERATION_CAP)? {
        let ln_r = log_coverage(&vs, &set);
        let weights = log_sampled_probs(&vs, &set, &set.log_cond_prob);
        let lq = log_sampled_probs(&v, &set, &corrections(&set, mode)?);
        let inner: f64 = weights.iter().zip(&lq).map(|(w, q)| w.exp() * q).sum();
        terms.push(ln_r.exp() * inner);
    }
    Ok(pairwise_sum(&terms))
}

/// Expected divergence in split form:
/// `Σ_D R Σ_{i∈D} P(i|β, D) [c_i − ln(Σ_{j∈D} e^{V_j+c_j} / Σ_{j∈C} e^{V_j})]`.
pub fn expected_divergence(
    observation: &Observation,
    protocol: &Protocol,
    beta: &UtilityParams,
    mode: CorrectionMode,
) -> Result<f64> {
    check_beta(observation, beta)?;
    let v = observation.utilities(beta.as_slice());
    let ln_full = lse(&v);
    let mut terms = Vec::new();
    for set in protocol.enumerate_all(observation.num_alternatives(), DEFAULT_ENUMERATION_CAP)? {
        let c = corrections(&set, mode)?;
        let ln_r = log_coverage(&v, &set);
        let weights = log_sampled_probs(&v, &set, &set.log_cond_prob);
        let u: Vec<f64> = set.member_ids.iter().zip(&c).map(|(&id, cj)| v[id] + cj).collect();
        let ln_ratio = lse(&u) - ln_full;
        let inner: f64 = weights.iter().zip(&c).map(|(w, cj)| w.exp() * (cj - ln_ratio)).sum();
        terms.push(ln_r.exp() * inner);
    }
    Ok(pairwise_sum(&terms))
}

/// Expected divergence in direct form:
/// `Σ_D R Σ_{i∈D} P(i|β, D) [ln P⁺(i|β, D) − ln P(i|β, C)]`.
pub fn expected_divergence_direct(
    observation: &Observation,
    protocol: &Protocol,
    beta: &UtilityParams,
    mode: CorrectionMode,
) -> Result<f64> {
    check_beta(observation, beta)?;
    let v = observation.utilities(beta.as_slice());
    let lp_full = log_full_probs(&v);
    let mut terms = Vec::new();
    for set in protocol.enumerate_all(observation.num_alternatives(), DEFAULT_ENUMERATION_CAP)? {
        let ln_r = log_coverage(&v, &set);
        let weights = log_sampled_probs(&v, &set, &set.log_cond_prob);
        let lq = log_sampled_probs(&v, &set, &corrections(&set, mode)?);
        let inner: f64 = set
            .member_ids
            .iter()
            .enumerate()
            .map(|(pos, &id)| weights[pos].exp() * (lq[pos] - lp_full[id]))
            .sum();
        terms.push(ln_r.exp() * inner);
    }
    Ok(pairwise_sum(&terms))
}

/// Closed form under uniform conditioning with constant corrections:
/// `−Σ_D π(D) S_D ln S_D`, `S_D = Σ_{j∈D} e^{V_j} / Σ_{j∈C} e^{V_j}`.
pub fn expected_divergence_closed_form(
    observation: &Observation,
    protocol: &Protocol,
    beta: &UtilityParams,
) -> Result<f64> {
    Ok(-entropy_sum(observation, protocol, beta)?)
}

/// `Σ_D π(D) S_D ln S_D`; errors unless every feasible set has a constant
/// `π(D|j)` over its members.
fn entropy_sum(observation: &Observation, protocol: &Protocol, beta: &UtilityParams) -> Result<f64> {
    check_beta(observation, beta)?;
    let v = observation.utilities(beta.as_slice());
    let ln_full = lse(&v);
    let mut terms = Vec::new();
    for set in protocol.enumerate_all(observation.num_alternatives(), DEFAULT_ENUMERATION_CAP)? {
        if !is_uniform(&set) {
            return Err(Error::InvalidState(
                "entropy form needs uniform conditioning".into(),
            ));
        }
        let ln_s = lse(&set.member_ids.iter().map(|&id| v[id]).collect::<Vec<_>>()) - ln_full;
        terms.push(set.log_cond_prob[0].exp() * ln_s.exp() * ln_s);
    }
    Ok(pairwise_sum(&terms))
}

/// `Σ_{D∋i} π(D)` for a fixed alternative `i`, after checking that
/// `π(D|j)` is constant within every feasible set.
pub fn uniform_pi_total(j: usize, protocol: &Protocol, i: usize) -> Result<f64> {
    let sets = protocol.enumerate_all(j, DEFAULT_ENUMERATION_CAP)?;
    if !sets.iter().all(is_uniform) {
        return Err(Error::InvalidState("protocol is not uniform conditioning".into()));
    }
    let terms: Vec<f64> = sets
        .iter()
        .filter(|s| s.member_ids.contains(&i))
        .map(|s| s.log_cond_prob[0].exp())
        .collect();
    Ok(pairwise_sum(&terms))
}

// ---------------------------------------------------------------------------
// Posterior KL terms on a β grid.

/// One feasible `(y, D)` outcome for one observation, with log-likelihood
/// vectors over the grid.
struct Outcome {
    log_pi: f64,
    log_true: Vec<f64>,
    log_sampled: Vec<f64>,
}

fn outcomes(obs: &Observation, protocol: &Protocol, mode: CorrectionMode, points: &[Vec<f64>]) -> Result<Vec<Outcome>> {
    let v_grid: Vec<Vec<f64>> = points.iter().map(|b| obs.utilities(b)).collect();
    let lp_full: Vec<Vec<f64>> = v_grid.iter().map(|v| log_full_probs(v)).collect();
    let mut out = Vec::new();
    for y in 0..obs.num_alternatives() {
        for set in protocol.enumerate_sets(obs, y, DEFAULT_ENUMERATION_CAP)? {
            let c = corrections(&set, mode)?;
            let pos = set.member_ids.iter().position(|&m| m == y).expect("chosen is a member");
            out.push(Outcome {
                log_pi: set.log_prob_given_chosen,
                log_true: lp_full.iter().map(|lp| lp[y]).collect(),
                log_sampled: v_grid.iter().map(|v| log_sampled_probs(v, &set, &c)[pos]).collect(),
            });
        }
    }
    Ok(out)
}

/// Prior on the lattice folded with the quadrature weights and normalised,
/// so that `Σ_g q_g = 1`.
fn log_prior_mass(prior: &Prior, spec: &GridSpec) -> Result<(Vec<Vec<f64>>, Vec<f64>)> {
    if prior.dim() != spec.dim() {
        return Err(Error::invalid("prior and grid dimensions differ"));
    }
    let points = spec.lattice();
    let lp: Vec<f64> = points.iter().map(|p| prior.log_density(p)).collect();
    let lw = spec.log_weights();
    let total = log_quadrature(&lw, &lp);
    let lq = lw.iter().zip(&lp).map(|(w, p)| w + p - total).collect();
    Ok((points, lq))
}

fn check_design(design: &[Observation], spec: &GridSpec) -> Result<()> {
    if design.is_empty() {
        return Err(Error::invalid("design needs at least one observation"));
    }
    if let Some(o) = design.iter().find(|o| o.num_attributes() != spec.dim()) {
        return Err(Error::invalid(format!(
            "observation {} has K = {}, grid has {} dimensions",
            o.obs_id,
            o.num_attributes(),
            spec.dim()
        )));
    }
    Ok(())
}

/// `A = E[ln P(Y|β, C) − ln P⁺(Y|β, D)]` under the joint law of
/// `(β, Y, D)`; computed observation by observation.
fn term_a(per_obs: &[Vec<Outcome>], lq: &[f64]) -> f64 {
    let per_obs_terms: Vec<f64> = per_obs
        .iter()
        .map(|outs| {
            let by_grid: Vec<f64> = lq
                .iter()
                .enumerate()
                .map(|(g, q)| {
                    let inner: f64 = outs
                        .iter()
                        .map(|o| (o.log_true[g] + o.log_pi).exp() * (o.log_true[g] - o.log_sampled[g]))
                        .sum();
                    q.exp() * inner
                })
                .collect();
            pairwise_sum(&by_grid)
        })
        .collect();
    pairwise_sum(&per_obs_terms)
}

/// Entropy form of `A` under uniform conditioning:
/// `Σ_n ∫ p(β) Σ_{D_n} π(D_n) S ln S dβ`.
fn term_a_entropy(design: &[Observation], protocol: &Protocol, points: &[Vec<f64>], lq: &[f64]) -> Result<f64> {
    let per_obs = design
        .iter()
        .map(|obs| {
            let by_grid = points
                .iter()
                .zip(lq)
                .map(|(b, q)| Ok(q.exp() * entropy_sum(obs, protocol, &UtilityParams::new(b.clone())?)?))
                .collect::<Result<Vec<f64>>>()?;
            Ok(pairwise_sum(&by_grid))
        })
        .collect::<Result<Vec<f64>>>()?;
    Ok(pairwise_sum(&per_obs))
}

/// `B = Σ_{Y,D} m(Y) π(D|Y) ln(m⁺(Y, D) / m(Y))` and the direct expected KL
/// `Σ_{Y,D} m(Y) π(D|Y) KL(p(β|Y, C) ‖ p⁺(β|Y, D))`, both by joint
/// enumeration of every observation's outcomes.
fn terms_b_and_direct(per_obs: &[Vec<Outcome>], lq: &[f64], cap: u128) -> Result<(f64, f64)> {
    let sizes: Vec<usize> = per_obs.iter().map(|o| o.len()).collect();
    let count = sizes
        .iter()
        .try_fold(1u128, |acc, &s| acc.checked_mul(s as u128))
        .unwrap_or(u128::MAX);
    if count > cap {
        return Err(Error::Capacity {
            count,
            cap,
            context: format!(" (joint outcomes over {} observations)", per_obs.len()),
        });
    }
    let g_len = lq.len();
    let pairs: Vec<(f64, f64)> = (0..count as usize)
        .into_par_iter()
        .map(|mut idx| {
            let mut lt = lq.to_vec();
            let mut ls = lq.to_vec();
            let mut log_pi = 0.0;
            for (n, outs) in per_obs.iter().enumerate() {
                let o = &outs[idx % sizes[n]];
                idx /= sizes[n];
                log_pi += o.log_pi;
                for g in 0..g_len {
                    lt[g] += o.log_true[g];
                    ls[g] += o.log_sampled[g];
                }
            }
            let ln_m = lse(&lt);
            let ln_m_plus = lse(&ls);
            let weight = (ln_m + log_pi).exp();
            let kl: f64 = lt
                .iter()
                .zip(&ls)
                .map(|(t, s)| (t - ln_m).exp() * ((t - ln_m) - (s - ln_m_plus)))
                .sum();
            (weight * (ln_m_plus - ln_m), weight * kl)
        })
        .collect();
    let b: Vec<f64> = pairs.iter().map(|p| p.0).collect();
    let d: Vec<f64> = pairs.iter().map(|p| p.1).collect();
    Ok((pairwise_sum(&b), pairwise_sum(&d)))
}

#[derive(Clone, Debug)]
pub struct KlTerms {
    /// Expected log-likelihood ratio, `≤ 0` under McFadden corrections.
    pub a: f64,
    /// Entropy form of `A`; present under uniform conditioning.
    pub a_entropy: Option<f64>,
    /// Expected log Bayes factor `ln(m⁺/m)`.
    pub b: f64,
    /// Expected posterior KL, assembled as `A + B`.
    pub total: f64,
    /// Expected posterior KL computed posterior by posterior.
    pub direct: f64,
    /// Change in `total` when the grid step is halved.
    pub doubling_delta: f64,
    pub converged: bool,
}

impl KlTerms {
    pub fn decomposition_residual(&self) -> f64 {
        self.total - self.direct
    }

    pub fn entropy_residual(&self) -> Option<f64> {
        self.a_entropy.map(|e| self.a - e)
    }
}

fn kl_terms_on(
    design: &[Observation],
    protocol: &Protocol,
    mode: CorrectionMode,
    prior: &Prior,
    spec: &GridSpec,
    cap: u128,
) -> Result<KlTerms> {
    let (points, lq) = log_prior_mass(prior, spec)?;
    let per_obs = design
        .iter()
        .map(|o| outcomes(o, protocol, mode, &points))
        .collect::<Result<Vec<_>>>()?;
    let a = term_a(&per_obs, &lq);
    let a_entropy = match term_a_entropy(design, protocol, &points, &lq) {
        Ok(e) => Some(e),
        Err(Error::InvalidState(_)) => None,
        Err(e) => return Err(e),
    };
    let (b, direct) = terms_b_and_direct(&per_obs, &lq, cap)?;
    Ok(KlTerms {
        a,
        a_entropy,
        b,
        total: a + b,
        direct,
        doubling_delta: 0.0,
        converged: true,
    })
}

/// Expected KL divergence between the true and sampled posteriors for a
/// design, split into `A` and `B`, with a grid-doubling check on `A + B`.
pub fn kl_terms(
    design: &[Observation],
    protocol: &Protocol,
    mode: CorrectionMode,
    prior: &Prior,
    spec: &GridSpec,
) -> Result<KlTerms> {
    kl_terms_with_cap(design, protocol, mode, prior, spec, DEFAULT_ENUMERATION_CAP)
}

pub fn kl_terms_with_cap(
    design: &[Observation],
    protocol: &Protocol,
    mode: CorrectionMode,
    prior: &Prior,
    spec: &GridSpec,
    cap: u128,
) -> Result<KlTerms> {
    check_design(design, spec)?;
    let mut terms = kl_terms_on(design, protocol, mode, prior, spec, cap)?;
    let fine = kl_terms_on(design, protocol, mode, prior, &spec.doubled(), cap)?;
    terms.doubling_delta = (fine.total - terms.total).abs();
    terms.converged = terms.doubling_delta < crate::bayes_mnl::GRID_DOUBLING_TOL;
    Ok(terms)
}

/// `A` alone; cheaper than [`kl_terms`] because it needs no joint
/// enumeration.
pub fn kl_term_a(
    design: &[Observation],
    protocol: &Protocol,
    mode: CorrectionMode,
    prior: &Prior,
    spec: &GridSpec,
) -> Result<f64> {
    check_design(design, spec)?;
    let (points, lq) = log_prior_mass(prior, spec)?;
    let per_obs = design
        .iter()
        .map(|o| outcomes(o, protocol, mode, &points))
        .collect::<Result<Vec<_>>>()?;
    Ok(term_a(&per_obs, &lq))
}

#[derive(Clone, Debug)]
pub struct ComparisonRow {
    pub design: usize,
    pub protocol: String,
    pub a: f64,
}

#[derive(Clone, Debug)]
pub struct ProtocolComparison {
    pub rows: Vec<ComparisonRow>,
    /// Per design: whether a uniform-conditioning protocol has the largest
    /// `A` (smallest information loss) among those tested.
    pub uniform_attains_max: Vec<bool>,
}

/// `A` under McFadden corrections for every design and protocol. Reports
/// observed rankings only; no optimality claim is made.
pub fn protocol_comparison(
    designs: &[Vec<Observation>],
    protocols: &[Protocol],
    prior: &Prior,
    spec: &GridSpec,
) -> Result<ProtocolComparison> {
    let mut rows = Vec::new();
    let mut uniform_attains_max = Vec::new();
    for (d, design) in designs.iter().enumerate() {
        let values = protocols
            .iter()
            .map(|p| kl_term_a(design, p, CorrectionMode::McFadden, prior, spec))
            .collect::<Result<Vec<f64>>>()?;
        let best = values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let uniform_best = protocols
            .iter()
            .zip(&values)
            .filter(|(p, _)| p.is_uniform_conditioning())
            .map(|(_, a)| *a)
            .fold(f64::NEG_INFINITY, f64::max);
        uniform_attains_max.push(uniform_best >= best);
        rows.extend(protocols.iter().zip(values).map(|(p, a)| ComparisonRow {
            design: d,
            protocol: p.name(),
            a,
        }));
    }
    Ok(ProtocolComparison {
        rows,
        uniform_attains_max,
    })
}

// ---------------------------------------------------------------------------
// Report.

#[derive(Clone, Debug)]
pub struct DivergenceReport {
    pub protocol: String,
    pub mode: CorrectionMode,
    pub beta: Vec<f64>,
    /// Design totals at `β* = β`.
    pub expected_quasi_ll: f64,
    pub expected_true_ll: f64,
    pub expected_divergence: f64,
    pub coverage: Vec<CoverageEntry>,
    /// Split form minus direct form.
    pub split_vs_direct: f64,
    /// Set-grouped minus choice-grouped expected quasi log-likelihood.
    pub regrouped_vs_direct: f64,
    /// Split form minus closed form, under uniform conditioning.
    pub closed_form_residual: Option<f64>,
    /// Divergence minus (quasi − true).
    pub identity_residual: f64,
    pub kl: Option<KlTerms>,
    pub prior_variance: Option<f64>,
    pub grid: Option<GridSpec>,
}

/// Runs every oracle on `design` at `beta`; KL terms only when a prior and
/// grid are given.
pub fn divergence_report(
    design: &[Observation],
    protocol: &Protocol,
    mode: CorrectionMode,
    beta: &UtilityParams,
    kl: Option<(&Prior, &GridSpec)>,
) -> Result<DivergenceReport> {
    let mut quasi = Vec::new();
    let mut regrouped = Vec::new();
    let mut truth = Vec::new();
    let mut split = Vec::new();
    let mut direct = Vec::new();
    let mut closed = Vec::new();
    let mut coverage = Vec::new();
    for obs in design {
        quasi.push(expected_quasi_ll(obs, protocol, beta, beta, mode)?);
        regrouped.push(expected_quasi_ll_regrouped(obs, protocol, beta, beta, mode)?);
        truth.push(expected_true_ll(obs, beta, beta)?);
        split.push(expected_divergence(obs, protocol, beta, mode)?);
        direct.push(expected_divergence_direct(obs, protocol, beta, mode)?);
        match expected_divergence_closed_form(obs, protocol, beta) {
            Ok(c) => closed.push(c),
            Err(Error::InvalidState(_)) => {}
            Err(e) => return Err(e),
        }
        coverage.extend(coverage_table(obs, protocol, beta)?);
    }
    let (q, r, t, s, d) = (
        pairwise_sum(&quasi),
        pairwise_sum(&regrouped),
        pairwise_sum(&truth),
        pairwise_sum(&split),
        pairwise_sum(&direct),
    );
    let closed_form_residual = (closed.len() == design.len()).then(|| s - pairwise_sum(&closed));
    let kl_terms = kl
        .map(|(prior, spec)| kl_terms(design, protocol, mode, prior, spec))
        .transpose()?;
    Ok(DivergenceReport {
        protocol: protocol.name(),
        mode,
        beta: beta.as_slice().to_vec(),
        expected_quasi_ll: q,
        expected_true_ll: t,
        expected_divergence: s,
        coverage,
        split_vs_direct: s - d,
        regrouped_vs_direct: r - q,
        closed_form_residual,
        identity_residual: s - (q - t),
        kl: kl_terms,
        prior_variance: kl.map(|(p, _)| p.covariance()[(0, 0)]),
        grid: kl.map(|(_, g)| g.clone()),
    })
}
