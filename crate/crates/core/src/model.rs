//! Linear-in-parameters utilities and the three logit choice-probability
//! variants: full choice set, uncorrected sampled set, and corrected sampled
//! set. All probability arithmetic is done in log space with a max shift.

use crate::error::{check_len, Error, Result};

/// Coefficient vector of a linear utility `V = X·β`.
#[derive(Clone, Debug, PartialEq)]
pub struct UtilityParams(Vec<f64>);

impl UtilityParams {
    pub fn new(beta: Vec<f64>) -> Result<Self> {
        if let Some(bad) = beta.iter().find(|b| !b.is_finite()) {
            return Err(Error::invalid(format!("non-finite coefficient {bad}")));
        }
        Ok(Self(beta))
    }

    pub fn zeros(k: usize) -> Self {
        Self(vec![0.0; k])
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn into_inner(self) -> Vec<f64> {
        self.0
    }
}

impl AsRef<[f64]> for UtilityParams {
    fn as_ref(&self) -> &[f64] {
        &self.0
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Alternative {
    pub id: usize,
    pub attributes: Vec<f64>,
}

/// One choice situation: the full choice set `C_n` and the observed choice.
///
/// Alternatives are stored densely by id, so `alternatives[j].id == j`.
#[derive(Clone, Debug, PartialEq)]
pub struct Observation {
    pub obs_id: usize,
    pub individual_id: usize,
    pub alternatives: Vec<Alternative>,
    pub chosen: usize,
}

impl Observation {
    pub fn new(
        obs_id: usize,
        individual_id: usize,
        alternatives: Vec<Alternative>,
        chosen: usize,
    ) -> Result<Self> {
        if alternatives.len() < 2 {
            return Err(Error::invalid(format!(
                "observation {obs_id}: need at least 2 alternatives, got {}",
                alternatives.len()
            )));
        }
        let k = alternatives[0].attributes.len();
        for (pos, alt) in alternatives.iter().enumerate() {
            if alt.id != pos {
                return Err(Error::invalid(format!(
                    "observation {obs_id}: alternative at position {pos} has id {}",
                    alt.id
                )));
            }
            check_len("alternative attributes", k, alt.attributes.len())?;
            if alt.attributes.iter().any(|x| !x.is_finite()) {
                return Err(Error::invalid(format!(
                    "observation {obs_id}: non-finite attribute on alternative {pos}"
                )));
            }
        }
        if chosen >= alternatives.len() {
            return Err(Error::invalid(format!(
                "observation {obs_id}: chosen id {chosen} not in choice set"
            )));
        }
        Ok(Self {
            obs_id,
            individual_id,
            alternatives,
            chosen,
        })
    }

    /// Builds an observation from a row-major `J × K` design.
    pub fn from_design(
        obs_id: usize,
        individual_id: usize,
        design: &[Vec<f64>],
        chosen: usize,
    ) -> Result<Self> {
        let alternatives = design
            .iter()
            .enumerate()
            .map(|(id, row)| Alternative {
                id,
                attributes: row.clone(),
            })
            .collect();
        Self::new(obs_id, individual_id, alternatives, chosen)
    }

    pub fn num_alternatives(&self) -> usize {
        self.alternatives.len()
    }

    pub fn num_attributes(&self) -> usize {
        self.alternatives[0].attributes.len()
    }

    pub fn attributes(&self, id: usize) -> &[f64] {
        &self.alternatives[id].attributes
    }

    /// Utilities of every alternative in `C_n`.
    pub fn utilities(&self, beta: &[f64]) -> Vec<f64> {
        self.alternatives
            .iter()
            .map(|a| dot(&a.attributes, beta))
            .collect()
    }

    /// Copy of this observation with a different chosen alternative.
    pub fn with_chosen(&self, chosen: usize) -> Self {
        assert!(chosen < self.alternatives.len());
        Self {
            chosen,
            ..self.clone()
        }
    }
}

/// A collection of observations sharing `K` and `J`.
#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    observations: Vec<Observation>,
    k: usize,
    j: usize,
}

impl Dataset {
    pub fn new(observations: Vec<Observation>) -> Result<Self> {
        let first = observations
            .first()
            .ok_or_else(|| Error::invalid("dataset needs at least one observation"))?;
        let k = first.num_attributes();
        let j = first.num_alternatives();
        for obs in &observations {
            if obs.num_alternatives() != j || obs.num_attributes() != k {
                return Err(Error::invalid(format!(
                    "observation {} has J={}, K={}; dataset has J={j}, K={k}",
                    obs.obs_id,
                    obs.num_alternatives(),
                    obs.num_attributes()
                )));
            }
        }
        Ok(Self { observations, k, j })
    }

    pub fn observations(&self) -> &[Observation] {
        &self.observations
    }

    pub fn len(&self) -> usize {
        self.observations.len()
    }

    pub fn is_empty(&self) -> bool {
        self.observations.is_empty()
    }

    pub fn k(&self) -> usize {
        self.k
    }

    pub fn j(&self) -> usize {
        self.j
    }

    /// Observation indices grouped by individual, in order of first
    /// appearance.
    pub fn individuals(&self) -> Vec<Vec<usize>> {
        let mut order: Vec<usize> = Vec::new();
        let mut groups: std::collections::HashMap<usize, Vec<usize>> = Default::default();
        for (idx, obs) in self.observations.iter().enumerate() {
            groups
                .entry(obs.individual_id)
                .or_insert_with(|| {
                    order.push(obs.individual_id);
                    Vec::new()
                })
                .push(idx);
        }
        order
            .into_iter()
            .map(|id| groups.remove(&id).unwrap_or_default())
            .collect()
    }

    /// Same observations in a different order.
    pub fn reordered(&self, order: &[usize]) -> Result<Self> {
        check_len("observation order", self.len(), order.len())?;
        let observations = order
            .iter()
            .map(|&i| {
                self.observations
                    .get(i)
                    .cloned()
                    .ok_or_else(|| Error::invalid(format!("index {i} out of range")))
            })
            .collect::<Result<Vec<_>>>()?;
        Self::new(observations)
    }
}

/// How the per-alternative corrections `c_j` are formed from a sampled set.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum CorrectionMode {
    /// `c_j = ln π(D|j)`.
    McFadden,
    /// `c_j = 0`; deliberately biased baseline for non-uniform protocols.
    None,
    /// Shared constant `ln π(D)†`; only valid when all `ln π(D|j)` are equal.
    UniformConstant,
}

impl CorrectionMode {
    pub fn as_str(self) -> &'static str {
        match self {
            CorrectionMode::McFadden => "mcfadden",
            CorrectionMode::None => "none",
            CorrectionMode::UniformConstant => "uniform_constant",
        }
    }
}

impl std::str::FromStr for CorrectionMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim() {
            "mcfadden" => Ok(CorrectionMode::McFadden),
            "none" => Ok(CorrectionMode::None),
            "uniform_constant" => Ok(CorrectionMode::UniformConstant),
            other => Err(Error::invalid(format!("unknown correction mode '{other}'"))),
        }
    }
}

impl std::fmt::Display for CorrectionMode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

/// Tolerance used to decide whether a set's conditional sampling
/// probabilities are all equal.
pub(crate) const UNIFORM_TOL: f64 = 1e-12;

/// A sampled choice set `D_n` with `ln π(D_n|j)` for every member.
#[derive(Clone, Debug, PartialEq)]
pub struct SampledSet {
    member_ids: Vec<usize>,
    log_cond_prob: Vec<f64>,
    correction_mode: CorrectionMode,
}

impl SampledSet {
    pub fn new(
        member_ids: Vec<usize>,
        log_cond_prob: Vec<f64>,
        correction_mode: CorrectionMode,
        chosen: usize,
    ) -> Result<Self> {
        if member_ids.is_empty() {
            return Err(Error::invalid("sampled set is empty"));
        }
        check_len("log_cond_prob", member_ids.len(), log_cond_prob.len())?;
        if !member_ids.contains(&chosen) {
            return Err(Error::invalid(format!(
                "sampled set {member_ids:?} does not contain chosen alternative {chosen}"
            )));
        }
        let mut sorted = member_ids.clone();
        sorted.sort_unstable();
        if sorted.windows(2).any(|w| w[0] == w[1]) {
            return Err(Error::invalid(format!(
                "sampled set {member_ids:?} has duplicate members"
            )));
        }
        if let Some(bad) = log_cond_prob.iter().find(|l| !l.is_finite() || **l > 0.0) {
            return Err(Error::invalid(format!(
                "ln π(D|j) = {bad} violates positive conditioning"
            )));
        }
        let set = Self {
            member_ids,
            log_cond_prob,
            correction_mode,
        };
        if correction_mode == CorrectionMode::UniformConstant && !set.is_uniform() {
            return Err(Error::InvalidState(
                "uniform_constant mode on a set with unequal ln π(D|j)".into(),
            ));
        }
        Ok(set)
    }

    pub fn member_ids(&self) -> &[usize] {
        &self.member_ids
    }

    pub fn log_cond_prob(&self) -> &[f64] {
        &self.log_cond_prob
    }

    pub fn correction_mode(&self) -> CorrectionMode {
        self.correction_mode
    }

    pub fn len(&self) -> usize {
        self.member_ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.member_ids.is_empty()
    }

    pub fn position(&self, id: usize) -> Option<usize> {
        self.member_ids.iter().position(|&m| m == id)
    }

    /// True when every member has the same `ln π(D|j)`.
    pub fn is_uniform(&self) -> bool {
        let first = self.log_cond_prob[0];
        self.log_cond_prob
            .iter()
            .all(|l| (l - first).abs() <= UNIFORM_TOL)
    }

    /// Correction for the member at `pos`. The caller has already checked
    /// that `mode` is admissible for this set.
    #[inline]
    pub(crate) fn correction_at(&self, pos: usize, mode: CorrectionMode) -> f64 {
        match mode {
            CorrectionMode::McFadden => self.log_cond_prob[pos],
            CorrectionMode::None => 0.0,
            CorrectionMode::UniformConstant => self.log_cond_prob[0],
        }
    }

    pub(crate) fn check_against(&self, obs: &Observation, mode: CorrectionMode) -> Result<()> {
        let j = obs.num_alternatives();
        if let Some(bad) = self.member_ids.iter().find(|&&m| m >= j) {
            return Err(Error::invalid(format!(
                "observation {}: sampled member {bad} outside choice set of size {j}",
                obs.obs_id
            )));
        }
        if !self.member_ids.contains(&obs.chosen) {
            return Err(Error::invalid(format!(
                "observation {}: sampled set misses chosen alternative {}",
                obs.obs_id, obs.chosen
            )));
        }
        if mode == CorrectionMode::UniformConstant && !self.is_uniform() {
            return Err(Error::InvalidState(format!(
                "observation {}: uniform_constant mode on a non-uniform set",
                obs.obs_id
            )));
        }
        Ok(())
    }
}

/// Which choice sets enter the likelihood.
#[derive(Clone, Copy, Debug)]
pub enum ChoiceSets<'a> {
    Full,
    Sampled {
        sets: &'a [SampledSet],
        mode: CorrectionMode,
    },
}

impl<'a> ChoiceSets<'a> {
    pub fn sampled(sets: &'a [SampledSet], mode: CorrectionMode) -> Self {
        ChoiceSets::Sampled { sets, mode }
    }

    pub fn validate(&self, dataset: &Dataset) -> Result<()> {
        if let ChoiceSets::Sampled { sets, mode } = self {
            check_len("sampled sets", dataset.len(), sets.len())?;
            for (obs, set) in dataset.observations().iter().zip(sets.iter()) {
                set.check_against(obs, *mode)?;
            }
        }
        Ok(())
    }

    /// The set used for observation `idx`, if sampled.
    #[inline]
    pub fn for_obs(&self, idx: usize) -> Option<(&'a SampledSet, CorrectionMode)> {
        match self {
            ChoiceSets::Full => None,
            ChoiceSets::Sampled { sets, mode } => Some((&sets[idx], *mode)),
        }
    }
}

#[inline]
pub(crate) fn dot(x: &[f64], beta: &[f64]) -> f64 {
    x.iter().zip(beta).map(|(a, b)| a * b).sum()
}

/// `V = X·β`.
pub fn linear_utility(attributes: &[f64], params: &UtilityParams) -> Result<f64> {
    check_len("attributes vs coefficients", params.len(), attributes.len())?;
    Ok(dot(attributes, params.as_slice()))
}

#[inline]
pub(crate) fn lse(v: &[f64]) -> f64 {
    let max = v.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if max == f64::NEG_INFINITY {
        return max;
    }
    max + v.iter().map(|x| (x - max).exp()).sum::<f64>().ln()
}

/// Numerically stable `ln Σ exp(v_j)`.
pub fn log_sum_exp(v: &[f64]) -> Result<f64> {
    if v.is_empty() {
        return Err(Error::invalid("log_sum_exp of an empty vector"));
    }
    Ok(lse(v))
}

pub(crate) fn softmax(v: &[f64]) -> Vec<f64> {
    let max = v.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut out: Vec<f64> = v.iter().map(|x| (x - max).exp()).collect();
    let total: f64 = out.iter().sum();
    out.iter_mut().for_each(|p| *p /= total);
    out
}

fn checked_softmax(v: &[f64]) -> Result<Vec<f64>> {
    if v.is_empty() {
        return Err(Error::invalid("probability of an empty choice set"));
    }
    if let Some(bad) = v.iter().find(|x| !x.is_finite()) {
        return Err(Error::invalid(format!("non-finite utility {bad}")));
    }
    Ok(softmax(v))
}

/// Logit probabilities over the full choice set.
pub fn mnl_prob_full(v: &[f64]) -> Result<Vec<f64>> {
    checked_softmax(v)
}

/// Logit probabilities over a sampled set without any correction.
pub fn mnl_prob_sampled_uncorrected(v: &[f64]) -> Result<Vec<f64>> {
    checked_softmax(v)
}

/// Logit probabilities over a sampled set with per-alternative corrections
/// added to the utilities.
pub fn mnl_prob_sampled_corrected(v: &[f64], c: &[f64]) -> Result<Vec<f64>> {
    check_len("corrections vs utilities", v.len(), c.len())?;
    if let Some(bad) = c.iter().find(|x| !x.is_finite()) {
        return Err(Error::invalid(format!("non-finite correction {bad}")));
    }
    let shifted: Vec<f64> = v.iter().zip(c).map(|(a, b)| a + b).collect();
    checked_softmax(&shifted)
}

/// Log probability of the observed choice, given full or sampled sets.
pub(crate) fn log_choice_prob(
    obs: &Observation,
    set: Option<(&SampledSet, CorrectionMode)>,
    beta: &[f64],
) -> f64 {
    match set {
        None => {
            let v = obs.utilities(beta);
            v[obs.chosen] - lse(&v)
        }
        Some((set, mode)) => {
            let mut chosen_term = 0.0;
            let shifted: Vec<f64> = set
                .member_ids()
                .iter()
                .enumerate()
                .map(|(pos, &id)| {
                    let u = dot(obs.attributes(id), beta) + set.correction_at(pos, mode);
                    if id == obs.chosen {
                        chosen_term = u;
                    }
                    u
                })
                .collect();
            chosen_term - lse(&shifted)
        }
    }
}
