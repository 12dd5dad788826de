//! Sampling protocols for the set of alternatives `D_n`.
//!
//! A protocol can draw a set containing the chosen alternative, evaluate
//! `ln π(D|j)` exactly for every member, and enumerate every feasible set
//! together with its probability so that expectations can be computed by
//! brute force.

use rand::Rng;

use crate::error::{Error, Result};
use crate::model::{CorrectionMode, Dataset, Observation, SampledSet};
use crate::streams;

/// Default limit on the number of sets an enumeration may produce.
pub const DEFAULT_ENUMERATION_CAP: u128 = 1_000_000;

#[derive(Clone, Debug, PartialEq)]
pub enum Protocol {
    /// Draw `m - 1` non-chosen alternatives uniformly without replacement.
    UniformWor { m: usize },
    /// Include every non-chosen alternative `k` independently with
    /// probability `p_k`.
    ImportanceIndependent { inclusion_probs: Vec<f64> },
}

/// One feasible set for a fixed chosen alternative.
#[derive(Clone, Debug, PartialEq)]
pub struct EnumeratedSet {
    pub member_ids: Vec<usize>,
    /// `ln π(D|i)` for the chosen alternative the enumeration was built for.
    pub log_prob_given_chosen: f64,
    /// `ln π(D|j)` for every member, aligned with `member_ids`.
    pub log_cond_prob: Vec<f64>,
}

impl EnumeratedSet {
    pub fn to_sampled_set(&self, chosen: usize, mode: CorrectionMode) -> Result<SampledSet> {
        SampledSet::new(
            self.member_ids.clone(),
            self.log_cond_prob.clone(),
            mode,
            chosen,
        )
    }
}

impl Protocol {
    pub fn uniform_wor(m: usize) -> Result<Self> {
        if m < 2 {
            return Err(Error::invalid(format!(
                "uniform_wor needs m >= 2, got {m}"
            )));
        }
        Ok(Protocol::UniformWor { m })
    }

    pub fn importance(inclusion_probs: Vec<f64>) -> Result<Self> {
        if inclusion_probs.len() < 2 {
            return Err(Error::invalid("importance protocol needs J >= 2 probabilities"));
        }
        if let Some((k, p)) = inclusion_probs
            .iter()
            .enumerate()
            .find(|(_, p)| !(**p > 0.0 && **p < 1.0))
        {
            return Err(Error::invalid(format!(
                "inclusion probability p_{k} = {p} outside (0, 1)"
            )));
        }
        Ok(Protocol::ImportanceIndependent { inclusion_probs })
    }

    pub fn name(&self) -> String {
        match self {
            Protocol::UniformWor { m } => format!("uniform_wor(m={m})"),
            Protocol::ImportanceIndependent { inclusion_probs } => {
                let ps: Vec<String> = inclusion_probs.iter().map(|p| format!("{p}")).collect();
                format!("importance({})", ps.join(";"))
            }
        }
    }

    pub fn is_uniform_conditioning(&self) -> bool {
        matches!(self, Protocol::UniformWor { .. })
    }

    /// Checks that the protocol can be applied to a choice set of size `j`.
    pub fn validate_for(&self, j: usize) -> Result<()> {
        match self {
            Protocol::UniformWor { m } => {
                if *m > j {
                    return Err(Error::invalid(format!(
                        "uniform_wor m = {m} exceeds choice-set size J = {j}"
                    )));
                }
                if *m < 2 {
                    return Err(Error::invalid(format!("uniform_wor needs m >= 2, got {m}")));
                }
            }
            Protocol::ImportanceIndependent { inclusion_probs } => {
                if inclusion_probs.len() != j {
                    return Err(Error::invalid(format!(
                        "importance protocol has {} probabilities for J = {j}",
                        inclusion_probs.len()
                    )));
                }
                if let Some(p) = inclusion_probs.iter().find(|p| !(**p > 0.0 && **p < 1.0)) {
                    return Err(Error::invalid(format!(
                        "inclusion probability {p} outside (0, 1)"
                    )));
                }
            }
        }
        Ok(())
    }

    /// Number of feasible sets containing a fixed chosen alternative.
    pub fn count_given_chosen(&self, j: usize) -> u128 {
        match self {
            Protocol::UniformWor { m } => binomial(j as u128 - 1, *m as u128 - 1),
            Protocol::ImportanceIndependent { .. } => 1u128.checked_shl(j as u32 - 1).unwrap_or(u128::MAX),
        }
    }

    /// Number of distinct feasible sets over all choices.
    pub fn count_all(&self, j: usize) -> u128 {
        match self {
            Protocol::UniformWor { m } => binomial(j as u128, *m as u128),
            Protocol::ImportanceIndependent { .. } => {
                1u128.checked_shl(j as u32).map(|c| c - 1).unwrap_or(u128::MAX)
            }
        }
    }

    /// `ln π(D|given)` for a set `members` of a choice set of size `j`.
    /// `given` must be a member.
    pub fn log_cond_prob(&self, members: &[usize], j: usize, given: usize) -> f64 {
        debug_assert!(members.contains(&given));
        match self {
            Protocol::UniformWor { m } => -ln_binomial(j - 1, m - 1),
            Protocol::ImportanceIndependent { inclusion_probs } => {
                let mut in_set = vec![false; j];
                for &mem in members {
                    in_set[mem] = true;
                }
                inclusion_probs
                    .iter()
                    .enumerate()
                    .filter(|(k, _)| *k != given)
                    .map(|(k, p)| if in_set[k] { p.ln() } else { (1.0 - p).ln() })
                    .sum()
            }
        }
    }

    fn log_cond_probs(&self, members: &[usize], j: usize) -> Vec<f64> {
        members
            .iter()
            .map(|&g| self.log_cond_prob(members, j, g))
            .collect()
    }

    /// Draws `D_n` for `observation`; the chosen alternative is always a
    /// member and members are returned in ascending id order.
    pub fn draw<R: Rng + ?Sized>(&self, observation: &Observation, rng: &mut R) -> Result<SampledSet> {
        let j = observation.num_alternatives();
        self.validate_for(j)?;
        let chosen = observation.chosen;
        let mut members = match self {
            Protocol::UniformWor { m } => {
                let mut others: Vec<usize> = (0..j).filter(|&k| k != chosen).collect();
                let picks = m - 1;
                for slot in 0..picks {
                    let swap = rng.random_range(slot..others.len());
                    others.swap(slot, swap);
                }
                others.truncate(picks);
                others.push(chosen);
                others
            }
            Protocol::ImportanceIndependent { inclusion_probs } => {
                let mut members = Vec::new();
                for (k, p) in inclusion_probs.iter().enumerate() {
                    if k == chosen {
                        members.push(k);
                    } else if rng.random::<f64>() < *p {
                        members.push(k);
                    }
                }
                members
            }
        };
        members.sort_unstable();
        let log_cond_prob = self.log_cond_probs(&members, j);
        SampledSet::new(members, log_cond_prob, CorrectionMode::McFadden, chosen)
    }

    /// Every feasible set containing `chosen`, with exact probabilities.
    pub fn enumerate_sets(
        &self,
        observation: &Observation,
        chosen: usize,
        cap: u128,
    ) -> Result<Vec<EnumeratedSet>> {
        let j = observation.num_alternatives();
        self.validate_for(j)?;
        if chosen >= j {
            return Err(Error::invalid(format!("chosen id {chosen} outside J = {j}")));
        }
        let count = self.count_given_chosen(j);
        if count > cap {
            return Err(Error::Capacity {
                count,
                cap,
                context: format!(" (protocol {}, J = {j})", self.name()),
            });
        }
        let others: Vec<usize> = (0..j).filter(|&k| k != chosen).collect();
        let mut out = Vec::with_capacity(count as usize);
        let mut push = |mut members: Vec<usize>| {
            members.push(chosen);
            members.sort_unstable();
            let log_cond_prob = self.log_cond_probs(&members, j);
            let given = members.iter().position(|&x| x == chosen).unwrap_or(0);
            out.push(EnumeratedSet {
                log_prob_given_chosen: log_cond_prob[given],
                member_ids: members,
                log_cond_prob,
            });
        };
        match self {
            Protocol::UniformWor { m } => {
                for combo in Combinations::new(others.len(), m - 1) {
                    push(combo.iter().map(|&c| others[c]).collect());
                }
            }
            Protocol::ImportanceIndependent { .. } => {
                for mask in 0u64..(1u64 << others.len()) {
                    push(
                        others
                            .iter()
                            .enumerate()
                            .filter(|(b, _)| mask >> b & 1 == 1)
                            .map(|(_, &k)| k)
                            .collect(),
                    );
                }
            }
        }
        Ok(out)
    }

    /// Every distinct set that is feasible for at least one chosen
    /// alternative, with `ln π(D|j)` for all members. `log_prob_given_chosen`
    /// is set to `ln π(D|member_ids[0])`.
    pub fn enumerate_all(&self, j: usize, cap: u128) -> Result<Vec<EnumeratedSet>> {
        self.validate_for(j)?;
        let count = self.count_all(j);
        if count > cap {
            return Err(Error::Capacity {
                count,
                cap,
                context: format!(" (protocol {}, J = {j})", self.name()),
            });
        }
        let make = |members: Vec<usize>| {
            let log_cond_prob = self.log_cond_probs(&members, j);
            EnumeratedSet {
                log_prob_given_chosen: log_cond_prob[0],
                member_ids: members,
                log_cond_prob,
            }
        };
        let out = match self {
            Protocol::UniformWor { m } => Combinations::new(j, *m).map(make).collect(),
            Protocol::ImportanceIndependent { .. } => (1u64..(1u64 << j))
                .map(|mask| make((0..j).filter(|b| mask >> b & 1 == 1).collect()))
                .collect(),
        };
        Ok(out)
    }
}

/// Draws `D_n` under `protocol`.
pub fn draw_sampled_set<R: Rng + ?Sized>(
    protocol: &Protocol,
    observation: &Observation,
    rng: &mut R,
) -> Result<SampledSet> {
    protocol.draw(observation, rng)
}

/// Draws one set per observation, each from its own stream
/// `(seed, SAMPLED_SETS, observation index)`.
pub fn draw_for_dataset(protocol: &Protocol, dataset: &Dataset, seed: u64) -> Result<Vec<SampledSet>> {
    protocol.validate_for(dataset.j())?;
    dataset
        .observations()
        .iter()
        .enumerate()
        .map(|(idx, obs)| {
            let mut rng = streams::derive(seed, streams::domain::SAMPLED_SETS, idx as u64);
            protocol.draw(obs, &mut rng)
        })
        .collect()
}

/// All feasible sets containing `chosen`, using the default cap.
pub fn enumerate_sets(
    protocol: &Protocol,
    observation: &Observation,
    chosen: usize,
) -> Result<Vec<EnumeratedSet>> {
    protocol.enumerate_sets(observation, chosen, DEFAULT_ENUMERATION_CAP)
}

/// Correction vector `c_j` for the members of `set`.
pub fn correction_vector(set: &SampledSet, mode: CorrectionMode) -> Result<Vec<f64>> {
    match mode {
        CorrectionMode::McFadden => Ok(set.log_cond_prob().to_vec()),
        CorrectionMode::None => Ok(vec![0.0; set.len()]),
        CorrectionMode::UniformConstant => {
            if !set.is_uniform() {
                return Err(Error::InvalidState(
                    "uniform_constant correction requested on a non-uniform set".into(),
                ));
            }
            Ok(vec![set.log_cond_prob()[0]; set.len()])
        }
    }
}

pub(crate) fn binomial(n: u128, k: u128) -> u128 {
    if k > n {
        return 0;
    }
    let k = k.min(n - k);
    let mut acc: u128 = 1;
    for i in 0..k {
        acc = match acc.checked_mul(n - i) {
            Some(v) => v / (i + 1),
            None => return u128::MAX,
        };
    }
    acc
}

/// `ln C(n, k)`, exact through the integer path whenever it fits.
pub(crate) fn ln_binomial(n: usize, k: usize) -> f64 {
    let c = binomial(n as u128, k as u128);
    if c < (1u128 << 53) {
        (c as f64).ln()
    } else {
        statrs::function::factorial::ln_binomial(n as u64, k as u64)
    }
}

/// Lexicographic `k`-combinations of `0..n`.
struct Combinations {
    n: usize,
    idx: Vec<usize>,
    done: bool,
}

impl Combinations {
    fn new(n: usize, k: usize) -> Self {
        Self {
            n,
            idx: (0..k).collect(),
            done: k > n,
        }
    }
}

impl Iterator for Combinations {
    type Item = Vec<usize>;

    fn next(&mut self) -> Option<Vec<usize>> {
        if self.done {
            return None;
        }
        let current = self.idx.clone();
        let k = self.idx.len();
        let mut i = k;
        loop {
            if i == 0 {
                self.done = true;
                break;
            }
            i -= 1;
            if self.idx[i] < self.n - k + i {
                self.idx[i] += 1;
                for t in i + 1..k {
                    self.idx[t] = self.idx[t - 1] + 1;
                }
                break;
            }
        }
        Some(current)
    }
}
