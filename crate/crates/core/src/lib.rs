//! Sampling of alternatives in multinomial and mixed logit models.

pub mod bayes_mmnl;
pub mod bayes_mnl;
pub mod cli;
pub mod divergence;
pub mod error;
pub mod halton;
pub mod linalg;
pub mod mle;
pub mod model;
pub mod optim;
pub mod protocols;
pub mod streams;
pub mod synth;

pub use error::{Error, Result};
pub use model::{
    linear_utility, log_sum_exp, mnl_prob_full, mnl_prob_sampled_corrected,
    mnl_prob_sampled_uncorrected, Alternative, ChoiceSets, CorrectionMode, Dataset, Observation,
    SampledSet, UtilityParams,
};
pub use protocols::{Protocol, DEFAULT_ENUMERATION_CAP};
