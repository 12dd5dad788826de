//! Halton quasi-random draws for simulated likelihood.

use statrs::distribution::{ContinuousCDF, Normal};

const PRIMES: [u64; 20] = [
    2, 3, 5, 7, 11, 13, 17, 19, 23, 29, 31, 37, 41, 43, 47, 53, 59, 61, 67, 71,
];

/// Points discarded at the start of every sequence.
pub const DEFAULT_SKIP: usize = 50;

/// Radical inverse of `index` in `base`.
pub fn radical_inverse(mut index: u64, base: u64) -> f64 {
    let inv = 1.0 / base as f64;
    let mut frac = inv;
    let mut out = 0.0;
    while index > 0 {
        out += (index % base) as f64 * frac;
        index /= base;
        frac *= inv;
    }
    out
}

/// Standard-normal draws, `R` per individual and `K` dimensions each.
///
/// Dimension `d` uses the `d`-th prime as base. Individual `n` takes the
/// consecutive block of points `skip + n·R .. skip + (n+1)·R`.
#[derive(Clone, Debug)]
pub struct HaltonDraws {
    draws: Vec<Vec<Vec<f64>>>,
    per_individual: usize,
    dim: usize,
}

impl HaltonDraws {
    pub fn new(individuals: usize, per_individual: usize, dim: usize, skip: usize) -> Self {
        assert!(dim <= PRIMES.len(), "at most {} Halton dimensions", PRIMES.len());
        let normal = Normal::standard();
        let draws = (0..individuals)
            .map(|n| {
                (0..per_individual)
                    .map(|r| {
                        let index = (skip + n * per_individual + r + 1) as u64;
                        PRIMES[..dim]
                            .iter()
                            .map(|&b| normal.inverse_cdf(radical_inverse(index, b)))
                            .collect()
                    })
                    .collect()
            })
            .collect();
        Self {
            draws,
            per_individual,
            dim,
        }
    }

    pub fn individual(&self, n: usize) -> &[Vec<f64>] {
        &self.draws[n]
    }

    pub fn per_individual(&self) -> usize {
        self.per_individual
    }

    pub fn dim(&self) -> usize {
        self.dim
    }
}
