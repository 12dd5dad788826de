//! Small dense linear-algebra and reduction helpers.

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_distr::{ChiSquared, Distribution, StandardNormal};

use crate::error::{Error, Result};

/// Lower Cholesky factor of a symmetric positive-definite matrix.
pub fn cholesky(m: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    if !m.is_square() {
        return Err(Error::NumericalDegeneracy("matrix is not square".into()));
    }
    let asym = (m - m.transpose()).abs().max();
    if asym > 1e-10 * (1.0 + m.abs().max()) {
        return Err(Error::NumericalDegeneracy(format!(
            "matrix is not symmetric (max asymmetry {asym:e})"
        )));
    }
    nalgebra::Cholesky::new(m.clone())
        .map(|c| c.l())
        .ok_or_else(|| Error::NumericalDegeneracy("matrix is not positive-definite".into()))
}

/// Inverse of a symmetric positive-definite matrix.
pub fn spd_inverse(m: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    let chol = nalgebra::Cholesky::new(m.clone())
        .ok_or_else(|| Error::NumericalDegeneracy("matrix is not positive-definite".into()))?;
    let inv = chol.inverse();
    Ok((&inv + inv.transpose()) * 0.5)
}

pub fn is_positive_definite(m: &DMatrix<f64>) -> bool {
    cholesky(m).is_ok()
}

/// Draw from `N(mean, L Lᵀ)` given the lower factor `L`.
pub fn mvn_draw<R: Rng + ?Sized>(mean: &DVector<f64>, lower: &DMatrix<f64>, rng: &mut R) -> DVector<f64> {
    let z = DVector::from_fn(mean.len(), |_, _| StandardNormal.sample(rng));
    mean + lower * z
}

/// Draw from the inverted Wishart `IW(dof, scale)`, density
/// `∝ |Σ|^{-(dof+K+1)/2} exp(-tr(scale Σ⁻¹)/2)`, with mean
/// `scale / (dof - K - 1)`.
///
/// Uses the Bartlett decomposition of `W ~ Wishart(dof, scale⁻¹)` and
/// returns `W⁻¹`.
pub fn inverse_wishart_draw<R: Rng + ?Sized>(dof: f64, scale: &DMatrix<f64>, rng: &mut R) -> Result<DMatrix<f64>> {
    let k = scale.nrows();
    if dof <= k as f64 - 1.0 {
        return Err(Error::invalid(format!(
            "inverted Wishart needs dof > K - 1, got dof = {dof}, K = {k}"
        )));
    }
    let scale_inv = spd_inverse(scale)?;
    let l = cholesky(&scale_inv)?;
    let mut a = DMatrix::<f64>::zeros(k, k);
    for i in 0..k {
        let chi = ChiSquared::new(dof - i as f64)
            .map_err(|e| Error::NumericalDegeneracy(format!("chi-square: {e}")))?;
        a[(i, i)] = chi.sample(rng).sqrt();
        for j in 0..i {
            a[(i, j)] = StandardNormal.sample(rng);
        }
    }
    let la = &l * &a;
    let w = &la * la.transpose();
    spd_inverse(&w)
}

/// Half-vectorisation (row-major lower triangle): `[s00, s10, s11, s20, ...]`.
pub fn vech(m: &DMatrix<f64>) -> Vec<f64> {
    let k = m.nrows();
    let mut out = Vec::with_capacity(k * (k + 1) / 2);
    for i in 0..k {
        for j in 0..=i {
            out.push(m[(i, j)]);
        }
    }
    out
}

/// Pairwise (tree) summation; the result depends only on the order of
/// `values`, never on how they were produced.
pub fn pairwise_sum(values: &[f64]) -> f64 {
    const LEAF: usize = 16;
    if values.len() <= LEAF {
        return values.iter().sum();
    }
    let mid = values.len() / 2;
    pairwise_sum(&values[..mid]) + pairwise_sum(&values[mid..])
}

/// Element-wise pairwise sum of equally long vectors.
pub fn pairwise_sum_vecs(values: &[Vec<f64>], len: usize) -> Vec<f64> {
    if values.is_empty() {
        return vec![0.0; len];
    }
    if values.len() == 1 {
        return values[0].clone();
    }
    let mid = values.len() / 2;
    let a = pairwise_sum_vecs(&values[..mid], len);
    let b = pairwise_sum_vecs(&values[mid..], len);
    a.iter().zip(&b).map(|(x, y)| x + y).collect()
}
