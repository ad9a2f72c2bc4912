//! Dense symmetric helpers on top of `nalgebra`.

use nalgebra::{Cholesky, DMatrix, DVector, Dyn};

use crate::error::{Error, Result};

/// `(1/n) A Aᵀ + shift·I` for a `p x n` matrix `A`.
pub fn scaled_outer_gram(a: &DMatrix<f64>, shift: f64) -> DMatrix<f64> {
    let n = a.ncols() as f64;
    let at = a.transpose();
    let mut g = a * at;
    g /= n;
    for i in 0..g.nrows() {
        g[(i, i)] += shift;
    }
    g
}

/// `(1/n) Aᵀ A + shift·I` for a `p x n` matrix `A`.
pub fn scaled_inner_gram(a: &DMatrix<f64>, shift: f64) -> DMatrix<f64> {
    let n = a.ncols() as f64;
    let at = a.transpose();
    let mut g = &at * a;
    g /= n;
    for i in 0..g.nrows() {
        g[(i, i)] += shift;
    }
    g
}

pub fn cholesky(m: DMatrix<f64>) -> Result<Cholesky<f64, Dyn>> {
    let dim = m.nrows();
    Cholesky::new(m).ok_or_else(|| Error::SolveFailure(format!("{dim}x{dim} matrix is not numerically positive definite")))
}

pub fn spd_solve(m: DMatrix<f64>, rhs: &DVector<f64>) -> Result<DVector<f64>> {
    Ok(cholesky(m)?.solve(rhs))
}

/// Inverse of a symmetric positive definite matrix, symmetrised.
pub fn spd_inverse(m: DMatrix<f64>) -> Result<DMatrix<f64>> {
    let inv = cholesky(m)?.inverse();
    Ok(symmetrize(inv))
}

pub fn symmetrize(m: DMatrix<f64>) -> DMatrix<f64> {
    let t = m.transpose();
    (m + t) * 0.5
}

pub fn max_abs(m: &DMatrix<f64>) -> f64 {
    m.iter().fold(0.0, |acc, x| acc.max(x.abs()))
}
