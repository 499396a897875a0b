//! Small dense linear-algebra helpers on top of nalgebra.

use nalgebra::{DMatrix, SymmetricEigen};

use crate::error::{Error, Result};

pub fn to_row_major(m: &DMatrix<f64>) -> Vec<f64> {
    let mut out = Vec::with_capacity(m.len());
    for r in 0..m.nrows() {
        for c in 0..m.ncols() {
            out.push(m[(r, c)]);
        }
    }
    out
}

pub fn is_symmetric(m: &DMatrix<f64>, tol: f64) -> bool {
    m.is_square()
        && (0..m.nrows()).all(|i| (0..i).all(|j| (m[(i, j)] - m[(j, i)]).abs() <= tol * (1.0 + m[(i, j)].abs())))
}

/// Errors unless `m` is symmetric with smallest eigenvalue ≥ −tol.
pub fn check_psd(m: &DMatrix<f64>, tol: f64) -> Result<()> {
    if !is_symmetric(m, 1e-12) {
        return Err(Error::Numerical("matrix is not symmetric".into()));
    }
    if m.nrows() == 0 {
        return Ok(());
    }
    let min = SymmetricEigen::new(m.clone()).eigenvalues.min();
    if min < -tol {
        return Err(Error::Numerical(format!("matrix is indefinite (eigenvalue {min})")));
    }
    Ok(())
}

/// Rebuilds `m` with eigenvalues in `[−tol, 0)` set to 0; more negative ones are an error.
pub fn clamp_psd(m: &DMatrix<f64>, tol: f64) -> Result<DMatrix<f64>> {
    let eig = SymmetricEigen::new(m.clone());
    if eig.eigenvalues.iter().all(|&l| l >= 0.0) {
        return Ok(m.clone());
    }
    if let Some(l) = eig.eigenvalues.iter().find(|&&l| l < -tol) {
        return Err(Error::Numerical(format!("matrix is indefinite (eigenvalue {l})")));
    }
    let vals = eig.eigenvalues.map(|l| l.max(0.0));
    let v = &eig.eigenvectors;
    let out = v * DMatrix::from_diagonal(&vals) * v.transpose();
    Ok((&out + out.transpose()) * 0.5)
}

/// A factor `L` with `L·Lᵀ = m`: Cholesky when possible, otherwise `V·√Λ` from the
/// eigendecomposition (semi-definite matrices).
pub fn psd_factor(m: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    if let Some(c) = m.clone().cholesky() {
        return Ok(c.l());
    }
    let eig = SymmetricEigen::new(m.clone());
    let scale = eig.eigenvalues.iter().fold(0.0f64, |a, l| a.max(l.abs())).max(1.0);
    if let Some(l) = eig.eigenvalues.iter().find(|&&l| l < -1e-10 * scale) {
        return Err(Error::Numerical(format!("covariance is indefinite (eigenvalue {l})")));
    }
    let roots = eig.eigenvalues.map(|l| l.max(0.0).sqrt());
    Ok(&eig.eigenvectors * DMatrix::from_diagonal(&roots))
}
