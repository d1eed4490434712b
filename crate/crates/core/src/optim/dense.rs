//! Small dense linear-algebra helpers.

use crate::error::{Error, Result};
use nalgebra::{DMatrix, DVector, SymmetricEigen};

fn symmetrize(m: &DMatrix<f64>) -> DMatrix<f64> {
    (m + m.transpose()) * 0.5
}

/// Smallest eigenvalue of the symmetric part of `m`.
pub fn min_eigenvalue(m: &DMatrix<f64>) -> Result<f64> {
    if m.nrows() != m.ncols() {
        return Err(Error::Dimension(format!("{}x{} is not square", m.nrows(), m.ncols())));
    }
    if m.nrows() == 0 {
        return Err(Error::InvalidArgument("empty matrix".into()));
    }
    let eig = SymmetricEigen::new(symmetrize(m));
    Ok(eig.eigenvalues.min())
}

/// Largest eigenvalue of the symmetric part of `m`.
pub fn max_eigenvalue(m: &DMatrix<f64>) -> Result<f64> {
    Ok(-min_eigenvalue(&(-m))?)
}

/// Splits a symmetric matrix into positive and negative semidefinite parts.
pub fn psd_split(m: &DMatrix<f64>) -> (DMatrix<f64>, DMatrix<f64>) {
    let eig = SymmetricEigen::new(symmetrize(m));
    let n = m.nrows();
    let mut pos = DMatrix::zeros(n, n);
    let mut neg = DMatrix::zeros(n, n);
    for (k, &lambda) in eig.eigenvalues.iter().enumerate() {
        let v = eig.eigenvectors.column(k);
        let outer = &v * v.transpose() * lambda;
        if lambda > 0.0 {
            pos += outer;
        } else if lambda < 0.0 {
            neg += outer;
        }
    }
    (pos, neg)
}

/// Solves `Aᵀ P + P A + W = 0` for symmetric `P` by a direct solve over the
/// `n(n+1)/2` independent unknowns.
pub fn solve_lyapunov(a: &DMatrix<f64>, w: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    let n = a.nrows();
    if a.ncols() != n || w.nrows() != n || w.ncols() != n {
        return Err(Error::Dimension("lyapunov operands must be square and equal".into()));
    }
    let idx = |i: usize, j: usize| {
        let (r, c) = if i >= j { (i, j) } else { (j, i) };
        r * (r + 1) / 2 + c
    };
    let m = n * (n + 1) / 2;
    let mut lhs = DMatrix::zeros(m, m);
    let mut rhs = DVector::zeros(m);
    for i in 0..n {
        for j in 0..=i {
            let row = idx(i, j);
            // (AᵀP)_ij = Σ_k A_ki P_kj and (PA)_ij = Σ_k P_ik A_kj
            for k in 0..n {
                lhs[(row, idx(k, j))] += a[(k, i)];
                lhs[(row, idx(i, k))] += a[(k, j)];
            }
            rhs[row] = -0.5 * (w[(i, j)] + w[(j, i)]);
        }
    }
    let sol = lhs
        .lu()
        .solve(&rhs)
        .ok_or_else(|| Error::Singular("lyapunov operator (A has eigenvalues summing to zero)".into()))?;
    Ok(DMatrix::from_fn(n, n, |i, j| sol[idx(i, j)]))
}

/// `ln det` of a symmetric positive definite matrix via Cholesky.
pub fn log_det_spd(m: &DMatrix<f64>) -> Result<f64> {
    let chol = m
        .clone()
        .cholesky()
        .ok_or_else(|| Error::Domain("matrix is not positive definite".into()))?;
    Ok(2.0 * chol.l().diagonal().iter().map(|d| d.ln()).sum::<f64>())
}
