//! Dense symmetric/SPD helpers over nalgebra.
//!
//! Everything here routes through Cholesky: inverses and log-determinants of
//! precision/covariance matrices are only ever taken after a successful
//! factorization, and estimated covariances get one shot of trace-scaled
//! jitter before being declared non-SPD.

use nalgebra::{Cholesky, DMatrix, DVector, Dyn};

use crate::error::{Error, Result};

pub type Matrix = DMatrix<f64>;
pub type Vector = DVector<f64>;

/// Relative jitter applied when a finite-sample covariance estimate fails
/// Cholesky: `eps * (trace/dim)` is added to the diagonal once.
pub const SPD_JITTER_EPS: f64 = 1e-10;

/// Exact symmetrization `(A + Aᵀ)/2`.
pub fn sym(a: &Matrix) -> Matrix {
    let mut s = a.clone();
    let n = a.nrows();
    for i in 0..n {
        for j in (i + 1)..n {
            let v = 0.5 * (a[(i, j)] + a[(j, i)]);
            s[(i, j)] = v;
            s[(j, i)] = v;
        }
    }
    s
}

pub fn max_abs_asymmetry(a: &Matrix) -> f64 {
    let mut worst: f64 = 0.0;
    for i in 0..a.nrows() {
        for j in (i + 1)..a.ncols() {
            worst = worst.max((a[(i, j)] - a[(j, i)]).abs());
        }
    }
    worst
}

pub fn max_abs_offdiag(a: &Matrix) -> f64 {
    let mut worst: f64 = 0.0;
    for i in 0..a.nrows() {
        for j in 0..a.ncols() {
            if i != j {
                worst = worst.max(a[(i, j)].abs());
            }
        }
    }
    worst
}

pub fn is_exactly_diagonal(a: &Matrix) -> bool {
    max_abs_offdiag(a) == 0.0
}

/// Cholesky of an SPD matrix; `what` names the matrix in the error.
pub fn cholesky(a: &Matrix, what: &str) -> Result<Cholesky<f64, Dyn>> {
    Cholesky::new(a.clone()).ok_or_else(|| Error::NotPositiveDefinite(what.to_string()))
}

/// Cholesky with one jitter retry: on failure, `SPD_JITTER_EPS * (trace/dim)`
/// is added to the diagonal. Returns the factorization and whether jitter
/// was needed.
pub fn cholesky_with_jitter(a: &Matrix, what: &str) -> Result<(Cholesky<f64, Dyn>, bool)> {
    if let Some(chol) = Cholesky::new(a.clone()) {
        return Ok((chol, false));
    }
    let dim = a.nrows();
    let scale = a.trace() / dim as f64;
    let mut jittered = a.clone();
    for i in 0..dim {
        jittered[(i, i)] += SPD_JITTER_EPS * scale;
    }
    match Cholesky::new(jittered) {
        Some(chol) => Ok((chol, true)),
        None => Err(Error::NotPositiveDefinite(format!("{what} (after jitter)"))),
    }
}

/// `log |A|` from a Cholesky factor: `2 Σ log L_ii`.
pub fn log_det(chol: &Cholesky<f64, Dyn>) -> f64 {
    let l = chol.l_dirty();
    let mut acc = 0.0;
    for i in 0..l.nrows() {
        acc += l[(i, i)].ln();
    }
    2.0 * acc
}

/// SPD inverse via Cholesky, re-symmetrized.
pub fn spd_inverse(a: &Matrix, what: &str) -> Result<Matrix> {
    Ok(sym(&cholesky(a, what)?.inverse()))
}

/// Eigenvalues of a symmetric matrix, sorted descending.
pub fn symmetric_eigenvalues(a: &Matrix) -> Vec<f64> {
    let mut eigs: Vec<f64> = sym(a).symmetric_eigenvalues().iter().copied().collect();
    eigs.sort_by(|x, y| y.total_cmp(x));
    eigs
}

/// Solve the generalized symmetric eigenproblem `A v = λ B v` with SPD `B`.
///
/// Reduces to a standard symmetric problem with the Cholesky factor of `B`:
/// `C = L⁻¹ A L⁻ᵀ`, then maps eigenvectors back as `v = L⁻ᵀ u`, which makes
/// them B-orthonormal (`vᵀ B v = 1`). Pairs are returned sorted by
/// descending eigenvalue.
pub fn generalized_symmetric_eigen(a: &Matrix, b: &Matrix, what: &str) -> Result<(Vec<f64>, Matrix)> {
    let dim = a.nrows();
    let chol = cholesky(b, what)?;
    let l = chol.l();

    // C = L⁻¹ A L⁻ᵀ via two triangular solves.
    let mut c = a.clone();
    l.solve_lower_triangular_mut(&mut c);
    let mut c_t = c.transpose();
    l.solve_lower_triangular_mut(&mut c_t);
    let c = sym(&c_t);

    let eig = c.symmetric_eigen();
    let mut order: Vec<usize> = (0..dim).collect();
    order.sort_by(|&i, &j| eig.eigenvalues[j].total_cmp(&eig.eigenvalues[i]));

    let mut values = Vec::with_capacity(dim);
    let mut vectors = Matrix::zeros(dim, dim);
    for (col, &idx) in order.iter().enumerate() {
        values.push(eig.eigenvalues[idx]);
        let mut v = eig.eigenvectors.column(idx).clone_owned();
        l.transpose().solve_upper_triangular_mut(&mut v);
        vectors.set_column(col, &v);
    }
    Ok((values, vectors))
}

pub fn all_finite_mat(a: &Matrix) -> bool {
    a.iter().all(|x| x.is_finite())
}

pub fn all_finite_vec(v: &Vector) -> bool {
    v.iter().all(|x| x.is_finite())
}
