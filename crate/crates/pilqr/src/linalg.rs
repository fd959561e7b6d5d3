//! Small dense linear-algebra helpers shared by the fitting and update code.
//!
//! Everything here operates on symmetric positive-(semi)definite matrices of
//! modest size (state/action dims are single digits), so we lean on Cholesky
//! and symmetric eigendecompositions and never bother with sparsity.

use nalgebra::{Cholesky, DMatrix, DVector, Dyn, SymmetricEigen};

/// `(a + a^T) / 2`. Backward passes accumulate tiny asymmetries that Cholesky
/// is intolerant of; every matrix that is symmetric by construction gets
/// re-symmetrized before factorization.
pub fn symmetrize(a: &DMatrix<f64>) -> DMatrix<f64> {
    (a + a.transpose()) * 0.5
}

/// Lower-triangular Cholesky factor `L` with `a = L L^T`, or `None` if `a` is
/// not positive definite. This is the one Cholesky convention used everywhere
/// (sampling, reparametrization, KL terms), so factors are interchangeable
/// across modules.
pub fn chol_lower(a: &DMatrix<f64>) -> Option<DMatrix<f64>> {
    Cholesky::new(a.clone()).map(|c| c.l())
}

/// Cholesky object for repeated solves against one SPD matrix.
pub fn chol(a: &DMatrix<f64>) -> Option<Cholesky<f64, Dyn>> {
    Cholesky::new(symmetrize(a))
}

/// Solves `a x = b` for SPD `a` with `b` a matrix of right-hand sides.
pub fn spd_solve(a: &DMatrix<f64>, b: &DMatrix<f64>) -> Option<DMatrix<f64>> {
    chol(a).map(|c| c.solve(b))
}

/// Solves `a x = b` for SPD `a` with a vector right-hand side.
pub fn spd_solve_vec(a: &DMatrix<f64>, b: &DVector<f64>) -> Option<DVector<f64>> {
    chol(a).map(|c| c.solve(b))
}

/// Inverse of an SPD matrix via Cholesky.
pub fn spd_inverse(a: &DMatrix<f64>) -> Option<DMatrix<f64>> {
    chol(a).map(|c| c.inverse())
}

/// `log |a|` for SPD `a`, via the Cholesky diagonal.
pub fn logdet_spd(a: &DMatrix<f64>) -> Option<f64> {
    chol(a).map(|c| 2.0 * c.l_dirty().diagonal().iter().map(|d| d.ln()).sum::<f64>())
}

/// Projects a symmetric matrix onto the SPD cone by clamping its eigenvalues
/// to `floor` from below. `floor` must be positive for a PD result.
pub fn clamp_spd(a: &DMatrix<f64>, floor: f64) -> DMatrix<f64> {
    let eig = SymmetricEigen::new(symmetrize(a));
    let clamped = DVector::from_iterator(
        eig.eigenvalues.len(),
        eig.eigenvalues.iter().map(|&l| l.max(floor)),
    );
    &eig.eigenvectors * DMatrix::from_diagonal(&clamped) * eig.eigenvectors.transpose()
}

/// `x^T a x`.
pub fn quad_form(a: &DMatrix<f64>, x: &DVector<f64>) -> f64 {
    (x.transpose() * a * x)[(0, 0)]
}

/// Weighted ridge least squares: minimizes
/// `sum_i w_i ||y_i - theta^T z_i||^2 + reg * ||theta||_F^2`
/// over `theta` (p x q), where `z` is N x p and `y` is N x q. Returns `None`
/// when the (regularized) normal matrix is singular, which can only happen
/// with `reg = 0` and a rank-deficient design.
pub fn ridge_regression(
    z: &DMatrix<f64>,
    y: &DMatrix<f64>,
    weights: &[f64],
    reg: f64,
) -> Option<DMatrix<f64>> {
    let n = z.nrows();
    let p = z.ncols();
    assert_eq!(y.nrows(), n, "design and target row counts differ");
    assert_eq!(weights.len(), n, "one weight per row");

    let mut ztwz = DMatrix::<f64>::zeros(p, p);
    let mut ztwy = DMatrix::<f64>::zeros(p, y.ncols());
    for i in 0..n {
        let zi = z.row(i).transpose();
        let yi = y.row(i);
        ztwz.syger(weights[i], &zi, &zi, 1.0);
        ztwy += weights[i] * &zi * yi;
    }
    for d in 0..p {
        ztwz[(d, d)] += reg;
    }
    // syger only fills the lower triangle; mirror before factorizing.
    ztwz.fill_upper_triangle_with_lower_triangle();
    Cholesky::new(ztwz).map(|c| c.solve(&ztwy))
}

/// Mean of a slice of vectors. Panics on an empty slice.
pub fn mean_vec(xs: &[DVector<f64>]) -> DVector<f64> {
    assert!(!xs.is_empty(), "mean of empty set");
    let mut acc = DVector::zeros(xs[0].len());
    for x in xs {
        acc += x;
    }
    acc / xs.len() as f64
}

/// `true` iff every entry is finite.
pub fn all_finite_mat(a: &DMatrix<f64>) -> bool {
    a.iter().all(|v| v.is_finite())
}

pub fn all_finite_vec(a: &DVector<f64>) -> bool {
    a.iter().all(|v| v.is_finite())
}
