//! Small shared linear-algebra helpers on top of the LAPACK backend.

use ndarray::{Array1, Array2, ArrayView1, ArrayView2};
use ndarray_linalg::{Cholesky, EigVals, EigValsh, Eigh, SolveTriangular, UPLO};

use crate::error::{Error, Result};

/// Spectral radius `max_i |lambda_i(A)|` of a square real matrix.
pub fn spectral_radius(a: &Array2<f64>) -> Result<f64> {
    let eigs = a.eigvals()?;
    Ok(eigs.iter().map(|z| z.norm()).fold(0.0, f64::max))
}

/// Extreme eigenvalues `(min, max)` of a symmetric matrix.
pub fn sym_eig_extremes(a: &Array2<f64>) -> Result<(f64, f64)> {
    let eigs = a.eigvalsh(UPLO::Lower)?;
    let mut lo = f64::INFINITY;
    let mut hi = f64::NEG_INFINITY;
    for &v in eigs.iter() {
        lo = lo.min(v);
        hi = hi.max(v);
    }
    Ok((lo, hi))
}

/// Solve the SPD system `G x = b` for several right-hand sides (columns of
/// `rhs`) via Cholesky. Fails when `G` is not positive definite.
pub fn solve_spd(g: &Array2<f64>, rhs: &Array2<f64>) -> Result<Array2<f64>> {
    let l = g.cholesky(UPLO::Lower)?;
    let y = l.solve_triangular(UPLO::Lower, ndarray_linalg::Diag::NonUnit, rhs)?;
    let x = l
        .t()
        .to_owned()
        .solve_triangular(UPLO::Upper, ndarray_linalg::Diag::NonUnit, &y)?;
    Ok(x)
}

/// Minimum-norm solution of the (possibly singular) symmetric PSD system
/// `G x = b`, via eigendecomposition with a relative cutoff. Least-squares
/// normal equations are always consistent, so this returns a true minimizer
/// of the underlying quadratic.
pub fn solve_psd_min_norm(g: &Array2<f64>, rhs: &Array2<f64>) -> Result<Array2<f64>> {
    let (eigs, vecs) = g.eigh(UPLO::Lower)?;
    let max_eig = eigs.iter().fold(0.0_f64, |acc, &v| acc.max(v.abs()));
    let cutoff = 1e-12 * max_eig.max(f64::MIN_POSITIVE);
    // x = V diag(1/lam) V' b, zeroing directions below the cutoff
    let vt_b = vecs.t().dot(rhs);
    let mut scaled = vt_b;
    for (i, mut row) in scaled.outer_iter_mut().enumerate() {
        let lam = eigs[i];
        let inv = if lam > cutoff { 1.0 / lam } else { 0.0 };
        row.map_inplace(|v| *v *= inv);
    }
    Ok(vecs.dot(&scaled))
}

/// Random orthogonal matrix from the QR factorization of a Gaussian matrix,
/// with the sign convention `diag(R) > 0` so the result is unique.
pub fn random_orthogonal(d: usize, rng: &mut impl rand::Rng) -> Result<Array2<f64>> {
    use ndarray_linalg::QR;
    let g = gaussian_matrix(d, d, rng);
    let (mut q, r) = g.qr()?;
    for j in 0..d {
        if r[(j, j)] < 0.0 {
            q.column_mut(j).map_inplace(|v| *v = -*v);
        }
    }
    Ok(q)
}

/// Fill a `rows x cols` matrix with i.i.d. standard-normal entries, row-major
/// draw order.
pub fn gaussian_matrix(rows: usize, cols: usize, rng: &mut impl rand::Rng) -> Array2<f64> {
    let dist = rand_distr::StandardNormal;
    let data: Vec<f64> = (0..rows * cols).map(|_| rng.sample(dist)).collect();
    Array2::from_shape_vec((rows, cols), data).expect("shape matches data length")
}

pub fn gaussian_vector(len: usize, rng: &mut impl rand::Rng) -> Array1<f64> {
    let dist = rand_distr::StandardNormal;
    Array1::from_iter((0..len).map(|_| rng.sample::<f64, _>(dist)))
}

pub fn frobenius_sq(a: ArrayView2<f64>) -> f64 {
    a.iter().map(|v| v * v).sum()
}

pub fn inf_norm_vec(v: ArrayView1<f64>) -> f64 {
    v.iter().fold(0.0_f64, |acc, x| acc.max(x.abs()))
}

/// Invert a small square matrix through LU. Used for similarity transforms.
pub fn inverse(a: &Array2<f64>) -> Result<Array2<f64>> {
    use ndarray_linalg::Inverse;
    a.inv().map_err(Error::from)
}

pub fn all_finite(a: ArrayView2<f64>) -> bool {
    a.iter().all(|v| v.is_finite())
}

/// Check symmetry up to an absolute tolerance.
pub fn is_symmetric(a: &Array2<f64>, tol: f64) -> bool {
    if a.nrows() != a.ncols() {
        return false;
    }
    for i in 0..a.nrows() {
        for j in (i + 1)..a.ncols() {
            if (a[(i, j)] - a[(j, i)]).abs() > tol {
                return false;
            }
        }
    }
    true
}
