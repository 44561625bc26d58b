//! Dense linear-algebra helpers shared across the crate.
//!
//! Every eigenvector or basis returned from here follows one convention:
//! columns ordered by descending eigenvalue (stable in the original index on
//! ties) and the first non-negligible entry of each column is positive.

use nalgebra::{Cholesky, DMatrix, DVector, Dyn, SymmetricEigen, QR, SVD};

use crate::error::{Error, Result};

/// Relative floor applied to eigenvalues before taking (inverse) roots.
pub const EIGEN_FLOOR: f64 = 1e-12;

pub fn symmetrize(m: &DMatrix<f64>) -> DMatrix<f64> {
    (m + m.transpose()) * 0.5
}

/// Flip column signs so the first entry above `1e-10 * max|col|` is positive.
pub fn fix_signs(m: &mut DMatrix<f64>) {
    for mut col in m.column_iter_mut() {
        let amax = col.amax();
        if amax == 0.0 {
            continue;
        }
        let thresh = 1e-10 * amax;
        if let Some(first) = col.iter().find(|v| v.abs() > thresh) {
            if *first < 0.0 {
                col.neg_mut();
            }
        }
    }
}

/// Symmetric eigendecomposition with eigenvalues in descending order.
pub fn sym_eigen_desc(m: &DMatrix<f64>) -> (DVector<f64>, DMatrix<f64>) {
    let n = m.nrows();
    if n == 0 {
        return (DVector::zeros(0), DMatrix::zeros(0, 0));
    }
    let eig = SymmetricEigen::new(symmetrize(m));
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| {
        eig.eigenvalues[b]
            .partial_cmp(&eig.eigenvalues[a])
            .unwrap_or(std::cmp::Ordering::Equal)
            .then(a.cmp(&b))
    });
    let values = DVector::from_iterator(n, order.iter().map(|&i| eig.eigenvalues[i]));
    let mut vectors = DMatrix::zeros(n, n);
    for (dst, &src) in order.iter().enumerate() {
        vectors.set_column(dst, &eig.eigenvectors.column(src));
    }
    fix_signs(&mut vectors);
    (values, vectors)
}

pub fn sym_eigenvalues_desc(m: &DMatrix<f64>) -> DVector<f64> {
    let mut vals: Vec<f64> = symmetrize(m).symmetric_eigenvalues().iter().copied().collect();
    vals.sort_by(|a, b| b.partial_cmp(a).unwrap_or(std::cmp::Ordering::Equal));
    DVector::from_vec(vals)
}

/// `m^power` for symmetric PSD `m`, flooring eigenvalues at
/// `EIGEN_FLOOR * max eigenvalue`.
pub fn sym_power(m: &DMatrix<f64>, power: f64) -> DMatrix<f64> {
    let (vals, vecs) = sym_eigen_desc(m);
    let lmax = vals.iter().cloned().fold(0.0_f64, f64::max);
    let floor = EIGEN_FLOOR * lmax;
    let scaled = DVector::from_iterator(vals.len(), vals.iter().map(|&l| l.max(floor).powf(power)));
    let mut left = vecs.clone();
    for (j, mut col) in left.column_iter_mut().enumerate() {
        col *= scaled[j];
    }
    symmetrize(&(left * vecs.transpose()))
}

pub fn sym_sqrt(m: &DMatrix<f64>) -> DMatrix<f64> {
    sym_power(m, 0.5)
}

pub fn sym_inv_sqrt(m: &DMatrix<f64>) -> DMatrix<f64> {
    sym_power(m, -0.5)
}

pub fn cholesky(m: &DMatrix<f64>, what: &str) -> Result<Cholesky<f64, Dyn>> {
    Cholesky::new(symmetrize(m)).ok_or_else(|| Error::NotPositiveDefinite(what.to_string()))
}

pub fn logdet_from_cholesky(ch: &Cholesky<f64, Dyn>) -> f64 {
    2.0 * ch.l_dirty().diagonal().iter().map(|d| d.ln()).sum::<f64>()
}

pub fn logdet_spd(m: &DMatrix<f64>) -> Result<f64> {
    Ok(logdet_from_cholesky(&cholesky(m, "log-determinant")?))
}

pub fn spd_inverse(m: &DMatrix<f64>, what: &str) -> Result<DMatrix<f64>> {
    Ok(symmetrize(&cholesky(m, what)?.inverse()))
}

/// Numerical rank with the usual `max(n, m) * eps * sigma_max` cut.
pub fn numerical_rank(m: &DMatrix<f64>) -> usize {
    if m.nrows() == 0 || m.ncols() == 0 {
        return 0;
    }
    let sv = m.clone().singular_values();
    let smax = sv.max();
    if smax == 0.0 {
        return 0;
    }
    let tol = (m.nrows().max(m.ncols()) as f64) * f64::EPSILON * smax;
    sv.iter().filter(|&&s| s > tol).count()
}

/// Orthonormal basis for span(m), via the left singular vectors whose
/// singular values pass the rank cut.
pub fn range_basis(m: &DMatrix<f64>) -> DMatrix<f64> {
    let (n, k) = m.shape();
    if k == 0 || n == 0 {
        return DMatrix::zeros(n, 0);
    }
    let svd = SVD::new(m.clone(), true, false);
    let u = svd.u.expect("left singular vectors requested");
    let smax = svd.singular_values.max();
    if smax == 0.0 {
        return DMatrix::zeros(n, 0);
    }
    let tol = (n.max(k) as f64) * f64::EPSILON * smax;
    let keep: Vec<usize> = (0..svd.singular_values.len())
        .filter(|&i| svd.singular_values[i] > tol)
        .collect();
    let mut out = DMatrix::zeros(n, keep.len());
    for (dst, &src) in keep.iter().enumerate() {
        out.set_column(dst, &u.column(src));
    }
    out
}

/// Orthonormal basis of the null space of `m^T`, i.e. `Q` with `Q^T m = 0`
/// and `Q^T Q = I`.
pub fn null_basis(m: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    let n = m.nrows();
    if m.ncols() == 0 {
        return Ok(DMatrix::identity(n, n));
    }
    let span = range_basis(m);
    let r = span.ncols();
    if r >= n {
        return Err(Error::EmptyNullSpace(r));
    }
    if r == 0 {
        return Ok(DMatrix::identity(n, n));
    }
    // Householder QR of the orthonormal span; the trailing columns of the full
    // orthogonal factor complete the basis.
    let qr = QR::new(span);
    let mut qt = DMatrix::<f64>::identity(n, n);
    qr.q_tr_mul(&mut qt);
    let q = qt.transpose();
    let mut out = q.columns(r, n - r).into_owned();
    fix_signs(&mut out);
    Ok(out)
}

/// Orthonormal basis for a full-column-rank matrix; errors when rank deficient.
pub fn orthonormalize(a: &DMatrix<f64>, what: &str) -> Result<DMatrix<f64>> {
    if a.ncols() == 0 {
        return Ok(DMatrix::zeros(a.nrows(), 0));
    }
    let sv = a.clone().singular_values();
    let smax = sv.max();
    let smin = sv.min();
    if a.ncols() > a.nrows() || smax == 0.0 || smin <= 1e-12 * smax {
        return Err(Error::RankDeficient(format!(
            "{what}: {} columns, singular value ratio {:e}",
            a.ncols(),
            if smax > 0.0 { smin / smax } else { 0.0 }
        )));
    }
    Ok(QR::new(a.clone()).q())
}

/// Solve `m x = rhs` for symmetric positive definite `m`.
pub fn spd_solve(m: &DMatrix<f64>, rhs: &DMatrix<f64>, what: &str) -> Result<DMatrix<f64>> {
    Ok(cholesky(m, what)?.solve(rhs))
}

pub fn spd_solve_vec(m: &DMatrix<f64>, rhs: &DVector<f64>, what: &str) -> Result<DVector<f64>> {
    Ok(cholesky(m, what)?.solve(rhs))
}

pub fn trace_product(a: &DMatrix<f64>, b: &DMatrix<f64>) -> f64 {
    // tr(A B) = sum_ij A_ij B_ji
    a.iter()
        .zip(b.transpose().iter())
        .map(|(x, y)| x * y)
        .sum()
}

/// Largest absolute entry of `a - b`.
pub fn max_abs_diff(a: &DMatrix<f64>, b: &DMatrix<f64>) -> f64 {
    (a - b).amax()
}
