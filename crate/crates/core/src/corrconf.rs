//! Loadings, bias-corrected regression of the naive effects on the loadings,
//! and reconstruction of the full confounder matrix.

use nalgebra::DMatrix;

use crate::error::{Error, Result};
use crate::icase::FactorFit;
use crate::linalg;
use crate::linmodel::{split_data, CovarianceBasis};

#[derive(Clone, Debug)]
pub struct ConfounderEstimate {
    pub l_hat: DMatrix<f64>,
    pub omega_hat: DMatrix<f64>,
    pub c_hat: DMatrix<f64>,
    pub source_fit: FactorFit,
    /// False when the bias correction was singular and plain least squares
    /// was used instead.
    pub bias_corrected: bool,
    /// `Qx` used for the split, so `Qx' C_hat = C_perp` can be checked.
    pub qx: DMatrix<f64>,
}

impl ConfounderEstimate {
    pub fn k(&self) -> usize {
        self.c_hat.ncols()
    }

    /// Largest entry of `Qx' C_hat - C_perp`.
    pub fn identity_residual(&self) -> f64 {
        if self.k() == 0 {
            return 0.0;
        }
        (self.qx.transpose() * &self.c_hat - &self.source_fit.c_perp).amax()
    }
}

fn factor_gram(c_perp: &DMatrix<f64>, w_hat: &DMatrix<f64>) -> Result<(DMatrix<f64>, DMatrix<f64>)> {
    let chol = linalg::cholesky(w_hat, "W")?;
    let winv_c = chol.solve(c_perp);
    let gram = linalg::symmetrize(&(c_perp.transpose() * &winv_c));
    Ok((winv_c, gram))
}

/// Row `g` is `(C' W^{-1} C)^{-1} C' W^{-1} y_{g2}`.
pub fn estimate_loadings(y2: &DMatrix<f64>, c_perp: &DMatrix<f64>, w_hat: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    let k = c_perp.ncols();
    if k == 0 {
        return Ok(DMatrix::zeros(y2.nrows(), 0));
    }
    if y2.ncols() != c_perp.nrows() || w_hat.shape() != (c_perp.nrows(), c_perp.nrows()) {
        return Err(Error::DimensionMismatch(format!(
            "Y2 has {} columns, factors {} rows, W is {:?}",
            y2.ncols(),
            c_perp.nrows(),
            w_hat.shape()
        )));
    }
    let (winv_c, gram) = factor_gram(c_perp, w_hat)?;
    let gram_inv = linalg::spd_inverse(&gram, "factor Gram").map_err(|_| Error::SingularGram)?;
    Ok(y2 * winv_c * gram_inv)
}

/// `Y1' L (L'L)^{-1}`.
pub fn omega_ols(y1: &DMatrix<f64>, l_hat: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    let ltl = linalg::symmetrize(&(l_hat.transpose() * l_hat));
    let inv = linalg::spd_inverse(&ltl, "L'L").map_err(|_| Error::SingularGram)?;
    Ok(y1.transpose() * l_hat * inv)
}

/// `Y1' L {L'L - p delta2 (C' W^{-1} C)^{-1}}^{-1}`.
pub fn omega_bias_corrected(
    y1: &DMatrix<f64>,
    l_hat: &DMatrix<f64>,
    c_perp: &DMatrix<f64>,
    w_hat: &DMatrix<f64>,
    delta2: f64,
    p: usize,
) -> Result<DMatrix<f64>> {
    let k = l_hat.ncols();
    if k == 0 {
        return Ok(DMatrix::zeros(y1.ncols(), 0));
    }
    if y1.nrows() != l_hat.nrows() {
        return Err(Error::DimensionMismatch(format!(
            "Y1 has {} rows, loadings {}",
            y1.nrows(),
            l_hat.nrows()
        )));
    }
    let (_, gram) = factor_gram(c_perp, w_hat)?;
    let gram_inv = linalg::spd_inverse(&gram, "factor Gram").map_err(|_| Error::SingularGram)?;
    let ltl = linalg::symmetrize(&(l_hat.transpose() * l_hat));
    let corrected = linalg::symmetrize(&(&ltl - gram_inv * (p as f64 * delta2)));
    let ev = linalg::sym_eigenvalues_desc(&corrected);
    let smallest = ev.min();
    let norm = linalg::sym_eigenvalues_desc(&ltl).amax();
    if smallest < 1e-8 * norm {
        return Err(Error::BiasCorrectionSingular { eigenvalue: smallest });
    }
    let inv = corrected
        .try_inverse()
        .ok_or(Error::BiasCorrectionSingular { eigenvalue: smallest })?;
    Ok(y1.transpose() * l_hat * inv)
}

/// `C = X Omega + V Qx W^{-1} C_perp`.
pub fn assemble_confounders(
    x: &DMatrix<f64>,
    omega: &DMatrix<f64>,
    v_hat: &DMatrix<f64>,
    qx: &DMatrix<f64>,
    w_hat: &DMatrix<f64>,
    c_perp: &DMatrix<f64>,
) -> Result<DMatrix<f64>> {
    let n = x.nrows();
    let k = c_perp.ncols();
    if omega.shape() != (x.ncols(), k) || v_hat.shape() != (n, n) || qx.nrows() != n || qx.ncols() != c_perp.nrows()
    {
        return Err(Error::DimensionMismatch(format!(
            "X {:?}, Omega {:?}, V {:?}, Qx {:?}, C_perp {:?}",
            x.shape(),
            omega.shape(),
            v_hat.shape(),
            qx.shape(),
            c_perp.shape()
        )));
    }
    let winv_c = linalg::cholesky(w_hat, "W")?.solve(c_perp);
    Ok(x * omega + v_hat * qx * winv_c)
}

/// Reconstruct `C` from a factor fit. `y` is features by samples and `basis`
/// is in the sample frame of `y` (after any nuisance rotation); the fit must
/// come from `Y Qx` with `Qx` the null basis of `x`.
pub fn estimate_confounders(
    y: &DMatrix<f64>,
    x: &DMatrix<f64>,
    basis: &CovarianceBasis,
    fit: &FactorFit,
) -> Result<ConfounderEstimate> {
    estimate_confounders_with(y, x, basis, fit, true)
}

/// As [`estimate_confounders`], optionally skipping the bias correction.
pub fn estimate_confounders_with(
    y: &DMatrix<f64>,
    x: &DMatrix<f64>,
    basis: &CovarianceBasis,
    fit: &FactorFit,
    bias_correct: bool,
) -> Result<ConfounderEstimate> {
    let v_hat = linalg::symmetrize(&basis.build_covariance(&fit.variance.tau)?);
    let split = split_data(y, x, &v_hat)?;
    let w_hat = fit.w();
    let l_hat = estimate_loadings(&split.y2, &fit.c_perp, w_hat)?;
    let p = y.nrows();
    let (omega_hat, bias_corrected) = if x.ncols() == 0 || fit.k == 0 {
        (DMatrix::zeros(x.ncols(), fit.k), true)
    } else if !bias_correct {
        (omega_ols(&split.y1, &l_hat)?, false)
    } else {
        match omega_bias_corrected(&split.y1, &l_hat, &fit.c_perp, w_hat, fit.variance.delta2, p) {
            Ok(o) => (o, true),
            Err(Error::BiasCorrectionSingular { eigenvalue }) => {
                log::warn!("bias correction singular (eigenvalue {eigenvalue:e}); using least squares");
                (omega_ols(&split.y1, &l_hat)?, false)
            }
            Err(e) => return Err(e),
        }
    };
    let c_hat = assemble_confounders(x, &omega_hat, &v_hat, &split.qx, w_hat, &fit.c_perp)?;
    if c_hat.iter().any(|v| !v.is_finite()) {
        return Err(Error::SingularCovariance("confounder estimate is not finite".into()));
    }
    Ok(ConfounderEstimate {
        l_hat,
        omega_hat,
        c_hat,
        source_fit: fit.clone(),
        bias_corrected,
        qx: split.qx,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    use rand_distr::StandardNormal;

    fn gauss(rng: &mut ChaCha8Rng, r: usize, c: usize) -> DMatrix<f64> {
        DMatrix::from_fn(r, c, |_, _| rng.sample(StandardNormal))
    }

    fn spd(rng: &mut ChaCha8Rng, n: usize) -> DMatrix<f64> {
        let a = gauss(rng, n, n);
        &a * a.transpose() / n as f64 + DMatrix::<f64>::identity(n, n)
    }

    #[test]
    fn no_factors_no_loadings() {
        let y2 = DMatrix::from_element(5, 3, 1.0);
        let l = estimate_loadings(&y2, &DMatrix::zeros(3, 0), &DMatrix::identity(3, 3)).unwrap();
        assert_eq!(l.shape(), (5, 0));
    }

    #[test]
    fn noiseless_loadings_exact() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let c = gauss(&mut rng, 7, 2);
        let l = gauss(&mut rng, 20, 2);
        let w = spd(&mut rng, 7);
        let lh = estimate_loadings(&(&l * c.transpose()), &c, &w).unwrap();
        assert!((lh - l).amax() < 1e-8);
    }

    #[test]
    fn loadings_match_normal_equations() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let (p, m) = (50, 8);
        let c = gauss(&mut rng, m, 2);
        let w = spd(&mut rng, m);
        let y2 = gauss(&mut rng, p, 2) * c.transpose() + gauss(&mut rng, p, m);
        let lh = estimate_loadings(&y2, &c, &w).unwrap();
        let wi = w.clone().try_inverse().unwrap();
        let lhs = c.transpose() * &wi * &c;
        for g in 0..p {
            let rhs = c.transpose() * &wi * y2.row(g).transpose();
            let sol = lhs.clone().lu().solve(&rhs).unwrap();
            for j in 0..2 {
                assert!((lh[(g, j)] - sol[j]).abs() < 1e-10);
            }
        }
    }

    #[test]
    fn zero_noise_variance_gives_ols() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let y1 = gauss(&mut rng, 30, 1);
        let l = gauss(&mut rng, 30, 2);
        let c = gauss(&mut rng, 6, 2);
        let w = spd(&mut rng, 6);
        let bc = omega_bias_corrected(&y1, &l, &c, &w, 0.0, 30).unwrap();
        let ols = omega_ols(&y1, &l).unwrap();
        assert!((bc - ols).amax() < 1e-12);
    }

    #[test]
    fn orthogonal_confounders_give_zero_omega() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let n = 8;
        let x = gauss(&mut rng, n, 1);
        let qx = linalg::null_basis(&x).unwrap();
        let c_perp = gauss(&mut rng, n - 1, 2);
        let c = &qx * &c_perp;
        let l = gauss(&mut rng, 40, 2);
        let y = &l * c.transpose();
        let split = split_data(&y, &x, &DMatrix::identity(n, n)).unwrap();
        let lh = estimate_loadings(&split.y2, &c_perp, &DMatrix::identity(n - 1, n - 1)).unwrap();
        let om = omega_bias_corrected(&split.y1, &lh, &c_perp, &DMatrix::identity(n - 1, n - 1), 0.0, 40).unwrap();
        assert!(om.amax() < 1e-8);
    }

    #[test]
    fn assemble_cases() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let n = 7;
        let x = gauss(&mut rng, n, 2);
        let qx = linalg::null_basis(&x).unwrap();
        let c_perp = gauss(&mut rng, n - 2, 3);
        let v = spd(&mut rng, n);
        let w = qx.transpose() * &v * &qx;
        let zero = DMatrix::zeros(2, 3);
        let c0 = assemble_confounders(&x, &zero, &v, &qx, &w, &c_perp).unwrap();
        let expect = &v * &qx * w.clone().try_inverse().unwrap() * &c_perp;
        assert!((c0 - expect).amax() < 1e-10);
        let omega = gauss(&mut rng, 2, 3);
        let ident = DMatrix::<f64>::identity(n, n);
        let ci = assemble_confounders(&x, &omega, &ident, &qx, &DMatrix::identity(n - 2, n - 2), &c_perp).unwrap();
        assert!((ci - (&x * &omega + &qx * &c_perp)).amax() < 1e-10);
        let c = assemble_confounders(&x, &omega, &v, &qx, &w, &c_perp).unwrap();
        assert!((qx.transpose() * c - &c_perp).amax() < 1e-8);
    }

    #[test]
    fn singular_correction_reported() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let y1 = gauss(&mut rng, 10, 1);
        let l = gauss(&mut rng, 10, 2) * 0.01;
        let c = gauss(&mut rng, 5, 2);
        let r = omega_bias_corrected(&y1, &l, &c, &DMatrix::identity(5, 5), 1.0, 10);
        assert!(matches!(r, Err(Error::BiasCorrectionSingular { .. })));
    }
}
