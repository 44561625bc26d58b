use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};
use crate::linalg;

use super::basis::CovarianceBasis;

/// The `p × n` response matrix, features in rows and samples in columns.
#[derive(Clone, Debug, PartialEq)]
pub struct FeatureMatrix {
    pub values: DMatrix<f64>,
    pub feature_ids: Vec<String>,
    pub sample_ids: Vec<String>,
}

impl FeatureMatrix {
    pub fn new(values: DMatrix<f64>, feature_ids: Vec<String>, sample_ids: Vec<String>) -> Result<Self> {
        let (p, n) = values.shape();
        if p < 1 || n < 2 {
            return Err(Error::InvalidInput(format!("need p >= 1 and n >= 2, got {p} x {n}")));
        }
        if feature_ids.len() != p || sample_ids.len() != n {
            return Err(Error::DimensionMismatch(format!(
                "{p} x {n} values with {} feature ids and {} sample ids",
                feature_ids.len(),
                sample_ids.len()
            )));
        }
        if let Some(pos) = values.iter().position(|v| !v.is_finite()) {
            return Err(Error::InvalidInput(format!(
                "non-finite value at feature {}, sample {}",
                pos % p,
                pos / p
            )));
        }
        Ok(Self {
            values,
            feature_ids,
            sample_ids,
        })
    }

    /// Wrap a matrix with generated ids `g1..gp` and `s1..sn`.
    pub fn from_matrix(values: DMatrix<f64>) -> Result<Self> {
        let (p, n) = values.shape();
        Self::new(
            values,
            (1..=p).map(|i| format!("g{i}")).collect(),
            (1..=n).map(|i| format!("s{i}")).collect(),
        )
    }

    pub fn p(&self) -> usize {
        self.values.nrows()
    }

    pub fn n(&self) -> usize {
        self.values.ncols()
    }
}

/// Covariates of interest `X` and optional nuisance covariates `Z`.
#[derive(Clone, Debug, PartialEq)]
pub struct DesignMatrices {
    pub x: DMatrix<f64>,
    pub z: Option<DMatrix<f64>>,
}

impl DesignMatrices {
    pub fn new(x: DMatrix<f64>, z: Option<DMatrix<f64>>) -> Result<Self> {
        check_full_rank(&x, "X")?;
        if let Some(z) = &z {
            if z.nrows() != x.nrows() {
                return Err(Error::DimensionMismatch(format!(
                    "X has {} rows, Z has {}",
                    x.nrows(),
                    z.nrows()
                )));
            }
            check_full_rank(&joint(&x, Some(z)), "[X Z]")?;
        }
        Ok(Self { x, z })
    }

    pub fn n(&self) -> usize {
        self.x.nrows()
    }

    pub fn d(&self) -> usize {
        self.x.ncols()
    }

    pub fn r(&self) -> usize {
        self.z.as_ref().map_or(0, |z| z.ncols())
    }
}

fn joint(x: &DMatrix<f64>, z: Option<&DMatrix<f64>>) -> DMatrix<f64> {
    match z {
        None => x.clone(),
        Some(z) => {
            let mut m = DMatrix::zeros(x.nrows(), x.ncols() + z.ncols());
            m.columns_mut(0, x.ncols()).copy_from(x);
            m.columns_mut(x.ncols(), z.ncols()).copy_from(z);
            m
        }
    }
}

/// Full column rank with smallest singular value of `n^{-1/2} M` above `1e-10`.
pub(crate) fn check_full_rank(m: &DMatrix<f64>, what: &str) -> Result<()> {
    if m.ncols() == 0 {
        return Ok(());
    }
    if m.ncols() >= m.nrows() {
        return Err(Error::RankDeficientDesign(format!(
            "{what} has {} columns but only {} rows",
            m.ncols(),
            m.nrows()
        )));
    }
    let sv = (m / (m.nrows() as f64).sqrt()).singular_values();
    let smin = sv.min();
    if !(smin > 1e-10) {
        return Err(Error::RankDeficientDesign(format!(
            "{what} smallest scaled singular value {smin:e}"
        )));
    }
    Ok(())
}

/// Data, design and basis after rotating out the nuisance covariates.
#[derive(Clone, Debug)]
pub struct Residualized {
    /// `Y Q_Z`, `p × (n − r)`.
    pub y: DMatrix<f64>,
    /// `Q_Z' X`.
    pub x: DMatrix<f64>,
    pub basis: CovarianceBasis,
    /// `None` when there were no nuisance covariates.
    pub q_z: Option<DMatrix<f64>>,
}

pub fn residualize_nuisance(
    y: &DMatrix<f64>,
    design: &DesignMatrices,
    basis: &CovarianceBasis,
) -> Result<Residualized> {
    let n = design.n();
    if y.ncols() != n || basis.n != n {
        return Err(Error::DimensionMismatch(format!(
            "Y has {} samples, design {n}, basis {}",
            y.ncols(),
            basis.n
        )));
    }
    match &design.z {
        None => Ok(Residualized {
            y: y.clone(),
            x: design.x.clone(),
            basis: basis.clone(),
            q_z: None,
        }),
        Some(z) => {
            check_full_rank(&joint(&design.x, Some(z)), "[X Z]")?;
            let q_z = linalg::null_basis(z)?;
            Ok(Residualized {
                y: y * &q_z,
                x: q_z.transpose() * &design.x,
                basis: basis.rotate(&q_z)?,
                q_z: Some(q_z),
            })
        }
    }
}

/// `y1` holds the weighted regression coefficients on `X`, `y2` the rotation
/// of each feature onto the orthogonal complement of `X`.
#[derive(Clone, Debug)]
pub struct SplitData {
    pub y1: DMatrix<f64>,
    pub y2: DMatrix<f64>,
    pub qx: DMatrix<f64>,
    pub g: DMatrix<f64>,
}

pub fn split_data(y: &DMatrix<f64>, x: &DMatrix<f64>, g: &DMatrix<f64>) -> Result<SplitData> {
    let n = x.nrows();
    if y.ncols() != n || g.shape() != (n, n) {
        return Err(Error::DimensionMismatch(format!(
            "Y has {} columns, X has {n} rows, G is {:?}",
            y.ncols(),
            g.shape()
        )));
    }
    let gmin = linalg::sym_eigenvalues_desc(g).min();
    if !(gmin > 1e-10) {
        return Err(Error::SingularWeight(gmin));
    }
    let d = x.ncols();
    if d == 0 {
        return Ok(SplitData {
            y1: DMatrix::zeros(y.nrows(), 0),
            y2: y.clone(),
            qx: DMatrix::identity(n, n),
            g: g.clone(),
        });
    }
    let chol = linalg::cholesky(g, "G")?;
    let ginv_x = chol.solve(x);
    let xtgx = x.transpose() * &ginv_x;
    let xtgx_inv = linalg::spd_inverse(&xtgx, "X'G^{-1}X")?;
    let y1 = y * ginv_x * xtgx_inv;
    let qx = linalg::null_basis(x)?;
    let y2 = y * &qx;
    Ok(SplitData {
        y1,
        y2,
        qx,
        g: g.clone(),
    })
}

/// `V = Σ_j tau_j B_j`.
pub fn build_covariance(tau: &DVector<f64>, basis: &CovarianceBasis) -> Result<DMatrix<f64>> {
    basis.build_covariance(tau)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::linmodel::basis::BasisTerm;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn rand_mat(rng: &mut ChaCha8Rng, r: usize, c: usize) -> DMatrix<f64> {
        DMatrix::from_fn(r, c, |_, _| rng.random_range(-1.0..1.0))
    }

    #[test]
    fn feature_matrix_rejects_nan() {
        let mut m = DMatrix::zeros(2, 3);
        m[(1, 2)] = f64::NAN;
        assert!(FeatureMatrix::from_matrix(m).is_err());
    }

    #[test]
    fn no_nuisance_passthrough() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let y = rand_mat(&mut rng, 5, 6);
        let design = DesignMatrices::new(rand_mat(&mut rng, 6, 1), None).unwrap();
        let basis = CovarianceBasis::new(6, vec![BasisTerm::Identity]).unwrap();
        let r = residualize_nuisance(&y, &design, &basis).unwrap();
        assert_eq!(r.y, y);
        assert_eq!(r.x, design.x);
        assert_eq!(r.basis, basis);
    }

    #[test]
    fn intercept_removes_constant_row() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let mut y = rand_mat(&mut rng, 3, 6);
        y.row_mut(1).fill(4.2);
        let design = DesignMatrices::new(rand_mat(&mut rng, 6, 1), Some(DMatrix::from_element(6, 1, 1.0))).unwrap();
        let basis = CovarianceBasis::new(6, vec![BasisTerm::Identity]).unwrap();
        let r = residualize_nuisance(&y, &design, &basis).unwrap();
        assert_eq!(r.y.ncols(), 5);
        assert!(r.y.row(1).amax() < 1e-12);
    }

    #[test]
    fn tissue_indicators_match_dense_projection() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let y = rand_mat(&mut rng, 4, 6);
        let z = DMatrix::from_fn(6, 2, |i, j| f64::from(i % 2 == j));
        let x = rand_mat(&mut rng, 6, 1);
        let small = DMatrix::from_row_slice(2, 2, &[1.0, 0.3, 0.3, 1.0]);
        let basis = CovarianceBasis::new(
            6,
            vec![BasisTerm::Identity, BasisTerm::Kronecker { blocks: 3, small }],
        )
        .unwrap();
        let design = DesignMatrices::new(x.clone(), Some(z.clone())).unwrap();
        let r = residualize_nuisance(&y, &design, &basis).unwrap();
        // oracle: residual projector I - Z(Z'Z)^{-1}Z' equals Q Q'
        let ztz = z.transpose() * &z;
        let pz = &z * ztz.try_inverse().unwrap() * z.transpose();
        let resid = DMatrix::<f64>::identity(6, 6) - pz;
        let q = r.q_z.as_ref().unwrap();
        assert!((q * q.transpose() - &resid).amax() < 1e-12);
        assert!((&r.y * q.transpose() - &y * &resid).amax() < 1e-12);
        assert!((q * &r.x - &resid * &x).amax() < 1e-12);
        for j in 0..2 {
            let bj = basis.materialize(j);
            let rotated = r.basis.materialize(j);
            assert!((q * rotated * q.transpose() - &resid * bj * &resid).amax() < 1e-12);
        }
    }

    #[test]
    fn collinear_nuisance_rejected() {
        let x = DMatrix::from_fn(6, 1, |i, _| i as f64);
        let z = DMatrix::from_fn(6, 1, |i, _| 2.0 * i as f64);
        assert!(matches!(
            DesignMatrices::new(x, Some(z)),
            Err(Error::RankDeficientDesign(_))
        ));
    }

    #[test]
    fn split_identity_weight_orthonormal_x() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let x = linalg::orthonormalize(&rand_mat(&mut rng, 6, 2), "X").unwrap();
        let y = rand_mat(&mut rng, 5, 6);
        let s = split_data(&y, &x, &DMatrix::identity(6, 6)).unwrap();
        assert!((&s.y1 - &y * &x).amax() < 1e-12);
        assert!((s.qx.transpose() * &x).amax() < 1e-10);
        assert!((s.qx.transpose() * &s.qx - DMatrix::<f64>::identity(4, 4)).amax() < 1e-10);
    }

    #[test]
    fn split_exact_fit() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let x = rand_mat(&mut rng, 7, 2);
        let b = rand_mat(&mut rng, 4, 2);
        let y = &b * x.transpose();
        let g = DMatrix::from_diagonal(&DVector::from_vec(vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0, 7.0]));
        let s = split_data(&y, &x, &g).unwrap();
        assert!((&s.y1 - &b).amax() < 1e-10);
        assert!(s.y2.amax() < 1e-10);
    }

    #[test]
    fn split_weighted_least_squares() {
        let x = DMatrix::from_row_slice(4, 2, &[1.0, 0.0, 1.0, 1.0, 1.0, 2.0, 1.0, 3.0]);
        let y = DMatrix::from_row_slice(1, 4, &[1.0, 3.0, 2.0, 5.0]);
        let w = [1.0, 2.0, 3.0, 4.0];
        let g = DMatrix::from_diagonal(&DVector::from_vec(w.to_vec()));
        let s = split_data(&y, &x, &g).unwrap();
        // normal equations with weights 1/g_i, solved by Cramer's rule
        let (mut a11, mut a12, mut a22, mut b1, mut b2) = (0.0, 0.0, 0.0, 0.0, 0.0);
        for i in 0..4 {
            let wi = 1.0 / w[i];
            let (x1, x2, yi) = (x[(i, 0)], x[(i, 1)], y[(0, i)]);
            a11 += wi * x1 * x1;
            a12 += wi * x1 * x2;
            a22 += wi * x2 * x2;
            b1 += wi * x1 * yi;
            b2 += wi * x2 * yi;
        }
        let det = a11 * a22 - a12 * a12;
        let c0 = (a22 * b1 - a12 * b2) / det;
        let c1 = (a11 * b2 - a12 * b1) / det;
        assert!((s.y1[(0, 0)] - c0).abs() < 1e-12);
        assert!((s.y1[(0, 1)] - c1).abs() < 1e-12);
    }

    #[test]
    fn singular_weight_rejected() {
        let x = DMatrix::from_element(3, 1, 1.0);
        let y = DMatrix::zeros(2, 3);
        let g = DMatrix::from_diagonal(&DVector::from_vec(vec![1.0, 0.0, 1.0]));
        assert!(matches!(split_data(&y, &x, &g), Err(Error::SingularWeight(_))));
    }

    #[test]
    fn confounder_identity_holds() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        for _ in 0..5 {
            let x = rand_mat(&mut rng, 8, 2);
            let a = rand_mat(&mut rng, 8, 8);
            let g = &a * a.transpose() + DMatrix::<f64>::identity(8, 8);
            let qx = linalg::null_basis(&x).unwrap();
            let omega = rand_mat(&mut rng, 2, 3);
            let c_perp = rand_mat(&mut rng, 6, 3);
            let w = qx.transpose() * &g * &qx;
            let c = &x * &omega + &g * &qx * w.try_inverse().unwrap() * &c_perp;
            assert!((qx.transpose() * c - c_perp).amax() < 1e-8);
        }
    }

    #[test]
    fn nuisance_then_split_matches_joint_split() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let x = rand_mat(&mut rng, 9, 1);
        let z = rand_mat(&mut rng, 9, 2);
        let y = rand_mat(&mut rng, 4, 9);
        let basis = CovarianceBasis::new(9, vec![BasisTerm::Identity]).unwrap();
        let design = DesignMatrices::new(x.clone(), Some(z.clone())).unwrap();
        let r = residualize_nuisance(&y, &design, &basis).unwrap();
        let s = split_data(&r.y, &r.x, &DMatrix::identity(7, 7)).unwrap();
        let full = split_data(&y, &joint(&x, Some(&z)), &DMatrix::identity(9, 9)).unwrap();
        // residual column spaces in the original frame coincide
        let ours = r.q_z.as_ref().unwrap() * &s.qx;
        let resid = &full.qx - &ours * (ours.transpose() * &full.qx);
        let sin_max = resid.singular_values().max();
        assert!(sin_max.asin() < 1e-8);
    }

    #[test]
    fn covariance_linear_in_tau() {
        let basis = CovarianceBasis::new(
            3,
            vec![
                BasisTerm::Identity,
                BasisTerm::Dense {
                    matrix: DMatrix::from_element(3, 3, 1.0),
                },
            ],
        )
        .unwrap();
        let t1 = DVector::from_vec(vec![0.3, 1.7]);
        let t2 = DVector::from_vec(vec![-2.0, 0.5]);
        let a = 3.5;
        let lhs = build_covariance(&(&t1 * a + &t2), &basis).unwrap();
        let rhs = build_covariance(&t1, &basis).unwrap() * a + build_covariance(&t2, &basis).unwrap();
        assert!((lhs - rhs).amax() < 1e-14);
    }
}
