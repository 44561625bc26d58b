//! Alternating whitened eigendecomposition and constrained REML, warm started
//! across the factor dimension.

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};
use crate::linalg;
use crate::linmodel::{CovarianceBasis, Polytope};
use crate::variance_reml::{reml_second_moment, SecondMoment, VarianceEstimate};

/// Relative tolerance for declaring two eigenvalues tied at the cut.
pub const TIE_TOL: f64 = 1e-12;

#[derive(Clone, Debug)]
pub struct FactorFit {
    pub k: usize,
    /// `m × k`, scaled so that `C' W^{-1} C = m I`.
    pub c_perp: DMatrix<f64>,
    pub eigenvalues: DVector<f64>,
    pub variance: VarianceEstimate,
    /// Final `tau` of the previous rank, used to seed this one.
    pub warm_start_tau: DVector<f64>,
    /// Factors that were held fixed while the variance was estimated.
    pub reml_factors: DMatrix<f64>,
}

impl FactorFit {
    pub fn w(&self) -> &DMatrix<f64> {
        &self.variance.w
    }
}

/// Default largest rank: `min(m - 1, floor(m / 2), 30)`.
pub fn default_k_max(m: usize) -> usize {
    (m.saturating_sub(1)).min(m / 2).min(30)
}

/// Top-`k` eigenvectors of `W^{-1/2} S W^{-1/2}` mapped back through
/// `m^{1/2} W^{1/2}`, with the matching eigenvalues.
pub fn subspace_step_moment(s: &DMatrix<f64>, w_hat: &DMatrix<f64>, k: usize) -> Result<(DMatrix<f64>, DVector<f64>)> {
    let m = s.nrows();
    if w_hat.shape() != (m, m) {
        return Err(Error::DimensionMismatch(format!(
            "W is {:?}, second moment is {m} x {m}",
            w_hat.shape()
        )));
    }
    if k >= m {
        return Err(Error::InvalidInput(format!("k = {k} must be below m = {m}")));
    }
    if k == 0 {
        return Ok((DMatrix::zeros(m, 0), DVector::zeros(0)));
    }
    let (wev, wvec) = linalg::sym_eigen_desc(w_hat);
    let wmin = wev.min();
    if !(wmin > 0.0) {
        return Err(Error::SingularWeight(wmin));
    }
    let w_half = &wvec * DMatrix::from_diagonal(&wev.map(f64::sqrt)) * wvec.transpose();
    let w_inv_half = &wvec * DMatrix::from_diagonal(&wev.map(|v| 1.0 / v.sqrt())) * wvec.transpose();
    let whitened = linalg::symmetrize(&(&w_inv_half * s * &w_inv_half));
    let (vals, vecs) = linalg::sym_eigen_desc(&whitened);
    let (lk, lnext) = (vals[k - 1], vals[k]);
    if (lk - lnext).abs() <= TIE_TOL * lk.abs().max(lnext.abs()) {
        return Err(Error::DegenerateSpectrum {
            k,
            lambda_k: lk,
            lambda_next: lnext,
        });
    }
    let mut c = w_half * vecs.columns(0, k) * (m as f64).sqrt();
    linalg::fix_signs(&mut c);
    Ok((c, vals.rows(0, k).into_owned()))
}

/// Subspace step from the data matrix `Y2` (features by `m`).
pub fn subspace_step(y2: &DMatrix<f64>, w_hat: &DMatrix<f64>, k: usize) -> Result<(DMatrix<f64>, DVector<f64>)> {
    subspace_step_moment(&SecondMoment::from_data(y2).s, w_hat, k)
}

/// Fits for every rank `0..=k_max` from a cached second moment. `basis` is in
/// the `Qx` frame.
pub fn run_icase_moment(
    moment: &SecondMoment,
    basis: &CovarianceBasis,
    poly: &Polytope,
    k_max: usize,
) -> Result<Vec<FactorFit>> {
    let m = moment.s.nrows();
    if k_max >= m {
        return Err(Error::InvalidInput(format!("K_max = {k_max} must be below m = {m}")));
    }
    let empty = DMatrix::zeros(m, 0);
    let v0 = reml_second_moment(moment, &empty, basis, poly, None).map_err(|e| e.context("k 0"))?;
    let mut fits = Vec::with_capacity(k_max + 1);
    fits.push(FactorFit {
        k: 0,
        c_perp: empty.clone(),
        eigenvalues: DVector::zeros(0),
        warm_start_tau: v0.tau.clone(),
        variance: v0,
        reml_factors: empty,
    });
    for k in 1..=k_max {
        let prev = fits.last().expect("fit for previous rank");
        let step = || -> Result<FactorFit> {
            let (c1, _) = subspace_step_moment(&moment.s, prev.w(), k)?;
            let variance = reml_second_moment(moment, &c1, basis, poly, Some(&prev.variance.theta()))?;
            let (c2, eig) = subspace_step_moment(&moment.s, &variance.w, k)?;
            Ok(FactorFit {
                k,
                c_perp: c2,
                eigenvalues: eig,
                warm_start_tau: prev.variance.tau.clone(),
                variance,
                reml_factors: c1,
            })
        };
        let fit = step().map_err(|e| e.context(format!("k {k}")))?;
        log::debug!(
            "icase k={k} delta2={:.6e} reml_iterations={}",
            fit.variance.delta2,
            fit.variance.diagnostics.iterations
        );
        fits.push(fit);
    }
    Ok(fits)
}

pub fn run_icase(y2: &DMatrix<f64>, basis: &CovarianceBasis, poly: &Polytope, k_max: usize) -> Result<Vec<FactorFit>> {
    run_icase_moment(&SecondMoment::from_data(y2), basis, poly, k_max)
}

/// Per-rank diagnostic table.
pub fn diagnostics_tsv(fits: &[FactorFit]) -> String {
    let b = fits.first().map_or(0, |f| f.variance.tau.len());
    let mut out = String::from("k\tdelta2");
    for j in 1..=b {
        out.push_str(&format!("\ttau_{j}"));
    }
    out.push_str("\tlambda_k\treml_iterations\tgradient_norm\tobjective\tboundary\n");
    for f in fits {
        out.push_str(&format!("{}\t{:.16e}", f.k, f.variance.delta2));
        for t in f.variance.tau.iter() {
            out.push_str(&format!("\t{t:.16e}"));
        }
        let lk = if f.k == 0 { f64::NAN } else { f.eigenvalues[f.k - 1] };
        let d = &f.variance.diagnostics;
        out.push_str(&format!(
            "\t{lk:.16e}\t{}\t{:.16e}\t{:.16e}\t{}\n",
            d.iterations, d.gradient_norm, d.objective, d.boundary
        ));
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::linmodel::BasisTerm;
    use crate::variance_reml::working_objective;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    use rand_distr::StandardNormal;

    fn gauss(rng: &mut ChaCha8Rng, r: usize, c: usize) -> DMatrix<f64> {
        DMatrix::from_fn(r, c, |_, _| rng.sample(StandardNormal))
    }

    fn sin_angle(a: &DMatrix<f64>, b: &DMatrix<f64>) -> f64 {
        let qa = linalg::orthonormalize(a, "a").unwrap();
        let qb = linalg::orthonormalize(b, "b").unwrap();
        let r = &qb - &qa * (qa.transpose() * &qb);
        r.singular_values().max().min(1.0).asin()
    }

    fn block_basis(m: usize) -> CovarianceBasis {
        let labels = (0..m).map(|i| format!("b{}", i / 3)).collect();
        CovarianceBasis::new(m, vec![BasisTerm::Identity, BasisTerm::BlockPartition { labels }]).unwrap()
    }

    #[test]
    fn rank_zero_is_empty() {
        let s = DMatrix::<f64>::identity(4, 4);
        let (c, e) = subspace_step_moment(&s, &DMatrix::identity(4, 4), 0).unwrap();
        assert_eq!(c.shape(), (4, 0));
        assert_eq!(e.len(), 0);
    }

    #[test]
    fn exact_low_rank_recovered() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let c = gauss(&mut rng, 8, 2);
        let l = gauss(&mut rng, 50, 2);
        let y2 = &l * c.transpose();
        let (ch, ev) = subspace_step(&y2, &DMatrix::identity(8, 8), 2).unwrap();
        assert!(sin_angle(&ch, &c) < 1e-8);
        assert!(ev[0] > ev[1]);
        let gram = ch.transpose() * &ch;
        assert!((gram - DMatrix::<f64>::identity(2, 2) * 8.0).amax() < 1e-8);
    }

    #[test]
    fn tie_at_cut_is_rejected() {
        let s = DMatrix::<f64>::identity(5, 5);
        let r = subspace_step_moment(&s, &DMatrix::identity(5, 5), 2);
        assert!(matches!(r, Err(Error::DegenerateSpectrum { k: 2, .. })));
    }

    #[test]
    fn whitening_beats_plain_eigenvectors() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let m = 9;
        let basis = block_basis(m);
        let w = basis.build_covariance(&DVector::from_vec(vec![0.2, 0.8])).unwrap();
        let chol = w.clone().cholesky().unwrap().l();
        let (mut whitened_total, mut plain_total) = (0.0, 0.0);
        for _ in 0..10 {
            let c = gauss(&mut rng, m, 2);
            let l = gauss(&mut rng, 400, 2) * 0.25;
            let y2 = &l * c.transpose() + gauss(&mut rng, 400, m) * chol.transpose();
            let s = SecondMoment::from_data(&y2).s;
            let (ch, ev) = subspace_step_moment(&s, &w, 2).unwrap();
            // dense oracle: eigendecomposition of the whitened matrix
            let wi = w.clone().cholesky().unwrap().inverse();
            let w_inv_half = linalg::sym_sqrt(&wi);
            let eig = nalgebra::SymmetricEigen::new(linalg::symmetrize(&(&w_inv_half * &s * &w_inv_half)));
            let mut order: Vec<usize> = (0..m).collect();
            order.sort_by(|&a, &b| eig.eigenvalues[b].partial_cmp(&eig.eigenvalues[a]).unwrap());
            let top = DMatrix::from_fn(m, 2, |i, j| eig.eigenvectors[(i, order[j])]);
            let oracle = linalg::sym_sqrt(&w) * top;
            assert!(sin_angle(&ch, &oracle) < 1e-8);
            assert!((ev[0] - eig.eigenvalues[order[0]]).abs() < 1e-10 * ev[0]);
            let (plain, _) = subspace_step_moment(&s, &DMatrix::identity(m, m), 2).unwrap();
            whitened_total += sin_angle(&ch, &c);
            plain_total += sin_angle(&plain, &c);
        }
        assert!(whitened_total < plain_total, "{whitened_total} vs {plain_total}");
    }

    #[test]
    fn pure_noise_stays_below_edge() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let (p, m) = (2000, 12);
        let y2 = gauss(&mut rng, p, m) * 1.3;
        let basis = CovarianceBasis::new(m, vec![BasisTerm::Identity]).unwrap();
        let fits = run_icase(&y2, &basis, &Polytope::nonnegative(1), 3).unwrap();
        let ms = y2.norm_squared() / (p * m) as f64;
        assert!((fits[0].variance.delta2 - ms).abs() < 1e-10 * ms);
        let edge = (1.0 + (m as f64 / p as f64).sqrt()).powi(2) * 1.2;
        for f in &fits[1..] {
            // eigenvalues are on the whitened scale, relative to delta2
            for &l in f.eigenvalues.iter() {
                assert!(l < edge * f.variance.delta2, "{l}");
            }
        }
    }

    #[test]
    fn noiseless_rank_three() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let m = 12;
        let c = gauss(&mut rng, m, 3);
        let l = gauss(&mut rng, 300, 3);
        let y2 = &l * c.transpose() + gauss(&mut rng, 300, m) * 1e-8;
        let basis = block_basis(m);
        let poly = Polytope::nonnegative(2).with_bounds(f64::INFINITY, 0.0);
        let fits = run_icase(&y2, &basis, &poly, 5).unwrap();
        assert!(sin_angle(&fits[3].c_perp, &c) < 1e-6);
        for f in &fits[4..] {
            assert!(sin_angle(&c, &f.c_perp.columns(0, 3).into_owned()) < 1e-6);
        }
        for f in &fits {
            let wi = f.w().clone().cholesky().unwrap().inverse();
            let g = f.c_perp.transpose() * wi * &f.c_perp;
            assert!((g - DMatrix::<f64>::identity(f.k, f.k) * m as f64).amax() < 1e-6 * m as f64);
        }
    }

    #[test]
    fn warm_start_chain_ascends() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let m = 9;
        let basis = block_basis(m);
        let w = basis.build_covariance(&DVector::from_vec(vec![0.5, 0.5])).unwrap();
        let chol = w.cholesky().unwrap().l();
        let c = gauss(&mut rng, m, 2);
        let y2 = gauss(&mut rng, 500, 2) * c.transpose() + gauss(&mut rng, 500, m) * chol.transpose();
        let moment = SecondMoment::from_data(&y2);
        let poly = Polytope::nonnegative(2);
        let fits = run_icase_moment(&moment, &basis, &poly, 4).unwrap();
        for k in 1..fits.len() {
            let here = working_objective(&moment, &fits[k].reml_factors, &basis, &fits[k].variance.theta()).unwrap();
            let before =
                working_objective(&moment, &fits[k].reml_factors, &basis, &fits[k - 1].variance.theta()).unwrap();
            assert!(here >= before - 1e-12, "k={k}: {here} < {before}");
            assert_eq!(fits[k].warm_start_tau, fits[k - 1].variance.tau);
        }
    }

    #[test]
    fn rotation_equivariance() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let m = 9;
        let basis = block_basis(m);
        let c = gauss(&mut rng, m, 2);
        let y2 = gauss(&mut rng, 300, 2) * c.transpose() + gauss(&mut rng, 300, m);
        let r = linalg::orthonormalize(&gauss(&mut rng, m, m), "R").unwrap();
        let rotated_basis = basis.rotate(&r).unwrap();
        let poly = Polytope::nonnegative(2);
        let a = run_icase(&y2, &basis, &poly, 2).unwrap();
        let b = run_icase(&(&y2 * &r), &rotated_basis, &poly, 2).unwrap();
        assert!(sin_angle(&b[2].c_perp, &(r.transpose() * &a[2].c_perp)) < 1e-8);
    }

    #[test]
    fn diagnostics_have_one_row_per_rank() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let y2 = gauss(&mut rng, 100, 6);
        let basis = CovarianceBasis::new(6, vec![BasisTerm::Identity]).unwrap();
        let fits = run_icase(&y2, &basis, &Polytope::nonnegative(1), 2).unwrap();
        let t = diagnostics_tsv(&fits);
        assert_eq!(t.lines().count(), 4);
        assert!(t.starts_with("k\tdelta2\ttau_1\t"));
    }
}
