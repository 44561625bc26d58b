//! Comparator estimators and evaluation metrics.

use std::collections::BTreeMap;

use nalgebra::{DMatrix, DVector};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::icase::TIE_TOL;
use crate::linalg;

pub const DEFAULT_PERMUTATIONS: usize = 99;
pub const DEFAULT_QUANTILE: f64 = 0.95;
pub const DEFAULT_Q_THRESHOLD: f64 = 0.2;

/// Top-`k` right singular vectors of `y2` (features by samples).
pub fn svd_baseline(y2: &DMatrix<f64>, k: usize) -> Result<DMatrix<f64>> {
    let (p, m) = y2.shape();
    if k >= p.min(m) {
        return Err(Error::InvalidInput(format!("k = {k} must be below min(p, m) = {}", p.min(m))));
    }
    let gram = linalg::symmetrize(&(y2.transpose() * y2));
    let (vals, vecs) = linalg::sym_eigen_desc(&gram);
    if k > 0 {
        let (a, b) = (vals[k - 1], vals[k]);
        if (a - b).abs() <= TIE_TOL * a.abs().max(1e-300) {
            return Err(Error::DegenerateSpectrum { k, lambda_k: a, lambda_next: b });
        }
    }
    Ok(vecs.columns(0, k).into_owned())
}

fn singular_values_sq(y: &DMatrix<f64>) -> DVector<f64> {
    let (p, m) = y.shape();
    let gram = if p >= m { y.transpose() * y } else { y * y.transpose() };
    linalg::sym_eigenvalues_desc(&linalg::symmetrize(&gram))
}

/// Type-7 sample quantile.
pub fn quantile(values: &mut [f64], q: f64) -> f64 {
    values.sort_by(f64::total_cmp);
    let h = (values.len() - 1) as f64 * q;
    let lo = h.floor() as usize;
    let hi = h.ceil() as usize;
    values[lo] + (h - lo as f64) * (values[hi] - values[lo])
}

fn row_seed(seed: u64, perm: usize, row: usize) -> u64 {
    let mut z = seed ^ (perm as u64).wrapping_mul(0x9e37_79b9_7f4a_7c15) ^ (row as u64).wrapping_mul(0xc2b2_ae3d_27d4_eb4f);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Parallel analysis: permute each row independently, and count the leading
/// observed singular values that exceed the `quantile` of the null singular
/// values at the same index.
pub fn parallel_analysis(y2: &DMatrix<f64>, n_perm: usize, quantile_level: f64, seed: u64) -> Result<usize> {
    if n_perm < 19 {
        return Err(Error::InvalidInput("parallel analysis needs at least 19 permutations".into()));
    }
    if !(0.0..1.0).contains(&quantile_level) {
        return Err(Error::InvalidInput("quantile must lie in [0, 1)".into()));
    }
    let observed = singular_values_sq(y2);
    let (p, m) = y2.shape();
    let null: Vec<DVector<f64>> = (0..n_perm)
        .into_par_iter()
        .map(|b| {
            let mut yp = y2.clone();
            for g in 0..p {
                let mut rng = ChaCha8Rng::seed_from_u64(row_seed(seed, b, g));
                let mut row: Vec<f64> = y2.row(g).iter().copied().collect();
                row.shuffle(&mut rng);
                for (i, v) in row.into_iter().enumerate() {
                    yp[(g, i)] = v;
                }
            }
            singular_values_sq(&yp)
        })
        .collect();
    let mut k = 0;
    for i in 0..observed.len().min(m) {
        let mut at: Vec<f64> = null.iter().map(|s| s[i]).collect();
        if observed[i] > quantile(&mut at, quantile_level) {
            k += 1;
        } else {
            break;
        }
    }
    Ok(k)
}

/// Largest principal angle between the column spaces of `a` and `b`.
pub fn subspace_angle(a: &DMatrix<f64>, b: &DMatrix<f64>) -> Result<f64> {
    if a.nrows() != b.nrows() {
        return Err(Error::DimensionMismatch(format!("{} vs {} rows", a.nrows(), b.nrows())));
    }
    let check = |m: &DMatrix<f64>, what: &str| -> Result<DMatrix<f64>> {
        if m.ncols() == 0 || linalg::numerical_rank(m) < m.ncols() {
            return Err(Error::RankDeficient(what.into()));
        }
        linalg::orthonormalize(m, what)
    };
    let mut qa = check(a, "A")?;
    let mut qb = check(b, "B")?;
    if qa.ncols() > qb.ncols() {
        std::mem::swap(&mut qa, &mut qb);
    }
    // sine of the largest angle: the component of span(qa) outside span(qb)
    let resid = &qa - &qb * (qb.transpose() * &qa);
    let sines = resid.singular_values();
    let sin = sines.max().min(1.0);
    let cosines = (qb.transpose() * &qa).singular_values();
    let cos = cosines.min().clamp(0.0, 1.0);
    Ok(sin.atan2(cos))
}

/// False discovery and true recovery proportions at `q ≤ threshold`.
pub fn fdp_trp(q: &[f64], truth_nonnull: &[bool], threshold: f64) -> Result<(f64, f64)> {
    if q.len() != truth_nonnull.len() {
        return Err(Error::DimensionMismatch(format!("{} q-values, {} labels", q.len(), truth_nonnull.len())));
    }
    let mut disc = 0usize;
    let mut false_disc = 0usize;
    let mut true_disc = 0usize;
    for (q, t) in q.iter().zip(truth_nonnull) {
        if *q <= threshold {
            disc += 1;
            if *t {
                true_disc += 1;
            } else {
                false_disc += 1;
            }
        }
    }
    let nonnull = truth_nonnull.iter().filter(|t| **t).count();
    let fdp = false_disc as f64 / disc.max(1) as f64;
    let trp = if nonnull == 0 { 0.0 } else { true_disc as f64 / nonnull as f64 };
    Ok((fdp, trp))
}

#[derive(Clone, Debug, Default, Serialize, Deserialize)]
pub struct EvalSummary {
    pub angle_rad: Option<f64>,
    pub fdp: Option<f64>,
    pub trp: Option<f64>,
    pub k_estimates: BTreeMap<String, usize>,
}
