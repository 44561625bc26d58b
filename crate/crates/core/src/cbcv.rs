//! Cross-validation over feature folds for choosing the number of factors.

use nalgebra::{DMatrix, DVector};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::Serialize;

use crate::error::{Error, Result};
use crate::icase::run_icase_moment;
use crate::linalg;
use crate::linmodel::{CovarianceBasis, Polytope};
use crate::variance_reml::{SecondMoment, VarianceEstimate};

pub const DEFAULT_FOLDS: usize = 5;
pub const DEFAULT_ETA: f64 = 1.0;

#[derive(Clone, Debug, PartialEq, Eq, Serialize)]
pub struct FoldAssignment {
    pub fold_of: Vec<usize>,
    pub folds: usize,
    pub seed: u64,
}

impl FoldAssignment {
    pub fn members(&self, f: usize) -> Vec<usize> {
        (0..self.fold_of.len()).filter(|&g| self.fold_of[g] == f).collect()
    }

    pub fn sizes(&self) -> Vec<usize> {
        let mut s = vec![0; self.folds];
        for &f in &self.fold_of {
            s[f] += 1;
        }
        s
    }
}

/// Seeded uniform partition of `p` features into `folds` groups whose sizes
/// differ by at most one.
pub fn partition_folds(p: usize, folds: usize, seed: u64) -> Result<FoldAssignment> {
    if folds < 2 || folds > p {
        return Err(Error::InvalidInput(format!("need 2 <= F <= p, got F = {folds}, p = {p}")));
    }
    let mut order: Vec<usize> = (0..p).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let mut fold_of = vec![0; p];
    for (pos, &g) in order.iter().enumerate() {
        fold_of[g] = pos % folds;
    }
    Ok(FoldAssignment { fold_of, folds, seed })
}

fn guard_threshold(n: usize, p: usize, eta: f64) -> f64 {
    let m_n = (n as f64).min(p as f64 / n as f64);
    1.0 - eta * m_n.ln() / m_n
}

/// Leave-one-out loss from the whitened fold Gram `Ȳ'Ȳ`. `p` is the total
/// number of features, used by the leverage guard.
pub fn loo_loss_gram(sbar: &DMatrix<f64>, cbar: &DMatrix<f64>, eta: f64, p: usize) -> Result<f64> {
    let n = sbar.nrows();
    let k = cbar.ncols();
    if cbar.nrows() != n {
        return Err(Error::DimensionMismatch(format!(
            "factor matrix has {} rows, data have {n} samples",
            cbar.nrows()
        )));
    }
    if k >= n {
        return Err(Error::InvalidInput(format!("k = {k} must be below n = {n}")));
    }
    if k == 0 {
        return Ok(sbar.trace());
    }
    let q = linalg::orthonormalize(cbar, "whitened factors")?;
    let h = DVector::from_fn(n, |i, _| q.row(i).norm_squared());
    if h.max() > guard_threshold(n, p, eta) {
        return Ok(f64::INFINITY);
    }
    // (I - H) S (I - H), diagonal only
    let sq = sbar * &q;
    let qt_s_q = q.transpose() * &sq;
    let mut loss = 0.0;
    for i in 0..n {
        let qi = q.row(i);
        let d = sbar[(i, i)] - 2.0 * (qi * sq.row(i).transpose())[0] + (qi * &qt_s_q * qi.transpose())[0];
        loss += d / (1.0 - h[i]).powi(2);
    }
    Ok(loss)
}

/// Leave-one-out loss of the whitened fold `Ȳ_f` (features by `n`) regressed
/// on the whitened factors `C̄`.
pub fn loo_loss(ybar: &DMatrix<f64>, cbar: &DMatrix<f64>, eta: f64, p: usize) -> Result<f64> {
    loo_loss_gram(&(ybar.transpose() * ybar), cbar, eta, p)
}

#[derive(Clone, Debug)]
pub struct CbcvReport {
    /// `F × (K_max + 1)`, with `+inf` where the leverage guard fired.
    pub loss: DMatrix<f64>,
    pub k_hat: usize,
    pub guard_triggered: Vec<Vec<bool>>,
    /// Training-fold variance estimate for each fold and rank.
    pub per_fold_variance: Vec<Vec<VarianceEstimate>>,
    pub folds: FoldAssignment,
    pub k_max: usize,
    pub eta: f64,
    pub warnings: Vec<String>,
}

impl CbcvReport {
    pub fn total_loss(&self) -> DVector<f64> {
        DVector::from_fn(self.loss.ncols(), |k, _| {
            let mut acc = 0.0;
            for f in 0..self.loss.nrows() {
                acc += self.loss[(f, k)];
            }
            acc
        })
    }
}

/// Smallest `k` attaining the minimal total loss.
pub fn argmin_total(total: &DVector<f64>) -> usize {
    let mut best = 0;
    for k in 1..total.len() {
        if total[k] < total[best] {
            best = k;
        }
    }
    best
}

#[derive(Clone, Copy, Debug)]
pub struct CbcvConfig {
    pub folds: usize,
    pub k_max: usize,
    pub eta: f64,
    pub seed: u64,
}

/// Choose the number of factors by cross-validation over feature folds.
/// `y2` is features by `m` and `basis` is in the `Qx` frame.
pub fn choose_k(
    y2: &DMatrix<f64>,
    basis: &CovarianceBasis,
    poly: &Polytope,
    config: &CbcvConfig,
) -> Result<CbcvReport> {
    let (p, m) = y2.shape();
    let CbcvConfig { folds, k_max, eta, seed } = *config;
    if !(eta > 0.0) {
        return Err(Error::InvalidInput(format!("eta must be positive, got {eta}")));
    }
    if k_max >= m {
        return Err(Error::InvalidInput(format!("K_max = {k_max} must be below m = {m}")));
    }
    let assignment = partition_folds(p, folds, seed)?;
    let mut warnings = Vec::new();
    if p < 10 * m {
        let msg = format!("p = {p} is less than 10 n = {}; fold losses may be unreliable", 10 * m);
        log::warn!("{msg}");
        warnings.push(msg);
    }
    let members: Vec<Vec<usize>> = (0..folds).map(|f| assignment.members(f)).collect();
    let grams: Vec<DMatrix<f64>> = members
        .par_iter()
        .map(|rows| {
            let yf = y2.select_rows(rows.iter());
            linalg::symmetrize(&(yf.transpose() * yf))
        })
        .collect();

    let per_fold: Vec<Result<(Vec<f64>, Vec<bool>, Vec<VarianceEstimate>)>> = (0..folds)
        .into_par_iter()
        .map(|f| {
            let mut train = DMatrix::zeros(m, m);
            for (g, gram) in grams.iter().enumerate() {
                if g != f {
                    train += gram;
                }
            }
            let p_train = p - members[f].len();
            let moment = SecondMoment::from_gram(&train, p_train);
            let fits = run_icase_moment(&moment, basis, poly, k_max).map_err(|e| e.context(format!("fold {f}")))?;
            let mut losses = Vec::with_capacity(k_max + 1);
            let mut guards = Vec::with_capacity(k_max + 1);
            let mut vars = Vec::with_capacity(k_max + 1);
            for fit in fits {
                let w_inv_half = linalg::sym_inv_sqrt(fit.w());
                let sbar = linalg::symmetrize(&(&w_inv_half * &grams[f] * &w_inv_half));
                let cbar = &w_inv_half * &fit.c_perp;
                let loss = loo_loss_gram(&sbar, &cbar, eta, p)
                    .map_err(|e| e.context(format!("fold {f}, k {}", fit.k)))?;
                guards.push(loss.is_infinite());
                losses.push(loss);
                vars.push(fit.variance);
            }
            Ok((losses, guards, vars))
        })
        .collect();

    let mut loss = DMatrix::zeros(folds, k_max + 1);
    let mut guard_triggered = Vec::with_capacity(folds);
    let mut per_fold_variance = Vec::with_capacity(folds);
    for (f, r) in per_fold.into_iter().enumerate() {
        let (l, g, v) = r?;
        for k in 0..=k_max {
            loss[(f, k)] = l[k];
        }
        guard_triggered.push(g);
        per_fold_variance.push(v);
    }
    let mut report = CbcvReport {
        loss,
        k_hat: 0,
        guard_triggered,
        per_fold_variance,
        folds: assignment,
        k_max,
        eta,
        warnings,
    };
    report.k_hat = argmin_total(&report.total_loss());
    Ok(report)
}

/// Loss table with one row per fold.
pub fn loss_tsv(report: &CbcvReport) -> String {
    let mut out = String::from("fold");
    for k in 0..=report.k_max {
        out.push_str(&format!("\tk{k}"));
    }
    out.push('\n');
    for f in 0..report.loss.nrows() {
        out.push_str(&f.to_string());
        for k in 0..=report.k_max {
            out.push_str(&format!("\t{:.16e}", report.loss[(f, k)]));
        }
        out.push('\n');
    }
    out
}
