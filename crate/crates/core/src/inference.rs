//! Per-feature variance estimation, generalized least squares with the
//! estimated confounders, and multiplicity-adjusted tests.

use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;
use statrs::distribution::{ContinuousCDF, StudentsT};

use crate::cbcv::{choose_k, CbcvConfig, CbcvReport, DEFAULT_ETA, DEFAULT_FOLDS};
use crate::corrconf::{estimate_confounders, ConfounderEstimate};
use crate::error::{Error, Result};
use crate::icase::{default_k_max, run_icase, FactorFit};
use crate::linalg;
use crate::linmodel::{residualize_nuisance, CovarianceBasis, DesignMatrices, FeatureMatrix, Polytope};
use crate::variance_reml::{reml_working_model, FeatureRemlContext};

#[derive(Clone, Debug)]
pub struct FeatureInference {
    pub feature_id: String,
    pub beta: DVector<f64>,
    /// `n` times the sampling covariance of `beta`.
    pub m_n: DMatrix<f64>,
    pub v_g: DVector<f64>,
    pub t: DVector<f64>,
    pub p: DVector<f64>,
    pub q: DVector<f64>,
    pub df: usize,
    /// The variance estimate sits on the eigenvalue floor.
    pub boundary: bool,
    pub n: usize,
}

impl FeatureInference {
    pub fn se(&self) -> DVector<f64> {
        let n = self.n as f64;
        DVector::from_fn(self.beta.len(), |j, _| (self.m_n[(j, j)] / n).sqrt())
    }
}

fn hcat(blocks: &[&DMatrix<f64>]) -> DMatrix<f64> {
    let n = blocks[0].nrows();
    let cols: usize = blocks.iter().map(|b| b.ncols()).sum();
    let mut out = DMatrix::zeros(n, cols);
    let mut at = 0;
    for b in blocks {
        out.columns_mut(at, b.ncols()).copy_from(*b);
        at += b.ncols();
    }
    out
}

/// GLS of `y` on `[X C]` under covariance `v`. Returns the coefficients on
/// `X` and `M_n = n [(D' V^{-1} D)^{-1}]_{XX}`.
pub fn gls_fit(
    y: &DVector<f64>,
    x: &DMatrix<f64>,
    c_hat: &DMatrix<f64>,
    v: &DMatrix<f64>,
) -> Result<(DVector<f64>, DMatrix<f64>)> {
    let n = x.nrows();
    let d = x.ncols();
    let design = hcat(&[x, c_hat]);
    crate::linmodel::data::check_full_rank(&design, "[X C]")?;
    let chol = linalg::cholesky(v, "V").map_err(|_| Error::SingularCovariance("V_g".into()))?;
    let vinv_d = chol.solve(&design);
    let g = linalg::symmetrize(&(design.transpose() * &vinv_d));
    let g_inv = linalg::spd_inverse(&g, "D'V^{-1}D").map_err(|_| Error::RankDeficientDesign("[X C]".into()))?;
    let coef = &g_inv * (vinv_d.transpose() * y);
    let beta = coef.rows(0, d).into_owned();
    let m_n = g_inv.view((0, 0), (d, d)).into_owned() * n as f64;
    Ok((beta, m_n))
}

/// Benjamini-Hochberg step-up adjusted p-values.
pub fn benjamini_hochberg(p: &[f64]) -> Vec<f64> {
    let m = p.len();
    let mut order: Vec<usize> = (0..m).collect();
    order.sort_by(|&a, &b| p[a].total_cmp(&p[b]).then(a.cmp(&b)));
    let mut q = vec![0.0; m];
    let mut running: f64 = 1.0;
    for rank in (0..m).rev() {
        let i = order[rank];
        running = running.min(p[i] * m as f64 / (rank + 1) as f64);
        q[i] = running.min(1.0);
    }
    q
}

/// Two-sided p-value of `t` under a t distribution with `df` degrees of freedom.
pub fn two_sided_p(t: f64, df: usize) -> f64 {
    let dist = StudentsT::new(0.0, 1.0, df as f64).expect("positive degrees of freedom");
    (2.0 * dist.sf(t.abs())).min(1.0)
}

/// Fill in `t`, `p` and `q` (per coefficient across features).
pub fn feature_tests(fits: &mut [FeatureInference], df: usize) -> Result<()> {
    if df < 1 {
        return Err(Error::InvalidInput("degrees of freedom must be at least 1".into()));
    }
    let d = fits.first().map_or(0, |f| f.beta.len());
    for f in fits.iter_mut() {
        let se = f.se();
        f.df = df;
        f.t = DVector::from_fn(d, |j, _| f.beta[j] / se[j]);
        f.p = f.t.map(|t| two_sided_p(t, df));
    }
    for j in 0..d {
        let ps: Vec<f64> = fits.iter().map(|f| f.p[j]).collect();
        let qs = benjamini_hochberg(&ps);
        for (f, q) in fits.iter_mut().zip(qs) {
            if f.q.len() != d {
                f.q = DVector::zeros(d);
            }
            f.q[j] = q;
        }
    }
    Ok(())
}

/// How each feature's covariance is estimated in the final regression.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum VarianceModel {
    /// Common shape from the working model, per-feature scale.
    #[default]
    SharedShape,
    /// Unrestricted REML over the polytope for every feature.
    PerFeature,
}

#[derive(Clone, Debug)]
pub struct InferenceOptions {
    /// Number of factors; chosen by cross-validation when `None`.
    pub k: Option<usize>,
    pub folds: usize,
    pub k_max: Option<usize>,
    pub eta: f64,
    pub seed: u64,
    /// Use this `n × K` matrix as the confounders instead of estimating them.
    pub oracle_c: Option<DMatrix<f64>>,
    /// Skip the bias correction of the confounder regression.
    pub naive_omega: bool,
    pub variance_model: VarianceModel,
}

impl Default for InferenceOptions {
    fn default() -> Self {
        Self {
            k: None,
            folds: DEFAULT_FOLDS,
            k_max: None,
            eta: DEFAULT_ETA,
            seed: 0,
            oracle_c: None,
            naive_omega: false,
            variance_model: VarianceModel::default(),
        }
    }
}

#[derive(Clone, Debug)]
pub struct InferenceResult {
    pub features: Vec<FeatureInference>,
    pub k: usize,
    pub df: usize,
    pub cbcv: Option<CbcvReport>,
    pub confounders: Option<ConfounderEstimate>,
    /// Confounders in the original sample frame.
    pub c_hat: DMatrix<f64>,
}

/// Data rotated into the complement of the covariates, shared by the factor
/// stages.
#[derive(Clone, Debug)]
pub struct FactorInputs {
    /// Data after nuisance rotation, features by `n - r`.
    pub y: DMatrix<f64>,
    pub x: DMatrix<f64>,
    /// Basis in the nuisance-rotated frame.
    pub basis: CovarianceBasis,
    pub q_z: Option<DMatrix<f64>>,
    pub qx: DMatrix<f64>,
    pub y2: DMatrix<f64>,
    /// Basis in the `Qx` frame.
    pub basis_qx: CovarianceBasis,
}

impl FactorInputs {
    pub fn new(y: &FeatureMatrix, design: &DesignMatrices, basis: &CovarianceBasis) -> Result<Self> {
        let r = residualize_nuisance(&y.values, design, basis)?;
        let qx = if r.x.ncols() == 0 {
            DMatrix::identity(r.x.nrows(), r.x.nrows())
        } else {
            linalg::null_basis(&r.x)?
        };
        let y2 = &r.y * &qx;
        let basis_qx = r.basis.rotate(&qx)?;
        Ok(Self {
            y: r.y,
            x: r.x,
            basis: r.basis,
            q_z: r.q_z,
            qx,
            y2,
            basis_qx,
        })
    }

    pub fn m(&self) -> usize {
        self.qx.ncols()
    }

    /// Map an estimate from the nuisance-rotated frame to the original one.
    pub fn to_original(&self, c: &DMatrix<f64>) -> DMatrix<f64> {
        match &self.q_z {
            Some(q) => q * c,
            None => c.clone(),
        }
    }
}

/// Per-feature variance and GLS for design `[X Z C]`. `shape` is the shared
/// covariance shape under [`VarianceModel::SharedShape`] and the REML start
/// otherwise.
pub fn fit_features(
    y: &FeatureMatrix,
    design: &DesignMatrices,
    c_hat: &DMatrix<f64>,
    basis: &CovarianceBasis,
    poly: &Polytope,
    model: VarianceModel,
    shape: Option<&DVector<f64>>,
) -> Result<Vec<FeatureInference>> {
    let shape = match (model, shape) {
        (VarianceModel::SharedShape, None) => {
            return Err(Error::InvalidInput("the shared-shape model needs a covariance shape".into()))
        }
        (_, s) => s,
    };
    let d = design.d();
    let n = design.n();
    let mut blocks: Vec<&DMatrix<f64>> = vec![&design.x];
    if let Some(z) = &design.z {
        blocks.push(z);
    }
    blocks.push(c_hat);
    let full = hcat(&blocks);
    let ctx = FeatureRemlContext::new(basis, &full, poly)?;
    (0..y.p())
        .into_par_iter()
        .map(|g| {
            let yg = y.values.row(g).transpose();
            let run = || -> Result<FeatureInference> {
                let (fit, coef, cov) = match model {
                    VarianceModel::SharedShape => ctx.fit_scale(&yg, shape.expect("checked above"))?,
                    VarianceModel::PerFeature => {
                        let fit = ctx.fit(&yg, shape)?;
                        let (coef, cov) = ctx.gls(&yg, &fit.v)?;
                        (fit, coef, cov)
                    }
                };
                Ok(FeatureInference {
                    feature_id: y.feature_ids[g].clone(),
                    beta: coef.rows(0, d).into_owned(),
                    m_n: linalg::symmetrize(&(cov.view((0, 0), (d, d)).into_owned() * n as f64)),
                    v_g: fit.v,
                    t: DVector::zeros(d),
                    p: DVector::zeros(d),
                    q: DVector::zeros(d),
                    df: 0,
                    boundary: fit.diagnostics.boundary,
                    n,
                })
            };
            run().map_err(|e| e.context(format!("feature {}", y.feature_ids[g])))
        })
        .collect()
}

/// Factor stages only: optional rank selection, factor fits and confounder
/// reconstruction. Returns the report, the fit at the chosen rank and the
/// confounder estimate.
pub fn estimate_factors(
    inputs: &FactorInputs,
    poly: &Polytope,
    options: &InferenceOptions,
) -> Result<(Option<CbcvReport>, FactorFit, ConfounderEstimate)> {
    let m = inputs.m();
    let k_max = options.k_max.unwrap_or_else(|| default_k_max(m));
    let (k, report) = match options.k {
        Some(k) => (k, None),
        None => {
            let config = CbcvConfig {
                folds: options.folds,
                k_max,
                eta: options.eta,
                seed: options.seed,
            };
            let report = choose_k(&inputs.y2, &inputs.basis_qx, poly, &config).map_err(|e| e.context("choose-k"))?;
            (report.k_hat, Some(report))
        }
    };
    let fits = run_icase(&inputs.y2, &inputs.basis_qx, poly, k).map_err(|e| e.context("factor fit"))?;
    let fit = fits.into_iter().last().expect("at least the rank-zero fit");
    let conf = if options.naive_omega {
        crate::corrconf::estimate_confounders_with(&inputs.y, &inputs.x, &inputs.basis, &fit, false)
    } else {
        estimate_confounders(&inputs.y, &inputs.x, &inputs.basis, &fit)
    }
    .map_err(|e| e.context("confounders"))?;
    Ok((report, fit, conf))
}

/// The full pipeline from raw data to per-feature tests.
pub fn run_inference(
    y: &FeatureMatrix,
    design: &DesignMatrices,
    basis: &CovarianceBasis,
    poly: &Polytope,
    options: &InferenceOptions,
) -> Result<InferenceResult> {
    if design.d() == 0 {
        return Err(Error::InvalidInput("inference needs at least one covariate of interest".into()));
    }
    if y.n() != design.n() || basis.n != design.n() {
        return Err(Error::DimensionMismatch(format!(
            "Y has {} samples, design {}, basis {}",
            y.n(),
            design.n(),
            basis.n
        )));
    }
    let (c_hat, report, conf, start) = match &options.oracle_c {
        Some(c) => {
            if c.nrows() != design.n() {
                return Err(Error::DimensionMismatch(format!(
                    "oracle C has {} rows, expected {}",
                    c.nrows(),
                    design.n()
                )));
            }
            let shape = match options.variance_model {
                VarianceModel::SharedShape => {
                    let inputs = FactorInputs::new(y, design, basis)?;
                    let c_rot = match &inputs.q_z {
                        Some(q) => q.transpose() * c,
                        None => c.clone(),
                    };
                    let c_perp = inputs.qx.transpose() * c_rot;
                    let est = reml_working_model(&inputs.y2, &c_perp, &inputs.basis_qx, poly, None)
                        .map_err(|e| e.context("working model"))?;
                    Some(est.tau)
                }
                VarianceModel::PerFeature => None,
            };
            (c.clone(), None, None, shape)
        }
        None => {
            let inputs = FactorInputs::new(y, design, basis)?;
            let (report, fit, conf) = estimate_factors(&inputs, poly, options)?;
            let c = inputs.to_original(&conf.c_hat);
            (c, report, Some(conf), Some(fit.variance.tau.clone()))
        }
    };
    let k = c_hat.ncols();
    let used = design.d() + design.r() + k;
    if used >= design.n() {
        return Err(Error::RankDeficientDesign(format!(
            "{used} columns leave no residual degrees of freedom with n = {}",
            design.n()
        )));
    }
    let df = design.n() - used;
    let mut features = fit_features(y, design, &c_hat, basis, poly, options.variance_model, start.as_ref())?;
    feature_tests(&mut features, df)?;
    Ok(InferenceResult {
        features,
        k,
        df,
        cbcv: report,
        confounders: conf,
        c_hat,
    })
}
