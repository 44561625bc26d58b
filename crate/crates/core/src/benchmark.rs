//! Simulation benchmark: generate replicates, run each method and score it
//! against the ground truth.

use std::fmt::Write as _;
use std::str::FromStr;

use nalgebra::DMatrix;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::baselines::{self, fdp_trp, parallel_analysis, subspace_angle, svd_baseline};
use crate::cbcv::{choose_k, CbcvConfig, DEFAULT_ETA};
use crate::error::{Error, Result};
use crate::icase::default_k_max;
use crate::inference::{run_inference, FactorInputs, InferenceOptions, InferenceResult, VarianceModel};
use crate::io::format_real;
use crate::simgen::{calibrate_alpha, simulate, SimConfig, SimulatedDataset, TARGET_R2};

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Method {
    /// Rank by cross-validation, then factors and confounders at that rank.
    Cbcv,
    /// Rank by parallel analysis.
    Pa,
    /// Factors and confounders at the true rank.
    Icase,
    /// Unwhitened singular vectors at the true rank.
    Svd,
    /// Singular vectors on matched data with independent noise.
    SvdInd,
    /// Regression on the true confounders.
    Oracle,
}

impl Method {
    pub const ALL: [Method; 6] = [Method::Cbcv, Method::Pa, Method::Icase, Method::Svd, Method::SvdInd, Method::Oracle];

    pub fn name(self) -> &'static str {
        match self {
            Method::Cbcv => "cbcv",
            Method::Pa => "pa",
            Method::Icase => "icase",
            Method::Svd => "svd",
            Method::SvdInd => "svd-ind",
            Method::Oracle => "oracle",
        }
    }
}

impl FromStr for Method {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Method::ALL
            .into_iter()
            .find(|m| m.name() == s)
            .ok_or_else(|| Error::InvalidInput(format!("unknown method '{s}'")))
    }
}

#[derive(Clone, Debug)]
pub struct BenchmarkConfig {
    /// Template for every replicate; replicate `r` uses seed `seed + r`.
    pub sim: SimConfig,
    pub replicates: usize,
    pub methods: Vec<Method>,
    pub folds: usize,
    pub k_max: Option<usize>,
    pub eta: f64,
    pub pa_permutations: usize,
    pub pa_quantile: f64,
    pub q_threshold: f64,
    pub variance_model: VarianceModel,
}

impl BenchmarkConfig {
    pub fn new(sim: SimConfig, replicates: usize, methods: Vec<Method>) -> Self {
        Self {
            sim,
            replicates,
            methods,
            folds: 3,
            k_max: None,
            eta: DEFAULT_ETA,
            pa_permutations: baselines::DEFAULT_PERMUTATIONS,
            pa_quantile: baselines::DEFAULT_QUANTILE,
            q_threshold: baselines::DEFAULT_Q_THRESHOLD,
            variance_model: VarianceModel::default(),
        }
    }

    /// Fix `α` once so replicates do not each recalibrate.
    pub fn calibrated(mut self) -> Result<Self> {
        if self.sim.alpha.is_none() {
            self.sim.alpha = Some(calibrate_alpha(&self.sim, TARGET_R2)?);
        }
        Ok(self)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BenchmarkRow {
    pub replicate: usize,
    pub seed: u64,
    pub method: Method,
    pub k_true: usize,
    pub k_hat: Option<usize>,
    pub angle_rad: Option<f64>,
    pub fdp: Option<f64>,
    pub trp: Option<f64>,
}

/// Everything measured on one replicate.
#[derive(Clone, Debug)]
pub struct ReplicateOutcome {
    pub rows: Vec<BenchmarkRow>,
    /// t statistics of the truly null features, per method that tested.
    pub null_t: Vec<(Method, Vec<f64>)>,
    /// Largest `|Qx' C_hat - C_perp|` over the confounder fits.
    pub identity_residual: f64,
}

/// Naive confounder estimate: singular vectors of `Y Qx` and ordinary least
/// squares for the `X` component, all under independent noise. Works in the
/// frame of `inputs`.
pub fn svd_confounders(inputs: &FactorInputs, k: usize) -> Result<DMatrix<f64>> {
    use crate::corrconf::{assemble_confounders, estimate_loadings, omega_ols};
    let m = inputs.m();
    let n = inputs.y.ncols();
    let c_perp = svd_baseline(&inputs.y2, k)? * (m as f64).sqrt();
    let eye_m = DMatrix::identity(m, m);
    let l_hat = estimate_loadings(&inputs.y2, &c_perp, &eye_m)?;
    let xtx = crate::linalg::spd_inverse(&(inputs.x.transpose() * &inputs.x), "X'X")?;
    let y1 = &inputs.y * &inputs.x * xtx;
    let omega = omega_ols(&y1, &l_hat)?;
    let c = assemble_confounders(&inputs.x, &omega, &DMatrix::identity(n, n), &inputs.qx, &eye_m, &c_perp)?;
    Ok(inputs.to_original(&c))
}

fn truth_perp(inputs: &FactorInputs, c: &DMatrix<f64>) -> DMatrix<f64> {
    let rotated = match &inputs.q_z {
        Some(q) => q.transpose() * c,
        None => c.clone(),
    };
    inputs.qx.transpose() * rotated
}

fn null_t(res: &InferenceResult, d: &SimulatedDataset) -> Vec<f64> {
    res.features
        .iter()
        .zip(&d.truth.nonnull)
        .filter(|(_, nonnull)| !**nonnull)
        .map(|(f, _)| f.t[0])
        .collect()
}

fn q_values(res: &InferenceResult) -> Vec<f64> {
    res.features.iter().map(|f| f.q[0]).collect()
}

/// Run every configured method on replicate `r`.
pub fn run_replicate(config: &BenchmarkConfig, r: usize) -> Result<ReplicateOutcome> {
    let mut sim = config.sim.clone();
    if sim.alpha.is_none() {
        return Err(Error::InvalidInput("calibrate the benchmark configuration first".into()));
    }
    sim.seed = config.sim.seed + r as u64;
    let seed = sim.seed;
    let d = simulate(&sim)?;
    let inputs = FactorInputs::new(&d.y, &d.design, &d.basis)?;
    let truth = truth_perp(&inputs, &d.truth.c);
    let k_true = sim.k;
    let k_max = config.k_max.unwrap_or_else(|| default_k_max(inputs.m()));
    let row = |method, k_hat, angle_rad, fdp_trp: Option<(f64, f64)>| BenchmarkRow {
        replicate: r,
        seed,
        method,
        k_true,
        k_hat,
        angle_rad,
        fdp: fdp_trp.map(|x| x.0),
        trp: fdp_trp.map(|x| x.1),
    };
    let options = |k: Option<usize>, oracle_c: Option<DMatrix<f64>>| InferenceOptions {
        k,
        folds: config.folds,
        k_max: Some(k_max),
        eta: config.eta,
        seed,
        oracle_c,
        naive_omega: false,
        variance_model: config.variance_model,
    };
    let score = |res: &InferenceResult| fdp_trp(&q_values(res), &d.truth.nonnull, config.q_threshold);
    let angle_of = |res: &InferenceResult| -> Result<Option<f64>> {
        match &res.confounders {
            Some(c) if c.k() > 0 => Ok(Some(subspace_angle(&c.source_fit.c_perp, &truth)?)),
            _ => Ok(None),
        }
    };

    let mut out = ReplicateOutcome {
        rows: Vec::new(),
        null_t: Vec::new(),
        identity_residual: 0.0,
    };
    let mut known_rank: Option<InferenceResult> = None;
    for &method in &config.methods {
        match method {
            Method::Cbcv => {
                let cfg = CbcvConfig {
                    folds: config.folds,
                    k_max,
                    eta: config.eta,
                    seed,
                };
                let report = choose_k(&inputs.y2, &inputs.basis_qx, &d.polytope, &cfg)?;
                let res = run_inference(&d.y, &d.design, &d.basis, &d.polytope, &options(Some(report.k_hat), None))?;
                out.identity_residual = out.identity_residual.max(res.confounders.as_ref().map_or(0.0, |c| c.identity_residual()));
                out.rows.push(row(method, Some(report.k_hat), angle_of(&res)?, Some(score(&res)?)));
                out.null_t.push((method, null_t(&res, &d)));
                if report.k_hat == k_true {
                    known_rank = Some(res);
                }
            }
            Method::Icase => {
                let res = match known_rank.take() {
                    Some(res) => res,
                    None => run_inference(&d.y, &d.design, &d.basis, &d.polytope, &options(Some(k_true), None))?,
                };
                out.identity_residual = out.identity_residual.max(res.confounders.as_ref().map_or(0.0, |c| c.identity_residual()));
                out.rows.push(row(method, Some(k_true), angle_of(&res)?, Some(score(&res)?)));
                out.null_t.push((method, null_t(&res, &d)));
            }
            Method::Pa => {
                let k = parallel_analysis(&inputs.y2, config.pa_permutations, config.pa_quantile, seed)?;
                out.rows.push(row(method, Some(k), None, None));
            }
            Method::Svd => {
                let angle = subspace_angle(&svd_baseline(&inputs.y2, k_true)?, &truth)?;
                let c_hat = svd_confounders(&inputs, k_true)?;
                let res = run_inference(&d.y, &d.design, &d.basis, &d.polytope, &options(None, Some(c_hat)))?;
                out.rows.push(row(method, Some(k_true), Some(angle), Some(score(&res)?)));
                out.null_t.push((method, null_t(&res, &d)));
            }
            Method::SvdInd => {
                let mut ind = sim.clone();
                ind.independent_noise = true;
                let di = simulate(&ind)?;
                let ii = FactorInputs::new(&di.y, &di.design, &di.basis)?;
                let angle = subspace_angle(&svd_baseline(&ii.y2, k_true)?, &truth_perp(&ii, &di.truth.c))?;
                out.rows.push(row(method, Some(k_true), Some(angle), None));
            }
            Method::Oracle => {
                let res = run_inference(&d.y, &d.design, &d.basis, &d.polytope, &options(None, Some(d.truth.c.clone())))?;
                out.rows.push(row(method, Some(k_true), None, Some(score(&res)?)));
                out.null_t.push((method, null_t(&res, &d)));
            }
        }
    }
    Ok(out)
}

/// All replicates, in replicate order.
pub fn run_benchmark(config: &BenchmarkConfig) -> Result<Vec<ReplicateOutcome>> {
    (0..config.replicates)
        .into_par_iter()
        .map(|r| run_replicate(config, r).map_err(|e| e.context(format!("replicate {r}"))))
        .collect()
}

pub const TSV_HEADER: &str = "replicate\tseed\tmethod\tk_true\tk_hat\tangle_rad\tangle_deg\tfdp\ttrp";

/// One line per row; missing values are written as `NA`.
pub fn rows_tsv(rows: &[BenchmarkRow]) -> String {
    let opt = |v: Option<f64>| v.map_or_else(|| "NA".to_string(), format_real);
    let mut out = String::from(TSV_HEADER);
    out.push('\n');
    for r in rows {
        let _ = writeln!(
            out,
            "{}\t{}\t{}\t{}\t{}\t{}\t{}\t{}\t{}",
            r.replicate,
            r.seed,
            r.method.name(),
            r.k_true,
            r.k_hat.map_or_else(|| "NA".to_string(), |k| k.to_string()),
            opt(r.angle_rad),
            opt(r.angle_rad.map(f64::to_degrees)),
            opt(r.fdp),
            opt(r.trp),
        );
    }
    out
}
