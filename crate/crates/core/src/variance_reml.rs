//! Constrained restricted maximum likelihood for the variance multipliers.
//!
//! Both the shared working model and the per-feature model are maximized by
//! the same projected Newton ascent: the curvature (Fisher or average
//! information) defines a metric, the Newton target is projected onto the
//! constraint cone in that metric, and an Armijo backtracking search along
//! the resulting feasible segment guarantees monotone ascent. Parameters are
//! rescaled internally so that the data have unit average variance.

use nalgebra::{Cholesky, DMatrix, DVector, Dyn};
use serde::Serialize;

use crate::error::{Error, Result};
use crate::linalg;
use crate::linmodel::{BlockBasis, CovarianceBasis, Polytope};

mod kron;

pub const MAX_ITER: usize = 500;
pub const GRAD_TOL: f64 = 1e-8;
/// Predicted increase below which a stalled line search counts as converged.
const STALL_TOL: f64 = 1e-12;
/// Slack allowed below the eigenvalue floor when checking the domain.
const FLOOR_SLACK: f64 = 1e-11;
/// Consecutive accepted steps without measurable gain before stopping.
const FLAT_STEPS: usize = 3;

#[derive(Clone, Debug, Default, Serialize)]
pub struct RemlDiagnostics {
    pub iterations: usize,
    /// Norm of the projected gradient of the per-dimension objective.
    pub gradient_norm: f64,
    /// Per-dimension restricted log-likelihood at the returned point.
    pub objective: f64,
    pub start_objective: f64,
    pub active_constraints: Vec<usize>,
    /// The eigenvalue floor is binding at the returned point.
    pub boundary: bool,
    /// Normalized objective after each accepted iterate.
    pub trace: Vec<f64>,
}

#[derive(Clone, Debug)]
pub struct VarianceEstimate {
    pub delta2: f64,
    pub tau: DVector<f64>,
    /// `W(tau)` in the frame of the basis that was fitted.
    pub w: DMatrix<f64>,
    /// `log|W(tau)|`, zero up to rounding.
    pub logdet_residual: f64,
    pub diagnostics: RemlDiagnostics,
}

impl VarianceEstimate {
    /// `delta2 * tau`, the unnormalized multipliers.
    pub fn theta(&self) -> DVector<f64> {
        &self.tau * self.delta2
    }
}

/// `p^{-1} Y2' Y2` with its feature count.
#[derive(Clone, Debug)]
pub struct SecondMoment {
    pub s: DMatrix<f64>,
    pub p: usize,
}

impl SecondMoment {
    pub fn from_data(y2: &DMatrix<f64>) -> Self {
        let p = y2.nrows();
        let s = linalg::symmetrize(&(y2.transpose() * y2)) / p.max(1) as f64;
        Self { s, p }
    }

    /// From an accumulated Gram `Y2'Y2` over `p` features.
    pub fn from_gram(gram: &DMatrix<f64>, p: usize) -> Self {
        Self {
            s: linalg::symmetrize(gram) / p.max(1) as f64,
            p,
        }
    }
}

fn stack_terms(terms: &[DMatrix<f64>], x: &DVector<f64>) -> DMatrix<f64> {
    let n = terms[0].nrows();
    let mut v = DMatrix::zeros(n, n);
    for (t, xj) in terms.iter().zip(x.iter()) {
        if *xj != 0.0 {
            v += t * *xj;
        }
    }
    v
}

/// Shifted Cholesky `V - level I`.
fn shifted_cholesky(v: &DMatrix<f64>, level: f64) -> Option<Cholesky<f64, Dyn>> {
    let mut m = v.clone();
    for i in 0..m.nrows() {
        m[(i, i)] -= level;
    }
    Cholesky::new(m)
}

/// Largest `alpha` with `V + alpha Vd - level I` positive semidefinite, given
/// the Cholesky factor of `V - level I`.
fn max_step_from(chol: &Cholesky<f64, Dyn>, vd: &DMatrix<f64>) -> f64 {
    let l = chol.l();
    let n = vd.nrows();
    let linv_vd = l.solve_lower_triangular(vd).unwrap_or_else(|| DMatrix::zeros(n, n));
    let m = l
        .solve_lower_triangular(&linv_vd.transpose())
        .unwrap_or_else(|| DMatrix::zeros(n, n));
    let mu = linalg::sym_eigenvalues_desc(&m).min();
    if mu >= 0.0 {
        f64::INFINITY
    } else {
        -1.0 / mu
    }
}

pub(crate) struct Evaluation {
    pub value: f64,
    pub gradient: DVector<f64>,
    pub curvature: Option<DMatrix<f64>>,
}

pub(crate) trait Objective {
    /// `None` outside the positive definite region.
    fn evaluate(&self, x: &DVector<f64>, derivs: bool) -> Option<Evaluation>;
    /// `V(x) - level I` is positive definite.
    fn above(&self, x: &DVector<f64>, level: f64) -> bool;
    /// Largest `alpha` keeping `V(x + alpha d) - level I` semidefinite.
    fn max_step(&self, x: &DVector<f64>, d: &DVector<f64>, level: f64) -> f64;
}

/// Per-feature objectives also expose the GLS pieces.
/// GLS quantities at one covariance.
pub(crate) struct GlsSummary {
    pub coef: DVector<f64>,
    /// `(D' V^{-1} D)^{-1}`.
    pub cov: DMatrix<f64>,
    /// `y' P y`.
    pub ypy: f64,
    /// `log|V| + log|D' V^{-1} D|`.
    pub logdet: f64,
}

pub(crate) trait FeatureObjective: Objective {
    fn gls_summary(&self, x: &DVector<f64>) -> Option<GlsSummary>;

    fn ypy(&self, x: &DVector<f64>) -> Option<f64> {
        self.gls_summary(x).map(|s| s.ypy)
    }
}

pub(crate) struct AscentResult {
    pub x: DVector<f64>,
    pub value: f64,
    pub iterations: usize,
    pub gradient_norm: f64,
    pub boundary: bool,
    pub trace: Vec<f64>,
}

fn regularized(h: &DMatrix<f64>) -> DMatrix<f64> {
    let b = h.nrows();
    let mut h = linalg::symmetrize(h);
    let ridge = 1e-10 * (h.trace().abs() / b as f64).max(1e-300);
    for i in 0..b {
        h[(i, i)] += ridge;
    }
    h
}

fn line_search<O: Objective>(
    obj: &O,
    floor: f64,
    x: &DVector<f64>,
    current: f64,
    d: &DVector<f64>,
    slope: f64,
) -> Option<(DVector<f64>, Evaluation)> {
    let check = floor - FLOOR_SLACK;
    let mut alpha: f64 = 1.0;
    if !obj.above(&(x + d), check) {
        alpha = alpha.min(obj.max_step(x, d, floor));
    }
    for _ in 0..60 {
        if alpha <= 0.0 {
            return None;
        }
        let xt = x + d * alpha;
        if obj.above(&xt, check) {
            if let Some(e) = obj.evaluate(&xt, false) {
                if e.value >= current + 1e-4 * alpha * slope && e.value >= current {
                    return obj.evaluate(&xt, true).map(|e| (xt, e));
                }
            }
        }
        alpha *= 0.5;
    }
    None
}

pub(crate) fn projected_ascent<O: Objective>(obj: &O, poly: &Polytope, start: DVector<f64>) -> Result<AscentResult> {
    let floor = poly.pd_floor;
    let mut x = start;
    let mut ev = obj
        .evaluate(&x, true)
        .ok_or_else(|| Error::InfeasibleStart("covariance is not positive definite at the start".into()))?;
    let mut trace = vec![ev.value];
    let mut pgn = f64::INFINITY;
    let mut flat = 0;
    for it in 0..MAX_ITER {
        let g = ev.gradient.clone();
        let pg = poly.project(&(&x + &g))? - &x;
        pgn = pg.norm();
        let boundary = !obj.above(&x, floor * (1.0 + 1e-6) + 1e-12);
        if pgn <= GRAD_TOL {
            return Ok(AscentResult {
                x,
                value: ev.value,
                iterations: it,
                gradient_norm: pgn,
                boundary,
                trace,
            });
        }
        let mut dirs = Vec::with_capacity(2);
        if let Some(h) = &ev.curvature {
            let h = regularized(h);
            if let Ok(step) = linalg::spd_solve_vec(&h, &g, "curvature") {
                if let Ok(target) = poly.project_metric(&(&x + step), &h) {
                    dirs.push(target - &x);
                }
            }
        }
        dirs.push(pg);
        let mut newton_slope = 0.0;
        let mut accepted = None;
        for (i, d) in dirs.iter().enumerate() {
            let slope = g.dot(d);
            if i == 0 {
                newton_slope = slope;
            }
            if !(slope > 0.0) {
                continue;
            }
            if let Some(found) = line_search(obj, floor, &x, ev.value, d, slope) {
                accepted = Some(found);
                break;
            }
        }
        match accepted {
            Some((xn, en)) => {
                let gain = en.value - ev.value;
                x = xn;
                ev = en;
                trace.push(ev.value);
                if gain <= STALL_TOL * ev.value.abs().max(1.0) {
                    flat += 1;
                } else {
                    flat = 0;
                }
                // no measurable progress left at working precision
                if flat >= FLAT_STEPS {
                    let g = ev.gradient.clone();
                    let pgn = (poly.project(&(&x + &g))? - &x).norm();
                    return Ok(AscentResult {
                        x: x.clone(),
                        value: ev.value,
                        iterations: it + 1,
                        gradient_norm: pgn,
                        boundary: !obj.above(&x, floor * (1.0 + 1e-6) + 1e-12),
                        trace,
                    });
                }
            }
            None => {
                if boundary || newton_slope.abs() <= STALL_TOL || pgn <= 1e-6 {
                    return Ok(AscentResult {
                        x,
                        value: ev.value,
                        iterations: it,
                        gradient_norm: pgn,
                        boundary,
                        trace,
                    });
                }
                return Err(Error::NonConvergence {
                    iterations: it,
                    gradient_norm: pgn,
                });
            }
        }
    }
    Err(Error::NonConvergence {
        iterations: MAX_ITER,
        gradient_norm: pgn,
    })
}

/// Least-squares fit of `target` onto the span of `terms` (Frobenius inner product).
fn ls_fit(terms: &[DMatrix<f64>], target: &DMatrix<f64>) -> Option<DVector<f64>> {
    let b = terms.len();
    let gram = DMatrix::from_fn(b, b, |i, j| terms[i].dot(&terms[j]));
    let rhs = DVector::from_fn(b, |j, _| terms[j].dot(target));
    Cholesky::new(gram).map(|c| c.solve(&rhs))
}

/// Pick a start inside the domain: the supplied point if it works after
/// projection, else a blend with `fallback`.
fn admissible_start<O: Objective>(
    obj: &O,
    poly: &Polytope,
    start: Option<&DVector<f64>>,
    fallback: &DVector<f64>,
) -> Result<DVector<f64>> {
    let check = poly.pd_floor - FLOOR_SLACK;
    let ok = |x: &DVector<f64>| obj.above(x, check) && obj.evaluate(x, false).is_some();
    let Some(start) = start else {
        return Ok(fallback.clone());
    };
    if start.len() != poly.dim() {
        return Err(Error::DimensionMismatch(format!(
            "start has length {}, expected {}",
            start.len(),
            poly.dim()
        )));
    }
    if start.iter().any(|v| !v.is_finite()) {
        return Err(Error::InfeasibleStart("start has non-finite entries".into()));
    }
    let x0 = poly.project(start)?;
    if ok(&x0) {
        return Ok(x0);
    }
    for w in [0.1, 0.3, 0.6, 1.0] {
        let x = &x0 * (1.0 - w) + fallback * w;
        if ok(&x) {
            return Ok(x);
        }
    }
    Err(Error::InfeasibleStart("no admissible point near the supplied start".into()))
}

/// Default admissible point: projected least-squares fit of `target`, else of
/// the identity.
fn default_point<O: Objective>(
    obj: &O,
    poly: &Polytope,
    terms: &[DMatrix<f64>],
    target: &DMatrix<f64>,
) -> Result<DVector<f64>> {
    let check = poly.pd_floor - FLOOR_SLACK;
    let ok = |x: &DVector<f64>| obj.above(x, check) && obj.evaluate(x, false).is_some();
    let n = terms[0].nrows();
    let ident = DMatrix::<f64>::identity(n, n);
    let mut candidates = Vec::new();
    for t in [target, &ident] {
        if let Some(fit) = ls_fit(terms, t) {
            let x = poly.project(&fit)?;
            candidates.push(x);
        }
    }
    for x in &candidates {
        if ok(x) {
            return Ok(x.clone());
        }
    }
    // grow the identity fit until it clears the floor
    if let Some(x) = candidates.last() {
        let mut x = x.clone();
        for _ in 0..60 {
            if x.norm() == 0.0 {
                break;
            }
            x *= 2.0;
            if ok(&x) {
                return Ok(x);
            }
        }
    }
    Err(Error::InfeasibleStart(
        "no point of the constraint cone gives a covariance above the eigenvalue floor".into(),
    ))
}

/// Rescale `tau` so that `log|Qx' V(tau) Qx| = 0`.
pub fn logdet_normalize(tau: &DVector<f64>, basis: &CovarianceBasis, qx: &DMatrix<f64>) -> Result<(f64, DVector<f64>)> {
    let v = basis.build_covariance(tau)?;
    let w = linalg::symmetrize(&(qx.transpose() * v * qx));
    normalize_w(tau, &w)
}

fn normalize_w(tau: &DVector<f64>, w: &DMatrix<f64>) -> Result<(f64, DVector<f64>)> {
    let m = w.nrows();
    let chol = Cholesky::new(w.clone())
        .ok_or_else(|| Error::NotPositiveDefinite("Qx' V(tau) Qx".into()))?;
    let logdet = linalg::logdet_from_cholesky(&chol);
    let delta2 = (logdet / m as f64).exp();
    Ok((delta2, tau / delta2))
}

/// The working-model restricted likelihood on normalized data.
struct WorkingProblem {
    s_hat: DMatrix<f64>,
    b_hat: Vec<DMatrix<f64>>,
    b_full: Vec<DMatrix<f64>>,
}

impl WorkingProblem {
    fn new(s: &DMatrix<f64>, c_perp: &DMatrix<f64>, b_full: Vec<DMatrix<f64>>, scale: f64) -> Result<Self> {
        let m = s.nrows();
        let (s_hat, b_hat) = if c_perp.ncols() == 0 {
            (s / scale, b_full.clone())
        } else {
            let q = linalg::null_basis(c_perp)?;
            let qt = q.transpose();
            let b_hat = b_full.iter().map(|b| linalg::symmetrize(&(&qt * b * &q))).collect();
            (linalg::symmetrize(&(&qt * s * &q)) / scale, b_hat)
        };
        debug_assert_eq!(b_full[0].nrows(), m);
        Ok(Self { s_hat, b_hat, b_full })
    }

    fn dim_res(&self) -> f64 {
        self.s_hat.nrows() as f64
    }
}

impl Objective for WorkingProblem {
    fn evaluate(&self, x: &DVector<f64>, derivs: bool) -> Option<Evaluation> {
        let a = stack_terms(&self.b_hat, x);
        let chol = Cholesky::new(a)?;
        let mr = self.dim_res();
        let logdet = linalg::logdet_from_cholesky(&chol);
        let ainv = chol.inverse();
        let ainv_s = &ainv * &self.s_hat;
        let value = (-logdet - ainv_s.trace()) / mr;
        if !value.is_finite() {
            return None;
        }
        if !derivs {
            return Some(Evaluation {
                value,
                gradient: DVector::zeros(x.len()),
                curvature: None,
            });
        }
        let mats: Vec<DMatrix<f64>> = self.b_hat.iter().map(|b| &ainv * b).collect();
        let b = mats.len();
        let gradient = DVector::from_fn(b, |j, _| {
            (-mats[j].trace() + linalg::trace_product(&mats[j], &ainv_s)) / mr
        });
        let mut fisher = DMatrix::zeros(b, b);
        for i in 0..b {
            for j in i..b {
                let f = linalg::trace_product(&mats[i], &mats[j]) / mr;
                fisher[(i, j)] = f;
                fisher[(j, i)] = f;
            }
        }
        Some(Evaluation {
            value,
            gradient,
            curvature: Some(fisher),
        })
    }

    fn above(&self, x: &DVector<f64>, level: f64) -> bool {
        shifted_cholesky(&stack_terms(&self.b_full, x), level).is_some()
    }

    fn max_step(&self, x: &DVector<f64>, d: &DVector<f64>, level: f64) -> f64 {
        match shifted_cholesky(&stack_terms(&self.b_full, x), level) {
            Some(ch) => max_step_from(&ch, &stack_terms(&self.b_full, d)),
            None => 0.0,
        }
    }
}

fn check_working_inputs(s: &DMatrix<f64>, c_perp: &DMatrix<f64>, basis: &CovarianceBasis, poly: &Polytope) -> Result<()> {
    let m = s.nrows();
    if basis.n != m || c_perp.nrows() != m {
        return Err(Error::DimensionMismatch(format!(
            "second moment is {m} x {m}, basis has dimension {}, factors have {} rows",
            basis.n,
            c_perp.nrows()
        )));
    }
    if poly.dim() != basis.len() {
        return Err(Error::DimensionMismatch(format!(
            "polytope has dimension {}, basis has {} terms",
            poly.dim(),
            basis.len()
        )));
    }
    if c_perp.ncols() >= m {
        return Err(Error::InvalidInput(format!("k = {} must be below m = {m}", c_perp.ncols())));
    }
    Ok(())
}

fn residual_scale(s: &DMatrix<f64>, c_perp: &DMatrix<f64>, floor: f64) -> Result<f64> {
    let m = s.nrows();
    let k = c_perp.ncols();
    let tr = if k == 0 {
        s.trace()
    } else {
        let q = linalg::null_basis(c_perp)?;
        (q.transpose() * s * q).trace()
    };
    let scale = (tr / (m - k) as f64).max(floor);
    Ok(if scale > 0.0 && scale.is_finite() { scale } else { 1.0 })
}

/// Working-model REML from a cached second moment. `basis` must already be in
/// the `Qx` frame (dimension `m`), `start` is on the data scale.
pub fn reml_second_moment(
    moment: &SecondMoment,
    c_perp: &DMatrix<f64>,
    basis: &CovarianceBasis,
    poly: &Polytope,
    start: Option<&DVector<f64>>,
) -> Result<VarianceEstimate> {
    let s = &moment.s;
    check_working_inputs(s, c_perp, basis, poly)?;
    let scale = residual_scale(s, c_perp, poly.pd_floor)?;
    let terms = basis.materialize_all();
    let problem = WorkingProblem::new(s, c_perp, terms.clone(), scale)?;
    let npoly = poly.scaled(scale);
    let fallback = default_point(&problem, &npoly, &problem.b_hat, &problem.s_hat)?;
    let scaled_start = start.map(|x| x / scale);
    let x0 = admissible_start(&problem, &npoly, scaled_start.as_ref(), &fallback)?;
    let res = projected_ascent(&problem, &npoly, x0)?;
    let theta = &res.x * scale;
    let w_theta = stack_terms(&terms, &theta);
    let (delta2, tau) = normalize_w(&theta, &w_theta)?;
    let w = linalg::symmetrize(&stack_terms(&terms, &tau));
    let logdet_residual = linalg::logdet_spd(&w)?;
    let shift = scale.ln();
    Ok(VarianceEstimate {
        delta2,
        tau,
        w,
        logdet_residual,
        diagnostics: RemlDiagnostics {
            iterations: res.iterations,
            gradient_norm: res.gradient_norm,
            objective: res.value - shift,
            start_objective: res.trace[0] - shift,
            active_constraints: poly.active_set(&theta, crate::linmodel::polytope::ACTIVE_TOL),
            boundary: res.boundary,
            trace: res.trace,
        },
    })
}

/// Working-model REML on `Y2` (features by `m`), with `Ĉ⊥` as the mean
/// structure (`k = 0` columns for none).
pub fn reml_working_model(
    y2: &DMatrix<f64>,
    c_perp: &DMatrix<f64>,
    basis: &CovarianceBasis,
    poly: &Polytope,
    start: Option<&DVector<f64>>,
) -> Result<VarianceEstimate> {
    reml_second_moment(&SecondMoment::from_data(y2), c_perp, basis, poly, start)
}

/// Per-dimension working restricted log-likelihood `-(log|A| + tr(A^{-1} Ŝ))/m'`
/// at `theta` on the data scale.
pub fn working_objective(
    moment: &SecondMoment,
    c_perp: &DMatrix<f64>,
    basis: &CovarianceBasis,
    theta: &DVector<f64>,
) -> Result<f64> {
    let (value, _) = working_objective_gradient(moment, c_perp, basis, theta)?;
    Ok(value)
}

/// Objective and its analytic gradient in `theta`.
pub fn working_objective_gradient(
    moment: &SecondMoment,
    c_perp: &DMatrix<f64>,
    basis: &CovarianceBasis,
    theta: &DVector<f64>,
) -> Result<(f64, DVector<f64>)> {
    let problem = WorkingProblem::new(&moment.s, c_perp, basis.materialize_all(), 1.0)?;
    let e = problem
        .evaluate(theta, true)
        .ok_or_else(|| Error::NotPositiveDefinite("working covariance".into()))?;
    Ok((e.value, e.gradient))
}

/// Per-feature restricted likelihood with a block-diagonal covariance.
struct FeatureProblem<'a> {
    blocks: &'a BlockBasis,
    /// Rows of the design per block.
    d_blocks: &'a [DMatrix<f64>],
    y_blocks: Vec<DVector<f64>>,
    dof: f64,
}

struct FeatureState {
    vinv: Vec<DMatrix<f64>>,
    /// `V^{-1} D` per block.
    u: Vec<DMatrix<f64>>,
    g_chol: Cholesky<f64, Dyn>,
    /// `P y` per block.
    py: Vec<DVector<f64>>,
    logdet: f64,
}

impl FeatureProblem<'_> {
    fn state(&self, x: &DVector<f64>) -> Option<FeatureState> {
        let q = self.d_blocks.first().map_or(0, |d| d.ncols());
        let nb = self.blocks.blocks.len();
        let mut vinv = Vec::with_capacity(nb);
        let mut u = Vec::with_capacity(nb);
        let mut vy = Vec::with_capacity(nb);
        let mut logdet = 0.0;
        let mut g = DMatrix::zeros(q, q);
        let mut r = DVector::zeros(q);
        for ((v, d_b), y_b) in self.blocks.combine(x).into_iter().zip(self.d_blocks).zip(&self.y_blocks) {
            let ch = Cholesky::new(v)?;
            logdet += linalg::logdet_from_cholesky(&ch);
            let inv = ch.inverse();
            let u_b = &inv * d_b;
            g.gemm_tr(1.0, d_b, &u_b, 1.0);
            r.gemv_tr(1.0, &u_b, y_b, 1.0);
            vy.push(&inv * y_b);
            vinv.push(inv);
            u.push(u_b);
        }
        let g_chol = Cholesky::new(linalg::symmetrize(&g))?;
        logdet += linalg::logdet_from_cholesky(&g_chol);
        let a = g_chol.solve(&r);
        let py = vy.into_iter().zip(&u).map(|(v, u_b)| v - u_b * &a).collect();
        Some(FeatureState {
            vinv,
            u,
            g_chol,
            py,
            logdet,
        })
    }

    /// `P w` for `w` given per block.
    fn apply_p(&self, st: &FeatureState, w: &[DVector<f64>]) -> Vec<DVector<f64>> {
        let q = st.g_chol.l_dirty().nrows();
        let mut r = DVector::zeros(q);
        for (u_b, w_b) in st.u.iter().zip(w) {
            r.gemv_tr(1.0, u_b, w_b, 1.0);
        }
        let a = st.g_chol.solve(&r);
        st.vinv
            .iter()
            .zip(&st.u)
            .zip(w)
            .map(|((vi, u_b), w_b)| vi * w_b - u_b * &a)
            .collect()
    }

    /// Expected information `tr(P B_i P B_j) / dof`.
    fn fisher(&self, st: &FeatureState, g_inv: &DMatrix<f64>, h: &[DMatrix<f64>], bu: &[Vec<DMatrix<f64>>]) -> DMatrix<f64> {
        let b = self.blocks.len_terms();
        let mut f = DMatrix::zeros(b, b);
        for i in 0..b {
            for j in i..b {
                let mut first = 0.0;
                let mut cross = DMatrix::zeros(g_inv.nrows(), g_inv.ncols());
                for (k, blk) in self.blocks.blocks.iter().enumerate() {
                    let vi = &st.vinv[k];
                    let a = vi * &blk.terms[i];
                    let c = vi * &blk.terms[j];
                    first += a.transpose().dot(&c);
                    cross += bu[i][k].transpose() * vi * &bu[j][k];
                }
                let value = first - 2.0 * linalg::trace_product(g_inv, &cross)
                    + linalg::trace_product(&(g_inv * &h[i]), &(g_inv * &h[j]).transpose());
                f[(i, j)] = value / self.dof;
                f[(j, i)] = f[(i, j)];
            }
        }
        f
    }
}

impl Objective for FeatureProblem<'_> {
    fn evaluate(&self, x: &DVector<f64>, derivs: bool) -> Option<Evaluation> {
        let st = self.state(x)?;
        let ypy: f64 = self.y_blocks.iter().zip(&st.py).map(|(y, p)| y.dot(p)).sum();
        let value = (-st.logdet - ypy) / self.dof;
        if !value.is_finite() {
            return None;
        }
        let b = x.len();
        if !derivs {
            return Some(Evaluation {
                value,
                gradient: DVector::zeros(b),
                curvature: None,
            });
        }
        let g_inv = st.g_chol.inverse();
        let q = g_inv.nrows();
        let mut gradient = DVector::zeros(b);
        let mut w = Vec::with_capacity(b);
        let mut h = Vec::with_capacity(b);
        let mut bu = Vec::with_capacity(b);
        for j in 0..b {
            let mut tr_vinv_b = 0.0;
            let mut h_j = DMatrix::zeros(q, q);
            let mut quad = 0.0;
            let mut w_j = Vec::with_capacity(self.blocks.blocks.len());
            let mut bu_j = Vec::with_capacity(self.blocks.blocks.len());
            for (k, blk) in self.blocks.blocks.iter().enumerate() {
                let t = &blk.terms[j];
                tr_vinv_b += st.vinv[k].dot(t);
                let tu = t * &st.u[k];
                h_j.gemm_tr(1.0, &st.u[k], &tu, 1.0);
                let tp = t * &st.py[k];
                quad += st.py[k].dot(&tp);
                w_j.push(tp);
                bu_j.push(tu);
            }
            let tr_pb = tr_vinv_b - linalg::trace_product(&g_inv, &h_j);
            gradient[j] = (-tr_pb + quad) / self.dof;
            w.push(w_j);
            h.push(h_j);
            bu.push(bu_j);
        }
        let pw: Vec<Vec<DVector<f64>>> = w.iter().map(|w_j| self.apply_p(&st, w_j)).collect();
        let dot = |a: &[DVector<f64>], c: &[DVector<f64>]| a.iter().zip(c).map(|(x, y)| x.dot(y)).sum::<f64>();
        let ai = DMatrix::from_fn(b, b, |i, j| 0.5 * (dot(&w[i], &pw[j]) + dot(&w[j], &pw[i])) / self.dof);
        let ev = linalg::sym_eigenvalues_desc(&ai);
        let usable = ev[0] > 0.0 && ev[b - 1] > 1e-8 * ev[0];
        let curvature = if usable { ai } else { self.fisher(&st, &g_inv, &h, &bu) };
        Some(Evaluation {
            value,
            gradient,
            curvature: Some(curvature),
        })
    }

    fn above(&self, x: &DVector<f64>, level: f64) -> bool {
        self.blocks
            .combine(x)
            .iter()
            .all(|v| shifted_cholesky(v, level).is_some())
    }

    fn max_step(&self, x: &DVector<f64>, d: &DVector<f64>, level: f64) -> f64 {
        let vx = self.blocks.combine(x);
        let vd = self.blocks.combine(d);
        let mut best = f64::INFINITY;
        for (a, b) in vx.iter().zip(&vd) {
            match shifted_cholesky(a, level) {
                Some(ch) => best = best.min(max_step_from(&ch, b)),
                None => return 0.0,
            }
        }
        best
    }
}

impl FeatureObjective for FeatureProblem<'_> {
    fn gls_summary(&self, x: &DVector<f64>) -> Option<GlsSummary> {
        let st = self.state(x)?;
        let cov = linalg::symmetrize(&st.g_chol.inverse());
        let mut r = DVector::zeros(cov.nrows());
        for (u_b, y_b) in st.u.iter().zip(&self.y_blocks) {
            r.gemv_tr(1.0, u_b, y_b, 1.0);
        }
        Some(GlsSummary {
            coef: &cov * r,
            cov,
            ypy: self.y_blocks.iter().zip(&st.py).map(|(y, p)| y.dot(p)).sum(),
            logdet: st.logdet,
        })
    }
}

/// Result of a single-feature fit.
#[derive(Clone, Debug)]
pub struct FeatureVariance {
    pub v: DVector<f64>,
    pub diagnostics: RemlDiagnostics,
}

/// Shared inputs for fitting many features against one design.
#[derive(Clone, Debug)]
pub struct FeatureRemlContext {
    pub blocks: BlockBasis,
    pub design: DMatrix<f64>,
    pub poly: Polytope,
    d_blocks: Vec<DMatrix<f64>>,
    kron: Option<kron::KronDesign>,
    /// Orthonormal basis of the residual space of `design`.
    resid_basis: DMatrix<f64>,
    /// Terms materialized per block for the default start.
    identity_fit: DVector<f64>,
}

impl FeatureRemlContext {
    pub fn new(basis: &CovarianceBasis, design: &DMatrix<f64>, poly: &Polytope) -> Result<Self> {
        let n = basis.n;
        if design.nrows() != n {
            return Err(Error::DimensionMismatch(format!(
                "design has {} rows, basis dimension is {n}",
                design.nrows()
            )));
        }
        if poly.dim() != basis.len() {
            return Err(Error::DimensionMismatch(format!(
                "polytope has dimension {}, basis has {} terms",
                poly.dim(),
                basis.len()
            )));
        }
        crate::linmodel::data::check_full_rank(design, "design")?;
        let resid_basis = if design.ncols() == 0 {
            DMatrix::identity(n, n)
        } else {
            linalg::null_basis(design)?
        };
        let blocks = basis.block_basis();
        // projected fit of the identity, used when no start is supplied
        let terms = basis.materialize_all();
        let ident = DMatrix::<f64>::identity(n, n);
        let identity_fit = match ls_fit(&terms, &ident) {
            Some(fit) => poly.project(&fit)?,
            None => return Err(Error::InvalidInput("basis Gram matrix is singular".into())),
        };
        let d_blocks = blocks
            .blocks
            .iter()
            .map(|b| DMatrix::from_fn(b.indices.len(), design.ncols(), |r, c| design[(b.indices[r], c)]))
            .collect::<Vec<_>>();
        let kron = kron::KronDesign::detect(&blocks, &d_blocks);
        Ok(Self {
            blocks,
            design: design.clone(),
            poly: poly.clone(),
            d_blocks,
            kron,
            resid_basis,
            identity_fit,
        })
    }

    pub fn dof(&self) -> usize {
        self.design.nrows() - self.design.ncols()
    }

    fn problem(&self, y: &DVector<f64>) -> FeatureProblem<'_> {
        FeatureProblem {
            blocks: &self.blocks,
            d_blocks: &self.d_blocks,
            y_blocks: self
                .blocks
                .blocks
                .iter()
                .map(|b| DVector::from_fn(b.indices.len(), |r, _| y[b.indices[r]]))
                .collect(),
            dof: self.dof() as f64,
        }
    }

    fn ascend<P: FeatureObjective>(&self, problem: &P, scale: f64, start: Option<&DVector<f64>>) -> Result<AscentResult> {
        let dof = self.dof() as f64;
        let npoly = self.poly.scaled(scale);
        let check = npoly.pd_floor - FLOOR_SLACK;
        let ok = |x: &DVector<f64>| problem.above(x, check) && problem.evaluate(x, false).is_some();

        // identity fit rescaled to the residual mean square, grown if needed
        let mut fallback = self.identity_fit.clone();
        if fallback.norm() == 0.0 {
            return Err(Error::InfeasibleStart("projected identity fit is zero".into()));
        }
        let mut tries = 0;
        while !ok(&fallback) {
            fallback *= 2.0;
            tries += 1;
            if tries > 80 {
                return Err(Error::InfeasibleStart(
                    "no admissible covariance above the eigenvalue floor".into(),
                ));
            }
        }
        let start = match start {
            Some(s0) => {
                let s0 = self.poly.project(s0)?;
                // rescale the start by its own implied residual variance
                if ok(&s0) {
                    let c = problem.ypy(&s0).expect("admissible start") / dof;
                    let cand = &s0 * c.max(1e-300);
                    if c > 0.0 && ok(&cand) {
                        Some(cand)
                    } else {
                        Some(s0)
                    }
                } else {
                    Some(s0)
                }
            }
            None => None,
        };
        let x0 = admissible_start(problem, &npoly, start.as_ref(), &fallback)?;
        projected_ascent(problem, &npoly, x0)
    }

    /// Fit one feature. `start` (data scale) is rescaled by the residual mean
    /// square it implies before use.
    pub fn fit(&self, y: &DVector<f64>, start: Option<&DVector<f64>>) -> Result<FeatureVariance> {
        let n = self.blocks.n;
        if y.len() != n {
            return Err(Error::DimensionMismatch(format!("feature has {} samples, expected {n}", y.len())));
        }
        let dof = self.dof() as f64;
        let resid = self.resid_basis.transpose() * y;
        let rms = resid.norm_squared() / dof;
        let scale = rms.max(self.poly.pd_floor);
        let scale = if scale > 0.0 && scale.is_finite() { scale } else { 1.0 };
        let ys = y / scale.sqrt();
        let res = match &self.kron {
            Some(k) => self.ascend(&k.problem(&ys, dof), scale, start)?,
            None => self.ascend(&self.problem(&ys), scale, start)?,
        };
        let v = &res.x * scale;
        let shift = scale.ln();
        Ok(FeatureVariance {
            diagnostics: RemlDiagnostics {
                iterations: res.iterations,
                gradient_norm: res.gradient_norm,
                objective: res.value - shift,
                start_objective: res.trace[0] - shift,
                active_constraints: self.poly.active_set(&v, crate::linmodel::polytope::ACTIVE_TOL),
                boundary: res.boundary,
                trace: res.trace,
            },
            v,
        })
    }

    fn summary(&self, y: &DVector<f64>, v: &DVector<f64>) -> Option<GlsSummary> {
        match &self.kron {
            Some(k) => k.problem(y, self.dof() as f64).gls_summary(v),
            None => self.problem(y).gls_summary(v),
        }
    }

    /// REML restricted to the ray through `shape`: the multipliers are
    /// `s² · shape` with `s² = y' P(shape) y / dof` in closed form. Also
    /// returns the GLS coefficients and their covariance at that point.
    pub fn fit_scale(
        &self,
        y: &DVector<f64>,
        shape: &DVector<f64>,
    ) -> Result<(FeatureVariance, DVector<f64>, DMatrix<f64>)> {
        let dof = self.dof() as f64;
        let sm = self
            .summary(y, shape)
            .ok_or_else(|| Error::SingularCovariance("shared covariance shape is not positive definite".into()))?;
        let s2 = sm.ypy / dof;
        if !(s2 > 0.0) {
            return Err(Error::SingularCovariance("zero residual scale".into()));
        }
        let objective = (-sm.logdet - dof * s2.ln() - dof) / dof;
        let v = shape * s2;
        let fit = FeatureVariance {
            diagnostics: RemlDiagnostics {
                objective,
                start_objective: objective,
                active_constraints: self.poly.active_set(&v, crate::linmodel::polytope::ACTIVE_TOL),
                ..Default::default()
            },
            v,
        };
        Ok((fit, sm.coef, sm.cov * s2))
    }

    /// Generalized least squares at multipliers `v`: the coefficient vector
    /// and `(D' V^{-1} D)^{-1}`.
    pub fn gls(&self, y: &DVector<f64>, v: &DVector<f64>) -> Result<(DVector<f64>, DMatrix<f64>)> {
        self.summary(y, v)
            .map(|s| (s.coef, s.cov))
            .ok_or_else(|| Error::SingularCovariance("feature covariance is not positive definite".into()))
    }

    /// Per-dimension restricted log-likelihood and gradient at `v` (data scale).
    pub fn objective_gradient(&self, y: &DVector<f64>, v: &DVector<f64>) -> Result<(f64, DVector<f64>)> {
        let problem = self.problem(y);
        let e = problem
            .evaluate(v, true)
            .ok_or_else(|| Error::NotPositiveDefinite("feature covariance".into()))?;
        Ok((e.value, e.gradient))
    }
}

/// REML estimate of one feature's variance multipliers under `design`.
pub fn reml_feature(
    y: &DVector<f64>,
    design: &DMatrix<f64>,
    basis: &CovarianceBasis,
    poly: &Polytope,
) -> Result<FeatureVariance> {
    FeatureRemlContext::new(basis, design, poly)?.fit(y, None)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::linmodel::BasisTerm;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    use rand_distr::StandardNormal;

    fn gauss(rng: &mut ChaCha8Rng, r: usize, c: usize) -> DMatrix<f64> {
        DMatrix::from_fn(r, c, |_, _| rng.sample(StandardNormal))
    }

    fn two_term_basis(m: usize) -> CovarianceBasis {
        CovarianceBasis::new(
            m,
            vec![
                BasisTerm::Identity,
                BasisTerm::Dense {
                    matrix: DMatrix::from_element(m, m, 1.0),
                },
            ],
        )
        .unwrap()
    }

    /// Sample rows from N(0, V) through a Cholesky factor.
    fn sample_rows(rng: &mut ChaCha8Rng, p: usize, v: &DMatrix<f64>) -> DMatrix<f64> {
        let l = v.clone().cholesky().unwrap().l();
        gauss(rng, p, v.nrows()) * l.transpose()
    }

    #[test]
    fn normalize_scalar_matrix() {
        let basis = CovarianceBasis::new(3, vec![BasisTerm::Identity]).unwrap();
        let tau = DVector::from_vec(vec![2.0]);
        let (d2, t) = logdet_normalize(&tau, &basis, &DMatrix::identity(3, 3)).unwrap();
        assert!((d2 - 2.0).abs() < 1e-14);
        assert!((t[0] - 1.0).abs() < 1e-14);
        let (d2b, tb) = logdet_normalize(&t, &basis, &DMatrix::identity(3, 3)).unwrap();
        assert!((d2b - 1.0).abs() < 1e-14 && (tb[0] - t[0]).abs() < 1e-14);
    }

    #[test]
    fn normalize_matches_lu_logdet() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let a = gauss(&mut rng, 3, 3);
        let b = gauss(&mut rng, 3, 3);
        let basis = CovarianceBasis::new(
            3,
            vec![
                BasisTerm::Dense {
                    matrix: &a * a.transpose() + DMatrix::<f64>::identity(3, 3),
                },
                BasisTerm::Dense {
                    matrix: &b * b.transpose(),
                },
            ],
        )
        .unwrap();
        let tau = DVector::from_vec(vec![0.7, 1.9]);
        let (_, t) = logdet_normalize(&tau, &basis, &DMatrix::identity(3, 3)).unwrap();
        let w = basis.build_covariance(&t).unwrap();
        let lu_logdet = w.lu().determinant().abs().ln();
        assert!(lu_logdet.abs() < 1e-10);
    }

    #[test]
    fn single_identity_term_closed_form() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let y2 = gauss(&mut rng, 300, 5) * 1.7;
        let basis = CovarianceBasis::new(5, vec![BasisTerm::Identity]).unwrap();
        let est = reml_working_model(&y2, &DMatrix::zeros(5, 0), &basis, &Polytope::nonnegative(1), None).unwrap();
        let expect = y2.norm_squared() / (300.0 * 5.0);
        assert!((est.tau[0] - 1.0).abs() < 1e-10);
        assert!((est.delta2 - expect).abs() < 1e-10 * expect);
        assert!(est.logdet_residual.abs() < 1e-8);
    }

    fn grid_max(f: impl Fn(f64, f64) -> f64, lo: (f64, f64), hi: (f64, f64), step: f64) -> (f64, f64) {
        let mut best = (f64::NEG_INFINITY, (0.0, 0.0));
        let n1 = ((hi.0 - lo.0) / step).round() as i64;
        let n2 = ((hi.1 - lo.1) / step).round() as i64;
        for i in 0..=n1 {
            for j in 0..=n2 {
                let (a, b) = (lo.0 + i as f64 * step, lo.1 + j as f64 * step);
                let v = f(a, b);
                if v > best.0 {
                    best = (v, (a, b));
                }
            }
        }
        best.1
    }

    #[test]
    fn two_terms_match_grid_search() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let basis = two_term_basis(4);
        let v = basis.build_covariance(&DVector::from_vec(vec![1.0, 0.5])).unwrap();
        let y2 = sample_rows(&mut rng, 200, &v);
        let poly = Polytope::nonnegative(2);
        let est = reml_working_model(&y2, &DMatrix::zeros(4, 0), &basis, &poly, None).unwrap();
        let theta = est.theta();
        let moment = SecondMoment::from_data(&y2);
        let f = |a: f64, b: f64| {
            working_objective(&moment, &DMatrix::zeros(4, 0), &basis, &DVector::from_vec(vec![a, b]))
                .unwrap_or(f64::NEG_INFINITY)
        };
        let coarse = grid_max(&f, (0.01, 0.0), (3.0, 3.0), 1e-2);
        let fine = grid_max(
            &f,
            ((coarse.0 - 0.02).max(1e-3), (coarse.1 - 0.02).max(0.0)),
            (coarse.0 + 0.02, coarse.1 + 0.02),
            1e-3,
        );
        assert!((theta[0] - fine.0).abs() < 2e-3, "{theta} vs {fine:?}");
        assert!((theta[1] - fine.1).abs() < 2e-3, "{theta} vs {fine:?}");
    }

    #[test]
    fn infeasible_start_is_projected() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let basis = two_term_basis(4);
        let y2 = gauss(&mut rng, 100, 4);
        let poly = Polytope::nonnegative(2);
        let start = DVector::from_vec(vec![1.0, -5.0]);
        let est = reml_working_model(&y2, &DMatrix::zeros(4, 0), &basis, &poly, Some(&start)).unwrap();
        let ax = &poly.a_ineq * est.theta();
        assert!(ax.min() >= -1e-8);
    }

    #[test]
    fn working_gradient_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let basis = two_term_basis(5);
        let y2 = gauss(&mut rng, 80, 5);
        let moment = SecondMoment::from_data(&y2);
        let c_perp = gauss(&mut rng, 5, 1);
        for _ in 0..20 {
            let theta = DVector::from_vec(vec![rng.random_range(0.3..2.0), rng.random_range(0.0..1.5)]);
            let (_, g) = working_objective_gradient(&moment, &c_perp, &basis, &theta).unwrap();
            for j in 0..2 {
                let h = 1e-5;
                let mut tp = theta.clone();
                let mut tm = theta.clone();
                tp[j] += h;
                tm[j] -= h;
                let fd = (working_objective(&moment, &c_perp, &basis, &tp).unwrap()
                    - working_objective(&moment, &c_perp, &basis, &tm).unwrap())
                    / (2.0 * h);
                assert!((fd - g[j]).abs() <= 1e-5 * g[j].abs().max(1e-3), "{fd} vs {}", g[j]);
            }
        }
    }

    #[test]
    fn ascent_is_monotone_and_scale_invariant() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let basis = two_term_basis(6);
        let v = basis.build_covariance(&DVector::from_vec(vec![0.5, 0.8])).unwrap();
        let y2 = sample_rows(&mut rng, 150, &v);
        let poly = Polytope::nonnegative(2);
        let start = DVector::from_vec(vec![5.0, 0.0]);
        let est = reml_working_model(&y2, &DMatrix::zeros(6, 0), &basis, &poly, Some(&start)).unwrap();
        for w in est.diagnostics.trace.windows(2) {
            assert!(w[1] >= w[0]);
        }
        for c in [0.1, 10.0] {
            let scaled = reml_working_model(&(&y2 * c), &DMatrix::zeros(6, 0), &basis, &poly, Some(&(&start * (c * c))))
                .unwrap();
            assert!((scaled.delta2 / est.delta2 - c * c).abs() < 1e-9 * c * c);
            assert!((&scaled.tau - &est.tau).amax() < 1e-8);
        }
    }

    #[test]
    fn kl_minimizer_is_average_covariance() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let n = 5;
        let a = gauss(&mut rng, n, 2);
        let basis = CovarianceBasis::new(
            n,
            vec![
                BasisTerm::Identity,
                BasisTerm::Dense { matrix: &a * a.transpose() },
                BasisTerm::DiagonalIndicator {
                    mask: vec![true, false, true, false, false],
                },
            ],
        )
        .unwrap();
        let poly = Polytope::nonnegative(3);
        let p = 500;
        let mut avg = DMatrix::zeros(n, n);
        let mut vbar = DVector::zeros(3);
        for _ in 0..p {
            let v = DVector::from_vec(vec![
                rng.random_range(0.5..2.0),
                rng.random_range(0.0..1.0),
                rng.random_range(0.0..0.7),
            ]);
            avg += basis.build_covariance(&v).unwrap();
            vbar += v;
        }
        avg /= p as f64;
        vbar /= p as f64;
        let moment = SecondMoment { s: avg.clone(), p };
        let est = reml_second_moment(&moment, &DMatrix::zeros(n, 0), &basis, &poly, None).unwrap();
        let fitted = basis.build_covariance(&est.theta()).unwrap();
        assert!((fitted - &avg).amax() < 1e-6);
        assert!(poly.residual(&est.theta()) <= 1e-8);
        assert!((est.theta() - vbar).amax() < 1e-6);
    }

    #[test]
    fn feature_one_component_closed_form() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let n = 10;
        let design = gauss(&mut rng, n, 3);
        let y = DVector::from_fn(n, |_, _| rng.sample::<f64, _>(StandardNormal) * 2.0);
        let basis = CovarianceBasis::new(n, vec![BasisTerm::Identity]).unwrap();
        let fit = reml_feature(&y, &design, &basis, &Polytope::nonnegative(1)).unwrap();
        let q = linalg::null_basis(&design).unwrap();
        let expect = (q.transpose() * &y).norm_squared() / (n - 3) as f64;
        assert!((fit.v[0] - expect).abs() < 1e-10 * expect);
    }

    #[test]
    fn feature_two_components_match_grid() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let n = 8;
        let labels: Vec<String> = (0..n).map(|i| format!("m{}", i / 2)).collect();
        let basis = CovarianceBasis::new(n, vec![BasisTerm::Identity, BasisTerm::BlockPartition { labels }]).unwrap();
        let design = DMatrix::from_fn(n, 1, |_, _| 1.0);
        let v = basis.build_covariance(&DVector::from_vec(vec![1.0, 1.0])).unwrap();
        let y = sample_rows(&mut rng, 1, &v).transpose().column(0).into_owned();
        let poly = Polytope::nonnegative(2);
        let ctx = FeatureRemlContext::new(&basis, &design, &poly).unwrap();
        let fit = ctx.fit(&y, None).unwrap();
        let f = |a: f64, b: f64| {
            ctx.objective_gradient(&y, &DVector::from_vec(vec![a, b]))
                .map(|r| r.0)
                .unwrap_or(f64::NEG_INFINITY)
        };
        let coarse = grid_max(&f, (0.01, 0.0), (6.0, 6.0), 1e-2);
        let fine = grid_max(
            &f,
            ((coarse.0 - 0.02).max(1e-3), (coarse.1 - 0.02).max(0.0)),
            (coarse.0 + 0.02, coarse.1 + 0.02),
            1e-3,
        );
        assert!((fit.v[0] - fine.0).abs() < 2e-3, "{} vs {fine:?}", fit.v);
        assert!((fit.v[1] - fine.1).abs() < 2e-3, "{} vs {fine:?}", fit.v);
    }

    #[test]
    fn feature_gradient_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(10);
        let n = 9;
        let labels: Vec<String> = (0..n).map(|i| format!("m{}", i / 3)).collect();
        let basis = CovarianceBasis::new(
            n,
            vec![
                BasisTerm::Identity,
                BasisTerm::BlockPartition { labels },
                BasisTerm::DiagonalIndicator {
                    mask: (0..n).map(|i| i % 3 == 0).collect(),
                },
            ],
        )
        .unwrap();
        let design = gauss(&mut rng, n, 2);
        let y = DVector::from_fn(n, |_, _| rng.sample(StandardNormal));
        let ctx = FeatureRemlContext::new(&basis, &design, &Polytope::nonnegative(3)).unwrap();
        for _ in 0..20 {
            let v = DVector::from_fn(3, |_, _| rng.random_range(0.2..1.5));
            let (_, g) = ctx.objective_gradient(&y, &v).unwrap();
            for j in 0..3 {
                let h = 1e-5;
                let mut vp = v.clone();
                let mut vm = v.clone();
                vp[j] += h;
                vm[j] -= h;
                let fd = (ctx.objective_gradient(&y, &vp).unwrap().0 - ctx.objective_gradient(&y, &vm).unwrap().0)
                    / (2.0 * h);
                assert!((fd - g[j]).abs() <= 1e-5 * g[j].abs().max(1e-3), "{fd} vs {}", g[j]);
            }
        }
    }

    #[test]
    fn zero_residual_hits_floor() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let n = 6;
        let design = gauss(&mut rng, n, 2);
        let y = &design * DVector::from_vec(vec![1.0, -2.0]);
        let basis = CovarianceBasis::new(n, vec![BasisTerm::Identity]).unwrap();
        let poly = Polytope::nonnegative(1).with_bounds(f64::INFINITY, 1e-6);
        let fit = reml_feature(&y, &design, &basis, &poly).unwrap();
        assert!(fit.diagnostics.boundary);
        assert!((fit.v[0] - 1e-6).abs() < 1e-9);
    }
}
