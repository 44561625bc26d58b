//! The constraint cone `{x : A_eq x = 0, A_ineq x >= 0}` and its compactified
//! version with a norm ball and an eigenvalue floor.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg;

/// Tolerance used when deciding whether an inequality is active.
pub const ACTIVE_TOL: f64 = 1e-6;

#[derive(Clone, Debug, PartialEq)]
pub struct Polytope {
    pub a_eq: DMatrix<f64>,
    pub a_ineq: DMatrix<f64>,
    /// Radius of the norm ball; `f64::INFINITY` for none.
    pub norm_bound: f64,
    /// Lower bound on the smallest eigenvalue of `V(x)`.
    pub pd_floor: f64,
}

pub const DEFAULT_PD_FLOOR: f64 = 1e-8;

#[derive(Serialize, Deserialize)]
struct PolytopeJson {
    dim: usize,
    #[serde(default)]
    a_eq: Vec<Vec<f64>>,
    #[serde(default)]
    a_ineq: Vec<Vec<f64>>,
    #[serde(default)]
    norm_bound: Option<f64>,
    #[serde(default)]
    pd_floor: Option<f64>,
}

impl Serialize for Polytope {
    fn serialize<S: serde::Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        let rows = |m: &DMatrix<f64>| -> Vec<Vec<f64>> {
            (0..m.nrows()).map(|i| m.row(i).iter().copied().collect()).collect()
        };
        PolytopeJson {
            dim: self.dim(),
            a_eq: rows(&self.a_eq),
            a_ineq: rows(&self.a_ineq),
            norm_bound: self.norm_bound.is_finite().then_some(self.norm_bound),
            pd_floor: Some(self.pd_floor),
        }
        .serialize(s)
    }
}

impl<'de> Deserialize<'de> for Polytope {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        use serde::de::Error as _;
        let j = PolytopeJson::deserialize(d)?;
        let a_eq = super::basis::rows::from_rows(&j.a_eq, Some(j.dim)).map_err(D::Error::custom)?;
        let a_ineq = super::basis::rows::from_rows(&j.a_ineq, Some(j.dim)).map_err(D::Error::custom)?;
        if a_eq.ncols() != j.dim || a_ineq.ncols() != j.dim {
            return Err(D::Error::custom("constraint rows do not match dim"));
        }
        Polytope::new(
            a_eq,
            a_ineq,
            j.norm_bound.unwrap_or(f64::INFINITY),
            j.pd_floor.unwrap_or(DEFAULT_PD_FLOOR),
        )
        .map_err(D::Error::custom)
    }
}

impl Polytope {
    pub fn new(a_eq: DMatrix<f64>, a_ineq: DMatrix<f64>, norm_bound: f64, pd_floor: f64) -> Result<Self> {
        if a_eq.ncols() != a_ineq.ncols() {
            return Err(Error::DimensionMismatch(format!(
                "A_eq has {} columns, A_ineq has {}",
                a_eq.ncols(),
                a_ineq.ncols()
            )));
        }
        if !(norm_bound > 0.0) || !(pd_floor >= 0.0) || !pd_floor.is_finite() {
            return Err(Error::InvalidInput(format!(
                "norm_bound must be positive and pd_floor nonnegative (got {norm_bound}, {pd_floor})"
            )));
        }
        if a_eq.iter().chain(a_ineq.iter()).any(|v| !v.is_finite()) {
            return Err(Error::InvalidInput("constraint matrices contain non-finite entries".into()));
        }
        Ok(Self {
            a_eq,
            a_ineq,
            norm_bound,
            pd_floor,
        })
    }

    /// No constraints beyond the defaults.
    pub fn unconstrained(dim: usize) -> Self {
        Self {
            a_eq: DMatrix::zeros(0, dim),
            a_ineq: DMatrix::zeros(0, dim),
            norm_bound: f64::INFINITY,
            pd_floor: DEFAULT_PD_FLOOR,
        }
    }

    /// Every coordinate nonnegative.
    pub fn nonnegative(dim: usize) -> Self {
        Self {
            a_eq: DMatrix::zeros(0, dim),
            a_ineq: DMatrix::identity(dim, dim),
            norm_bound: f64::INFINITY,
            pd_floor: DEFAULT_PD_FLOOR,
        }
    }

    pub fn dim(&self) -> usize {
        self.a_eq.ncols()
    }

    pub fn with_bounds(mut self, norm_bound: f64, pd_floor: f64) -> Self {
        self.norm_bound = norm_bound;
        self.pd_floor = pd_floor;
        self
    }

    /// Largest violation of the linear constraints and the norm bound.
    pub fn residual(&self, x: &DVector<f64>) -> f64 {
        let mut r: f64 = 0.0;
        if self.a_eq.nrows() > 0 {
            r = r.max((&self.a_eq * x).amax());
        }
        if self.a_ineq.nrows() > 0 {
            r = r.max((-(&self.a_ineq * x).min()).max(0.0));
        }
        if self.norm_bound.is_finite() {
            r = r.max(x.norm() - self.norm_bound);
        }
        r
    }

    pub fn is_feasible(&self, x: &DVector<f64>, tol: f64) -> bool {
        self.residual(x) <= tol
    }

    /// Indices of inequality rows with `|a_i x| <= tol * scale`.
    pub fn active_set(&self, x: &DVector<f64>, tol: f64) -> Vec<usize> {
        let scale = x.norm().max(1e-300);
        let ax = &self.a_ineq * x;
        (0..ax.len())
            .filter(|&i| ax[i].abs() <= tol * scale * self.a_ineq.row(i).norm().max(1.0))
            .collect()
    }

    /// Same constraints with parameters rescaled by `1/s`.
    pub(crate) fn scaled(&self, s: f64) -> Self {
        Self {
            a_eq: self.a_eq.clone(),
            a_ineq: self.a_ineq.clone(),
            norm_bound: self.norm_bound / s,
            pd_floor: self.pd_floor / s,
        }
    }

    /// Euclidean projection onto the cone intersected with the norm ball.
    /// For a cone, projecting onto the cone and then radially onto the ball is
    /// the exact projection onto the intersection.
    pub fn project(&self, x: &DVector<f64>) -> Result<DVector<f64>> {
        let b = self.dim();
        if x.len() != b {
            return Err(Error::DimensionMismatch(format!("point has length {}, polytope has dim {b}", x.len())));
        }
        let mut y = if self.a_eq.nrows() == 0 && self.a_ineq.nrows() == 0 {
            x.clone()
        } else {
            cone_qp(&DMatrix::identity(b, b), x, &self.a_eq, &self.a_ineq)?
        };
        let nrm = y.norm();
        if self.norm_bound.is_finite() && nrm > self.norm_bound {
            y *= self.norm_bound / nrm;
        }
        Ok(y)
    }

    /// Projection of `z` onto the cone in the metric `h` (SPD), scaled into
    /// the ball when needed.
    pub fn project_metric(&self, z: &DVector<f64>, h: &DMatrix<f64>) -> Result<DVector<f64>> {
        let mut y = cone_qp(h, &(h * z), &self.a_eq, &self.a_ineq)?;
        let nrm = y.norm();
        if self.norm_bound.is_finite() && nrm > self.norm_bound {
            y *= self.norm_bound / nrm;
        }
        Ok(y)
    }

    /// Verify the cone has a nontrivial point with `V(x)` positive definite,
    /// given a function returning the smallest eigenvalue of `V(x)`.
    pub fn check_nonempty(&self, min_eig: impl Fn(&DVector<f64>) -> f64, probe: &DVector<f64>) -> Result<DVector<f64>> {
        let x = self.project(probe)?;
        if x.norm() == 0.0 || min_eig(&x) <= 0.0 {
            return Err(Error::InfeasiblePolytope(
                "no point of the cone gives a positive definite covariance".into(),
            ));
        }
        Ok(x)
    }
}

/// `polytope_project` as a free function.
pub fn polytope_project(x: &DVector<f64>, poly: &Polytope) -> Result<DVector<f64>> {
    poly.project(x)
}

/// Solve `min 1/2 x'Hx - c'x` subject to `A_eq x = 0`, `A_ineq x >= 0` with a
/// primal active-set method started at the origin (always feasible for a cone).
pub fn cone_qp(
    h: &DMatrix<f64>,
    c: &DVector<f64>,
    a_eq: &DMatrix<f64>,
    a_ineq: &DMatrix<f64>,
) -> Result<DVector<f64>> {
    let b = c.len();
    let n_ineq = a_ineq.nrows();
    let scale = h.amax().max(c.amax()).max(1e-300);
    let mut x = DVector::<f64>::zeros(b);
    let mut working: Vec<usize> = Vec::new();
    let max_iter = 50 * (b + n_ineq + 1) * (n_ineq + 1);

    for _ in 0..max_iter {
        let aw = stack_rows(a_eq, a_ineq, &working, b);
        // gradient of the objective at x
        let grad = h * &x - c;
        let p = if aw.nrows() == 0 {
            linalg::spd_solve_vec(h, &(-&grad), "QP metric")?
        } else {
            match linalg::null_basis(&aw.transpose()) {
                Ok(z) => {
                    let hz = z.transpose() * h * &z;
                    let rhs = -(z.transpose() * &grad);
                    &z * linalg::spd_solve_vec(&hz, &rhs, "reduced QP metric")?
                }
                Err(Error::EmptyNullSpace(_)) => DVector::zeros(b),
                Err(e) => return Err(e),
            }
        };

        if p.amax() <= 1e-13 * (1.0 + x.amax()) {
            if working.is_empty() {
                return Ok(x);
            }
            // multipliers from A_W' lambda = grad (least squares)
            let awt = aw.transpose();
            let svd = awt.svd(true, true);
            let lambda = svd
                .solve(&grad, 1e-12 * svd.singular_values.max().max(1e-300))
                .map_err(|e| Error::InvalidInput(format!("multiplier solve failed: {e}")))?;
            let n_eq = a_eq.nrows();
            let mut worst: Option<(usize, f64)> = None;
            for w in 0..working.len() {
                let l = lambda[n_eq + w];
                if l < -1e-12 * scale && worst.is_none_or(|(_, v)| l < v) {
                    worst = Some((w, l));
                }
            }
            match worst {
                None => return Ok(x),
                Some((w, _)) => {
                    working.remove(w);
                }
            }
        } else {
            let mut alpha = 1.0;
            let mut block = None;
            for i in 0..n_ineq {
                if working.contains(&i) {
                    continue;
                }
                let ai = a_ineq.row(i);
                let ap = (ai * &p)[0];
                if ap < -1e-14 * ai.norm() * p.norm() {
                    let ax = (ai * &x)[0];
                    let step = (-ax / ap).max(0.0);
                    if step < alpha {
                        alpha = step;
                        block = Some(i);
                    }
                }
            }
            x += &p * alpha;
            if let Some(i) = block {
                working.push(i);
            }
        }
    }
    Err(Error::InfeasiblePolytope("active-set projection did not terminate".into()))
}

fn stack_rows(a_eq: &DMatrix<f64>, a_ineq: &DMatrix<f64>, working: &[usize], b: usize) -> DMatrix<f64> {
    let rows = a_eq.nrows() + working.len();
    let mut m = DMatrix::zeros(rows, b);
    for i in 0..a_eq.nrows() {
        m.row_mut(i).copy_from(&a_eq.row(i));
    }
    for (w, &i) in working.iter().enumerate() {
        m.row_mut(a_eq.nrows() + w).copy_from(&a_ineq.row(i));
    }
    m
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_cone(rng: &mut ChaCha8Rng) -> Polytope {
        let a_ineq = DMatrix::from_fn(3, 3, |i, j| if i == j { 1.0 } else { rng.random_range(-0.4..0.4) });
        Polytope::new(DMatrix::zeros(0, 3), a_ineq, f64::INFINITY, 0.0).unwrap()
    }

    #[test]
    fn feasible_point_unchanged() {
        let poly = Polytope::nonnegative(3);
        let x = DVector::from_vec(vec![0.5, 1.0, 2.0]);
        assert_eq!(poly.project(&x).unwrap(), x);
    }

    #[test]
    fn half_line_clamp() {
        let poly = Polytope::nonnegative(1);
        let y = poly.project(&DVector::from_vec(vec![-2.0])).unwrap();
        assert_eq!(y[0], 0.0);
    }

    #[test]
    fn equality_constraint() {
        let poly = Polytope::new(
            DMatrix::from_row_slice(1, 2, &[1.0, -1.0]),
            DMatrix::zeros(0, 2),
            f64::INFINITY,
            0.0,
        )
        .unwrap();
        let y = poly.project(&DVector::from_vec(vec![3.0, 1.0])).unwrap();
        assert!((y[0] - 2.0).abs() < 1e-12 && (y[1] - 2.0).abs() < 1e-12);
    }

    #[test]
    fn matches_grid_search() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for _ in 0..3 {
            let poly = random_cone(&mut rng);
            let x = DVector::from_fn(3, |_, _| rng.random_range(-1.0..1.0));
            let y = poly.project(&x).unwrap();
            assert!(poly.residual(&y) <= 1e-10);
            // coarse then fine grid over the feasible set
            let search = |center: &DVector<f64>, half: f64, step: f64| {
                let steps = (2.0 * half / step).round() as i64;
                let mut best = (f64::INFINITY, center.clone());
                for i in 0..=steps {
                    for j in 0..=steps {
                        for k in 0..=steps {
                            let z = DVector::from_vec(vec![
                                center[0] - half + i as f64 * step,
                                center[1] - half + j as f64 * step,
                                center[2] - half + k as f64 * step,
                            ]);
                            if poly.residual(&z) > 0.0 {
                                continue;
                            }
                            let d = (&z - &x).norm();
                            if d < best.0 {
                                best = (d, z);
                            }
                        }
                    }
                }
                best
            };
            let coarse = search(&DVector::zeros(3), 1.5, 0.02);
            let fine = search(&coarse.1, 0.03, 1e-3);
            let dist_qp = (&y - &x).norm();
            assert!(dist_qp <= fine.0 + 1e-12, "qp {dist_qp} grid {}", fine.0);
            assert!(fine.0 - dist_qp < 2e-3, "qp {dist_qp} grid {}", fine.0);
            // strong convexity bounds how far the grid optimum can sit from the projection
            let slack = (fine.0 * fine.0 - dist_qp * dist_qp).max(0.0).sqrt();
            assert!((&fine.1 - &y).norm() <= slack + 1e-9);
        }
    }

    #[test]
    fn ball_scaling() {
        let poly = Polytope::nonnegative(2).with_bounds(1.0, 0.0);
        let y = poly.project(&DVector::from_vec(vec![3.0, -1.0])).unwrap();
        assert!((y[0] - 1.0).abs() < 1e-12 && y[1].abs() < 1e-12, "{y}");
    }

    #[test]
    fn json_roundtrip() {
        let poly = Polytope::nonnegative(2);
        let s = serde_json::to_string(&poly).unwrap();
        assert!(s.contains("\"norm_bound\":null"));
        let back: Polytope = serde_json::from_str(&s).unwrap();
        assert_eq!(back, poly);
    }

    #[test]
    fn idempotent_and_nonexpansive() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for _ in 0..50 {
            let poly = random_cone(&mut rng);
            let a = DVector::from_fn(3, |_, _| rng.random_range(-2.0..2.0));
            let b = DVector::from_fn(3, |_, _| rng.random_range(-2.0..2.0));
            let pa = poly.project(&a).unwrap();
            let pb = poly.project(&b).unwrap();
            assert!((poly.project(&pa).unwrap() - &pa).amax() < 1e-12);
            assert!((&pa - &pb).norm() <= (&a - &b).norm() + 1e-12);
        }
    }
}
