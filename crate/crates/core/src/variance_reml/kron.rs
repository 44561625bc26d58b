//! Per-feature likelihood when every block carries the same small covariance
//! `M`, so that `V = I ⊗ M` up to a permutation. Everything reduces to
//! `s × s` and `q × q` sufficient statistics.

use nalgebra::{Cholesky, DMatrix, DVector, Dyn};

use super::{max_step_from, shifted_cholesky, Evaluation, FeatureObjective, GlsSummary, Objective};
use crate::linalg;
use crate::linmodel::BlockBasis;

#[derive(Clone, Debug)]
pub(super) struct KronDesign {
    s: usize,
    blocks: usize,
    terms: Vec<DMatrix<f64>>,
    indices: Vec<Vec<usize>>,
    /// `Σ_b D_b[r]ᵀ D_b[c]` at `r * s + c`.
    kdd: Vec<DMatrix<f64>>,
    d_blocks: Vec<DMatrix<f64>>,
}

impl KronDesign {
    /// `None` unless all blocks share size and term matrices.
    pub(super) fn detect(basis: &BlockBasis, d_blocks: &[DMatrix<f64>]) -> Option<Self> {
        let first = basis.blocks.first()?;
        let s = first.indices.len();
        if basis.blocks.iter().any(|b| b.indices.len() != s || b.terms != first.terms) {
            return None;
        }
        let q = d_blocks[0].ncols();
        let mut kdd = vec![DMatrix::zeros(q, q); s * s];
        for d in d_blocks {
            for r in 0..s {
                for c in 0..s {
                    kdd[r * s + c] += d.row(r).transpose() * d.row(c);
                }
            }
        }
        Some(Self {
            s,
            blocks: basis.blocks.len(),
            terms: first.terms.clone(),
            indices: basis.blocks.iter().map(|b| b.indices.clone()).collect(),
            kdd,
            d_blocks: d_blocks.to_vec(),
        })
    }

    pub(super) fn problem(&self, y: &DVector<f64>, dof: f64) -> KronProblem<'_> {
        let s = self.s;
        let q = self.d_blocks[0].ncols();
        let mut syy = DMatrix::zeros(s, s);
        let mut kdy = vec![DVector::zeros(q); s * s];
        for (idx, d) in self.indices.iter().zip(&self.d_blocks) {
            for r in 0..s {
                for c in 0..s {
                    let yc = y[idx[c]];
                    syy[(r, c)] += y[idx[r]] * yc;
                    kdy[r * s + c].axpy(yc, &d.row(r).transpose(), 1.0);
                }
            }
        }
        KronProblem { design: self, syy, kdy, dof }
    }

    fn mix(&self, a: &DMatrix<f64>) -> DMatrix<f64> {
        let q = self.kdd[0].nrows();
        let mut out = DMatrix::zeros(q, q);
        for r in 0..self.s {
            for c in 0..self.s {
                let w = a[(r, c)];
                if w != 0.0 {
                    for (o, k) in out.as_mut_slice().iter_mut().zip(self.kdd[r * self.s + c].as_slice()) {
                        *o += w * k;
                    }
                }
            }
        }
        out
    }
}

pub(super) struct KronProblem<'a> {
    design: &'a KronDesign,
    syy: DMatrix<f64>,
    kdy: Vec<DVector<f64>>,
    dof: f64,
}

struct KronState {
    minv: DMatrix<f64>,
    g_chol: Cholesky<f64, Dyn>,
    beta: DVector<f64>,
    /// `Σ_b e_b e_bᵀ` for the GLS residuals.
    e: DMatrix<f64>,
    logdet: f64,
}

impl KronProblem<'_> {
    fn small(&self, x: &DVector<f64>) -> DMatrix<f64> {
        let s = self.design.s;
        let mut m = DMatrix::zeros(s, s);
        for (t, xj) in self.design.terms.iter().zip(x.iter()) {
            if *xj != 0.0 {
                for (o, v) in m.as_mut_slice().iter_mut().zip(t.as_slice()) {
                    *o += xj * v;
                }
            }
        }
        m
    }

    fn mixv(&self, a: &DMatrix<f64>) -> DVector<f64> {
        let s = self.design.s;
        let mut out = DVector::zeros(self.kdy[0].len());
        for r in 0..s {
            for c in 0..s {
                let w = a[(r, c)];
                if w != 0.0 {
                    out.axpy(w, &self.kdy[r * s + c], 1.0);
                }
            }
        }
        out
    }

    fn state(&self, x: &DVector<f64>) -> Option<KronState> {
        let s = self.design.s;
        let ch = Cholesky::new(self.small(x))?;
        let mut logdet = self.design.blocks as f64 * linalg::logdet_from_cholesky(&ch);
        let minv = ch.inverse();
        let g = linalg::symmetrize(&self.design.mix(&minv));
        let g_chol = Cholesky::new(g)?;
        logdet += linalg::logdet_from_cholesky(&g_chol);
        let beta = g_chol.solve(&self.mixv(&minv));
        let e = DMatrix::from_fn(s, s, |r, c| {
            self.syy[(r, c)] - beta.dot(&self.kdy[r * s + c]) - beta.dot(&self.kdy[c * s + r])
                + beta.dot(&(&self.design.kdd[r * s + c] * &beta))
        });
        Some(KronState {
            minv,
            g_chol,
            beta,
            e: linalg::symmetrize(&e),
            logdet,
        })
    }
}

impl Objective for KronProblem<'_> {
    fn evaluate(&self, x: &DVector<f64>, derivs: bool) -> Option<Evaluation> {
        let st = self.state(x)?;
        let ypy = st.minv.dot(&st.e);
        let value = (-st.logdet - ypy) / self.dof;
        let b = x.len();
        if !value.is_finite() {
            return None;
        }
        if !derivs {
            return Some(Evaluation {
                value,
                gradient: DVector::zeros(b),
                curvature: None,
            });
        }
        let nb = self.design.blocks as f64;
        let g_inv = st.g_chol.inverse();
        let mt: Vec<DMatrix<f64>> = self.design.terms.iter().map(|t| &st.minv * t).collect();
        let a: Vec<DMatrix<f64>> = mt.iter().map(|m| m * &st.minv).collect();
        let h: Vec<DMatrix<f64>> = a.iter().map(|a| self.design.mix(a)).collect();
        let mut gradient = DVector::zeros(b);
        for j in 0..b {
            let tr_pb = nb * mt[j].trace() - linalg::trace_product(&g_inv, &h[j]);
            gradient[j] = (-tr_pb + a[j].dot(&st.e)) / self.dof;
        }
        let z: Vec<DVector<f64>> = (0..b).map(|j| self.mixv(&a[j]) - &h[j] * &st.beta).collect();
        let gz: Vec<DVector<f64>> = z.iter().map(|z| &g_inv * z).collect();
        let mut ai = DMatrix::zeros(b, b);
        for i in 0..b {
            for j in i..b {
                let c = &mt[i] * &a[j];
                let v = (c.dot(&st.e) + c.transpose().dot(&st.e)) * 0.5 - z[i].dot(&gz[j]);
                ai[(i, j)] = v / self.dof;
                ai[(j, i)] = ai[(i, j)];
            }
        }
        let ev = linalg::sym_eigenvalues_desc(&ai);
        let usable = ev[0] > 0.0 && ev[b - 1] > 1e-8 * ev[0];
        let curvature = if usable {
            ai
        } else {
            let gh: Vec<DMatrix<f64>> = h.iter().map(|h| &g_inv * h).collect();
            let mut f = DMatrix::zeros(b, b);
            for i in 0..b {
                for j in i..b {
                    let c = &mt[i] * &a[j];
                    let cs = linalg::symmetrize(&c);
                    let v = nb * mt[i].transpose().dot(&mt[j]) - 2.0 * linalg::trace_product(&g_inv, &self.design.mix(&cs))
                        + gh[i].transpose().dot(&gh[j]);
                    f[(i, j)] = v / self.dof;
                    f[(j, i)] = f[(i, j)];
                }
            }
            f
        };
        Some(Evaluation {
            value,
            gradient,
            curvature: Some(curvature),
        })
    }

    fn above(&self, x: &DVector<f64>, level: f64) -> bool {
        shifted_cholesky(&self.small(x), level).is_some()
    }

    fn max_step(&self, x: &DVector<f64>, d: &DVector<f64>, level: f64) -> f64 {
        match shifted_cholesky(&self.small(x), level) {
            Some(ch) => max_step_from(&ch, &self.small(d)),
            None => 0.0,
        }
    }
}

impl FeatureObjective for KronProblem<'_> {
    fn gls_summary(&self, x: &DVector<f64>) -> Option<GlsSummary> {
        let st = self.state(x)?;
        Some(GlsSummary {
            ypy: st.minv.dot(&st.e),
            cov: linalg::symmetrize(&st.g_chol.inverse()),
            coef: st.beta,
            logdet: st.logdet,
        })
    }
}
