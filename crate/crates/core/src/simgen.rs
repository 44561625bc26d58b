//! Seeded simulation of correlated multi-tissue and twin-longitudinal data
//! with full ground truth.

use nalgebra::{DMatrix, DVector};
use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Gamma, StandardNormal, StudentT};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg;
use crate::linmodel::{BasisTerm, CovarianceBasis, DesignMatrices, FeatureMatrix, Polytope};

/// Means of the per-gene variance constants `v1², φ2, v2², φ3, ρ3, σ²`.
pub const GAMMA_MEANS: [f64; 6] = [0.8, 1.25, 0.4, 0.75, 1.0, 0.2];
pub const GAMMA_CV: f64 = 0.2;
pub const TARGET_R2: f64 = 0.30;
const CALIBRATION_SEED: u64 = 0x5eed_ca1b;
const CALIBRATION_DRAWS: usize = 400;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Design {
    /// Individuals by three tissues.
    MultiTissue,
    /// Mothers by two twins by two ages.
    Twin,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct SimConfig {
    pub design: Design,
    pub p: usize,
    /// Individuals (multi-tissue) or mothers (twin).
    pub n_individuals: usize,
    pub n_tissues: usize,
    pub n_treated: usize,
    pub k: usize,
    pub pi: Vec<f64>,
    pub eta: Vec<f64>,
    pub beta_sparsity: f64,
    pub beta_sd: f64,
    /// Strength of the covariate-to-confounder path; calibrated when absent.
    pub alpha: Option<f64>,
    /// Degrees of freedom of the residual t distribution; infinite (`null`
    /// in JSON) means Gaussian.
    #[serde(with = "infinite_as_null")]
    pub residual_df: f64,
    pub gamma_means: Vec<f64>,
    pub gamma_cv: f64,
    /// Replace every gene covariance by the identity.
    pub independent_noise: bool,
    pub seed: u64,
}

mod infinite_as_null {
    use serde::{Deserialize, Deserializer, Serializer};

    pub fn serialize<S: Serializer>(v: &f64, s: S) -> Result<S::Ok, S::Error> {
        if v.is_finite() {
            s.serialize_f64(*v)
        } else {
            s.serialize_none()
        }
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<f64, D::Error> {
        Ok(Option::<f64>::deserialize(d)?.unwrap_or(f64::INFINITY))
    }
}

/// Target factor strengths, geometric from `hi` down to `lo`.
pub fn geometric_gammas(k: usize, hi: f64, lo: f64) -> Vec<f64> {
    if k == 1 {
        return vec![hi];
    }
    (0..k).map(|i| hi * (lo / hi).powf(i as f64 / (k - 1) as f64)).collect()
}

/// Slab sds giving expected strengths `gammas` when loadings are
/// `π δ0 + (1-π) N(0, η²)` and the projected confounders have whitened
/// Gram `dof · I`.
pub fn slab_sds(gammas: &[f64], pi: &[f64], dof: usize) -> Vec<f64> {
    gammas.iter().zip(pi).map(|(g, p)| (g / (dof as f64 * (1.0 - p))).sqrt()).collect()
}

impl SimConfig {
    pub fn multitissue(seed: u64) -> Self {
        let n_individuals = 50;
        let k = 10;
        let n = 3 * n_individuals;
        let pi = vec![0.3; k];
        let eta = slab_sds(&geometric_gammas(k, n as f64, 3.0), &pi, n - 4);
        Self {
            design: Design::MultiTissue,
            p: 15000,
            n_individuals,
            n_tissues: 3,
            n_treated: 25,
            k,
            pi,
            eta,
            beta_sparsity: 0.8,
            beta_sd: 0.4,
            alpha: None,
            residual_df: 4.0,
            gamma_means: GAMMA_MEANS.to_vec(),
            gamma_cv: GAMMA_CV,
            independent_noise: false,
            seed,
        }
    }

    pub fn twin(seed: u64) -> Self {
        let n_mothers = 15;
        let k = 2;
        let n = 4 * n_mothers;
        let pi = vec![0.3; k];
        let eta = slab_sds(&geometric_gammas(k, n as f64, 10.0), &pi, n - 3);
        Self {
            design: Design::Twin,
            p: 5000,
            n_individuals: n_mothers,
            n_tissues: 0,
            n_treated: n_mothers,
            k,
            pi,
            eta,
            beta_sparsity: 0.8,
            beta_sd: 0.4,
            alpha: None,
            residual_df: f64::INFINITY,
            gamma_means: vec![0.2, 0.1, 0.1, 0.1, 0.6, 0.75],
            gamma_cv: GAMMA_CV,
            independent_noise: false,
            seed,
        }
    }

    /// Named presets: `paper-4.1` and `paper-5-twin`.
    pub fn preset(name: &str, seed: u64) -> Result<Self> {
        match name {
            "paper-4.1" => Ok(Self::multitissue(seed)),
            "paper-5-twin" => Ok(Self::twin(seed)),
            _ => Err(Error::InvalidInput(format!("unknown preset '{name}'"))),
        }
    }

    pub fn n(&self) -> usize {
        match self.design {
            Design::MultiTissue => self.n_individuals * self.n_tissues,
            Design::Twin => self.n_individuals * 4,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidInput(m));
        if self.design == Design::MultiTissue && self.n_tissues != 3 {
            return Err(Error::UnsupportedTissueCount(self.n_tissues));
        }
        if self.pi.len() != self.k || self.eta.len() != self.k {
            return bad(format!("pi and eta need {} entries", self.k));
        }
        if self.pi.iter().any(|p| !(0.0..=1.0).contains(p)) {
            return bad("pi must lie in [0, 1]".into());
        }
        if self.eta.iter().any(|e| *e <= 0.0 || !e.is_finite()) {
            return bad("eta must be positive".into());
        }
        if !(0.0..=1.0).contains(&self.beta_sparsity) || self.beta_sd < 0.0 {
            return bad("invalid effect distribution".into());
        }
        if self.residual_df <= 2.0 {
            return bad("residual_df must exceed 2".into());
        }
        if self.gamma_means.len() != 6 || self.gamma_means.iter().any(|m| *m <= 0.0) || self.gamma_cv <= 0.0 {
            return bad("six positive Gamma means and a positive cv are required".into());
        }
        let units = match self.design {
            Design::MultiTissue => self.n_individuals,
            Design::Twin => 2 * self.n_individuals,
        };
        if self.n_treated == 0 || self.n_treated >= units {
            return bad(format!("n_treated must lie in 1..{units}"));
        }
        if self.p == 0 || self.k + 5 >= self.n() {
            return bad("p must be positive and K well below n".into());
        }
        Ok(())
    }
}

/// Per-tissue pair basis `I ⊗ a_rs a_rsᵀ` for `r ≤ s`, ordered
/// (11, 12, 13, 22, 23, 33), with the diagonal-dominance polytope.
pub fn build_tissue_basis(n_individuals: usize, n_tissues: usize) -> Result<(CovarianceBasis, Polytope)> {
    if n_tissues != 3 {
        return Err(Error::UnsupportedTissueCount(n_tissues));
    }
    let pairs = tissue_pairs();
    let terms = pairs
        .iter()
        .map(|&(r, s)| {
            let mut a = DVector::zeros(3);
            a[r] = 1.0;
            a[s] = 1.0;
            BasisTerm::Kronecker {
                blocks: n_individuals,
                small: &a * a.transpose(),
            }
        })
        .collect();
    let basis = CovarianceBasis::new(3 * n_individuals, terms)?;
    let mut ineq = DMatrix::zeros(6, 6);
    for (row, &(r, s)) in [(0, 1), (0, 2), (1, 2)].iter().enumerate() {
        ineq[(row, pair_index(r, s))] = 1.0;
    }
    for t in 0..3 {
        for (j, &(r, s)) in pairs.iter().enumerate() {
            if r == t || s == t {
                ineq[(3 + t, j)] = 1.0;
            }
        }
    }
    let poly = Polytope::new(DMatrix::zeros(0, 6), ineq, f64::INFINITY, crate::linmodel::DEFAULT_PD_FLOOR)?;
    Ok((basis, poly))
}

fn tissue_pairs() -> [(usize, usize); 6] {
    [(0, 0), (0, 1), (0, 2), (1, 1), (1, 2), (2, 2)]
}

fn pair_index(r: usize, s: usize) -> usize {
    tissue_pairs().iter().position(|&q| q == (r.min(s), r.max(s))).unwrap()
}

/// Multipliers reproducing a 3×3 tissue covariance.
pub fn tissue_tau(m: &DMatrix<f64>) -> DVector<f64> {
    let mut tau = DVector::zeros(6);
    for (j, &(r, s)) in tissue_pairs().iter().enumerate() {
        tau[j] = if r == s {
            m[(r, r)] - (0..3).filter(|&t| t != r).map(|t| m[(r, t)]).sum::<f64>()
        } else {
            m[(r, s)]
        };
    }
    tau
}

fn twin_blocks() -> Vec<DMatrix<f64>> {
    let a0 = DVector::from_vec(vec![1.0, 0.0, 1.0, 0.0]);
    let a18 = DVector::from_vec(vec![0.0, 1.0, 0.0, 1.0]);
    let mut twin = DMatrix::zeros(4, 4);
    twin.view_mut((0, 0), (2, 2)).fill(1.0);
    twin.view_mut((2, 2), (2, 2)).fill(1.0);
    vec![
        DMatrix::from_element(4, 4, 1.0),
        twin,
        &a0 * a0.transpose(),
        &a18 * a18.transpose(),
        DMatrix::from_diagonal(&a0),
        DMatrix::from_diagonal(&a18),
    ]
}

/// Twin-longitudinal basis for `n_mothers` mothers with samples ordered
/// (twin 1 birth, twin 1 18m, twin 2 birth, twin 2 18m). Multipliers are
/// (v_α, v_η, v_φ0, v_φ18, v_0, v_18).
pub fn build_twin_basis(n_mothers: usize) -> Result<(CovarianceBasis, Polytope)> {
    let terms = twin_blocks()
        .into_iter()
        .map(|small| BasisTerm::Kronecker { blocks: n_mothers, small })
        .collect();
    let basis = CovarianceBasis::new(4 * n_mothers, terms)?;
    let rows: [&[(usize, f64)]; 8] = [
        &[(0, 1.0)],
        &[(1, 1.0)],
        &[(2, 1.0)],
        &[(3, 1.0)],
        &[(1, 1.0), (4, 1.0)],
        &[(1, 1.0), (5, 1.0)],
        &[(2, 1.0), (4, 1.0)],
        &[(3, 1.0), (5, 1.0)],
    ];
    let mut ineq = DMatrix::zeros(rows.len(), 6);
    for (i, row) in rows.iter().enumerate() {
        for &(j, v) in *row {
            ineq[(i, j)] = v;
        }
    }
    let poly = Polytope::new(DMatrix::zeros(0, 6), ineq, f64::INFINITY, crate::linmodel::DEFAULT_PD_FLOOR)?;
    Ok((basis, poly))
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct Truth {
    #[serde(with = "crate::linmodel::basis::rows")]
    pub c: DMatrix<f64>,
    #[serde(with = "crate::linmodel::basis::rows")]
    pub l: DMatrix<f64>,
    pub beta: Vec<f64>,
    /// Per-gene variance multipliers, one row per gene.
    #[serde(with = "crate::linmodel::basis::rows")]
    pub tau: DMatrix<f64>,
    pub alpha: f64,
    /// Realized factor strengths, decreasing.
    pub gamma: Vec<f64>,
    pub nonnull: Vec<bool>,
}

#[derive(Clone, Debug)]
pub struct SimulatedDataset {
    pub y: FeatureMatrix,
    pub design: DesignMatrices,
    pub basis: CovarianceBasis,
    pub polytope: Polytope,
    pub truth: Truth,
    /// Average covariance over genes after normalization.
    pub v_star: DMatrix<f64>,
}

impl SimulatedDataset {
    /// Covariance of gene `g`.
    pub fn v_g(&self, g: usize) -> Result<DMatrix<f64>> {
        self.basis.build_covariance(&self.truth.tau.row(g).transpose())
    }

    /// True confounder complement `Q_{[X Z]}ᵀ C`.
    pub fn c_perp(&self) -> Result<DMatrix<f64>> {
        Ok(complement(&self.design)?.transpose() * &self.truth.c)
    }
}

fn complement(design: &DesignMatrices) -> Result<DMatrix<f64>> {
    let mut cols = design.x.clone();
    if let Some(z) = &design.z {
        let n = cols.nrows();
        let mut m = DMatrix::zeros(n, cols.ncols() + z.ncols());
        m.columns_mut(0, cols.ncols()).copy_from(&cols);
        m.columns_mut(cols.ncols(), z.ncols()).copy_from(z);
        cols = m;
    }
    linalg::null_basis(&cols)
}

struct Layout {
    x: DMatrix<f64>,
    z: DMatrix<f64>,
    basis: CovarianceBasis,
    poly: Polytope,
    small: Vec<DMatrix<f64>>,
    block: usize,
}

fn small_cov(small: &[DMatrix<f64>], tau: &DVector<f64>) -> DMatrix<f64> {
    small.iter().zip(tau.iter()).fold(DMatrix::zeros(small[0].nrows(), small[0].ncols()), |acc, (b, t)| acc + b * *t)
}

fn layout<R: Rng>(config: &SimConfig, rng: &mut R) -> Result<Layout> {
    let n = config.n();
    match config.design {
        Design::MultiTissue => {
            let (basis, poly) = build_tissue_basis(config.n_individuals, config.n_tissues)?;
            let treated = sample(rng, config.n_individuals, config.n_treated);
            let mut x = DMatrix::zeros(n, 1);
            for i in treated.iter() {
                for t in 0..3 {
                    x[(3 * i + t, 0)] = 1.0;
                }
            }
            let z = DMatrix::from_fn(n, 3, |i, t| f64::from(i % 3 == t));
            let small = small_terms(&basis);
            Ok(Layout { x, z, basis, poly, small, block: 3 })
        }
        Design::Twin => {
            let (basis, poly) = build_twin_basis(config.n_individuals)?;
            let treated = sample(rng, 2 * config.n_individuals, config.n_treated);
            let mut x = DMatrix::zeros(n, 1);
            for unit in treated.iter() {
                let (mother, twin) = (unit / 2, unit % 2);
                for age in 0..2 {
                    x[(4 * mother + 2 * twin + age, 0)] = 1.0;
                }
            }
            let z = DMatrix::from_fn(n, 2, |i, a| f64::from(i % 2 == a));
            Ok(Layout { x, z, basis, poly, small: twin_blocks(), block: 4 })
        }
    }
}

fn small_terms(basis: &CovarianceBasis) -> Vec<DMatrix<f64>> {
    basis
        .terms
        .iter()
        .map(|t| match t {
            BasisTerm::Kronecker { small, .. } => small.clone(),
            _ => unreachable!("simulation bases are block-repeated"),
        })
        .collect()
}

fn gamma_sampler(mean: f64, cv: f64) -> Gamma<f64> {
    let shape = 1.0 / (cv * cv);
    Gamma::new(shape, mean / shape).expect("positive Gamma parameters")
}

/// Tissue covariance from the latent-structure constants.
fn tissue_matrix(v1: f64, phi2: f64, v2: f64, phi3: f64, rho3: f64, sig: [f64; 3]) -> DMatrix<f64> {
    let mut m = DMatrix::zeros(3, 3);
    m[(0, 0)] = v1 + sig[0];
    m[(0, 1)] = phi2 * v1;
    m[(0, 2)] = phi3 * v1;
    m[(1, 1)] = phi2 * phi2 * v1 + v2 + sig[1];
    m[(1, 2)] = phi2 * phi3 * v1 + rho3 * v2;
    m[(2, 2)] = phi3 * phi3 * v1 + rho3 * rho3 * v2 + sig[2];
    m.fill_lower_triangle_with_upper_triangle();
    m
}

/// Expected tissue covariance under independent Gamma constants.
pub fn expected_tissue_matrix(means: &[f64], cv: f64) -> DMatrix<f64> {
    let sq = |m: f64| m * m * (1.0 + cv * cv);
    let [v1, phi2, v2, phi3, rho3, sig] = [means[0], means[1], means[2], means[3], means[4], means[5]];
    let mut m = DMatrix::zeros(3, 3);
    m[(0, 0)] = v1 + sig;
    m[(0, 1)] = phi2 * v1;
    m[(0, 2)] = phi3 * v1;
    m[(1, 1)] = sq(phi2) * v1 + v2 + sig;
    m[(1, 2)] = phi2 * phi3 * v1 + rho3 * v2;
    m[(2, 2)] = sq(phi3) * v1 + sq(rho3) * v2 + sig;
    m.fill_lower_triangle_with_upper_triangle();
    m
}

fn sample_gene_tau<R: Rng>(config: &SimConfig, samplers: &[Gamma<f64>], rng: &mut R) -> DVector<f64> {
    match config.design {
        Design::MultiTissue => {
            let c: Vec<f64> = samplers.iter().map(|s| s.sample(rng)).collect();
            let sig = [c[5], samplers[5].sample(rng), samplers[5].sample(rng)];
            tissue_tau(&tissue_matrix(c[0], c[1], c[2], c[3], c[4], sig))
        }
        Design::Twin => DVector::from_iterator(6, samplers.iter().map(|s| s.sample(rng))),
    }
}

fn population_tau(config: &SimConfig) -> DVector<f64> {
    match config.design {
        Design::MultiTissue => tissue_tau(&expected_tissue_matrix(&config.gamma_means, config.gamma_cv)),
        Design::Twin => DVector::from_column_slice(&config.gamma_means),
    }
}

/// `|Qᵀ V Q|^{1/m}` for `Q` spanning the complement of the covariates.
fn delta2(basis: &CovarianceBasis, tau: &DVector<f64>, q: &DMatrix<f64>) -> Result<f64> {
    let v = basis.build_covariance(tau)?;
    let w = linalg::symmetrize(&(q.transpose() * v * q));
    Ok((linalg::logdet_spd(&w)? / q.ncols() as f64).exp())
}

/// Confounders `X A + Ξ {(n-d-r)^{-1} Ξᵀ Q W⁻¹ Qᵀ Ξ}^{-1/2}` with `A = α 1ᵀ`.
fn build_c(x: &DMatrix<f64>, xi: &DMatrix<f64>, q: &DMatrix<f64>, w_inv: &DMatrix<f64>, alpha: f64) -> DMatrix<f64> {
    let qxi = q.transpose() * xi;
    let gram = qxi.transpose() * w_inv * &qxi / q.ncols() as f64;
    let mut c = xi * linalg::sym_inv_sqrt(&linalg::symmetrize(&gram));
    for mut col in c.column_iter_mut() {
        col += x.column(0) * alpha;
    }
    c
}

fn gaussian<R: Rng>(rng: &mut R, r: usize, c: usize) -> DMatrix<f64> {
    DMatrix::from_fn(r, c, |_, _| rng.sample(StandardNormal))
}

/// Fraction of the whitened, nuisance-projected `x` explained by the
/// whitened, projected confounders.
pub fn whitened_r2(x: &DMatrix<f64>, c: &DMatrix<f64>, q_z: &DMatrix<f64>, v_star: &DMatrix<f64>) -> Result<f64> {
    let wz = linalg::sym_inv_sqrt(&linalg::symmetrize(&(q_z.transpose() * v_star * q_z)));
    let xt = &wz * (q_z.transpose() * x);
    let ct = &wz * (q_z.transpose() * c);
    let qc = linalg::orthonormalize(&ct, "whitened confounders")?;
    let proj = qc.transpose() * &xt;
    Ok(proj.norm_squared() / xt.norm_squared())
}

struct CalibrationInputs {
    xt: Vec<DVector<f64>>,
    /// Whitened random parts, one per draw.
    rt: Vec<DMatrix<f64>>,
}

impl CalibrationInputs {
    fn mean_r2(&self, alpha: f64) -> f64 {
        let total: f64 = self
            .xt
            .iter()
            .zip(&self.rt)
            .map(|(x, r)| {
                let mut c = r.clone();
                for mut col in c.column_iter_mut() {
                    col += x * alpha;
                }
                let qr = c.qr().q();
                (qr.transpose() * x).norm_squared() / x.norm_squared()
            })
            .sum();
        total / self.xt.len() as f64
    }
}

/// Bisection for the `α` at which the whitened confounders explain
/// `target` of the whitened covariate on average.
pub fn calibrate_alpha(config: &SimConfig, target: f64) -> Result<f64> {
    let mut cfg = config.clone();
    cfg.alpha = Some(0.0);
    let mut rng = ChaCha8Rng::seed_from_u64(CALIBRATION_SEED);
    let pop = population_tau(&cfg);
    let mut inputs = CalibrationInputs { xt: vec![], rt: vec![] };
    for _ in 0..CALIBRATION_DRAWS {
        let lay = layout(&cfg, &mut rng)?;
        let design = DesignMatrices::new(lay.x.clone(), Some(lay.z.clone()))?;
        let q = complement(&design)?;
        let v_pop = lay.basis.build_covariance(&(&pop / delta2(&lay.basis, &pop, &q)?))?;
        let w_inv = linalg::spd_inverse(&linalg::symmetrize(&(q.transpose() * &v_pop * &q)), "W")?;
        let q_z = linalg::null_basis(&lay.z)?;
        let wz = linalg::sym_inv_sqrt(&linalg::symmetrize(&(q_z.transpose() * &v_pop * &q_z)));
        let xi = gaussian(&mut rng, cfg.n(), cfg.k);
        let random = build_c(&lay.x, &xi, &q, &w_inv, 0.0);
        inputs.xt.push((&wz * (q_z.transpose() * &lay.x)).column(0).into_owned());
        inputs.rt.push(&wz * (q_z.transpose() * random));
    }
    let base = inputs.mean_r2(0.0);
    if base >= target {
        return Err(Error::CalibrationFailure(format!(
            "R² is already {base:.3} without a covariate path; target {target}"
        )));
    }
    let (mut lo, mut hi) = (0.0, 1.0);
    while inputs.mean_r2(hi) < target {
        hi *= 2.0;
        if hi > 1e6 {
            return Err(Error::CalibrationFailure("no α reaches the target R²".into()));
        }
    }
    for _ in 0..60 {
        let mid = 0.5 * (lo + hi);
        if inputs.mean_r2(mid) < target {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    Ok(0.5 * (lo + hi))
}

/// Generate one dataset. Sequential in a single seeded stream, so the output
/// is a deterministic function of the configuration.
pub fn simulate(config: &SimConfig) -> Result<SimulatedDataset> {
    config.validate()?;
    let alpha = match config.alpha {
        Some(a) => a,
        None => calibrate_alpha(config, TARGET_R2)?,
    };
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let lay = layout(config, &mut rng)?;
    let n = config.n();
    let p = config.p;
    let design = DesignMatrices::new(lay.x.clone(), Some(lay.z.clone()))?;
    let q = complement(&design)?;

    let samplers: Vec<Gamma<f64>> = config.gamma_means.iter().map(|m| gamma_sampler(*m, config.gamma_cv)).collect();
    let b = lay.basis.len();
    let mut tau = DMatrix::zeros(p, b);
    for g in 0..p {
        let t = if config.independent_noise {
            DVector::zeros(b)
        } else {
            sample_gene_tau(config, &samplers, &mut rng)
        };
        tau.set_row(g, &t.transpose());
    }
    let identity_small = DMatrix::<f64>::identity(lay.block, lay.block);
    if !config.independent_noise {
        let mean_tau = DVector::from_fn(b, |j, _| tau.column(j).mean());
        let scale = delta2(&lay.basis, &mean_tau, &q)?;
        tau /= scale;
    }
    let pop = population_tau(config);
    let pop = &pop / delta2(&lay.basis, &pop, &q)?;
    let v_pop = lay.basis.build_covariance(&pop)?;
    let w_inv = linalg::spd_inverse(&linalg::symmetrize(&(q.transpose() * &v_pop * &q)), "W")?;

    let xi = gaussian(&mut rng, n, config.k);
    let c = build_c(&lay.x, &xi, &q, &w_inv, alpha);

    let mut l = DMatrix::zeros(p, config.k);
    for g in 0..p {
        for k in 0..config.k {
            if rng.random::<f64>() >= config.pi[k] {
                l[(g, k)] = config.eta[k] * rng.sample::<f64, _>(StandardNormal);
            }
        }
    }
    let mut beta = vec![0.0; p];
    for bg in beta.iter_mut() {
        if rng.random::<f64>() >= config.beta_sparsity {
            *bg = config.beta_sd * rng.sample::<f64, _>(StandardNormal);
        }
    }

    let t_dist = if config.residual_df.is_finite() {
        Some(StudentT::new(config.residual_df).map_err(|e| Error::InvalidInput(e.to_string()))?)
    } else {
        None
    };
    let t_scale = if config.residual_df.is_finite() {
        ((config.residual_df - 2.0) / config.residual_df).sqrt()
    } else {
        1.0
    };
    let blocks = n / lay.block;
    let mut y = DMatrix::zeros(p, n);
    for g in 0..p {
        let root = if config.independent_noise {
            identity_small.clone()
        } else {
            linalg::sym_sqrt(&small_cov(&lay.small, &tau.row(g).transpose()))
        };
        for blk in 0..blocks {
            let e = DVector::from_fn(lay.block, |_, _| match &t_dist {
                Some(t) => t.sample(&mut rng) * t_scale,
                None => rng.sample(StandardNormal),
            });
            let colored = &root * e;
            for i in 0..lay.block {
                y[(g, blk * lay.block + i)] = colored[i];
            }
        }
    }
    y += DMatrix::from_column_slice(p, 1, &beta) * lay.x.transpose() + &l * c.transpose();

    let v_star = if config.independent_noise {
        DMatrix::identity(n, n)
    } else {
        lay.basis.build_covariance(&DVector::from_fn(b, |j, _| tau.column(j).mean()))?
    };
    let c_perp = q.transpose() * &c;
    let w_star = linalg::symmetrize(&(q.transpose() * &v_star * &q));
    let ctwc = c_perp.transpose() * linalg::spd_solve(&w_star, &c_perp, "W")?;
    let ltl = l.transpose() * &l / p as f64;
    let root = linalg::sym_sqrt(&linalg::symmetrize(&ltl));
    let gamma = linalg::sym_eigenvalues_desc(&linalg::symmetrize(&(&root * ctwc * &root)));
    let gamma: Vec<f64> = gamma.iter().copied().collect();
    if gamma.windows(2).any(|w| w[1] >= w[0]) {
        log::warn!("realized factor strengths are not strictly decreasing: {gamma:?}");
    }

    let feature_ids = (0..p).map(|g| format!("g{}", g + 1)).collect();
    let sample_ids = sample_ids(config);
    let nonnull = beta.iter().map(|b| *b != 0.0).collect();
    Ok(SimulatedDataset {
        y: FeatureMatrix::new(y, feature_ids, sample_ids)?,
        design,
        basis: lay.basis,
        polytope: lay.poly,
        truth: Truth { c, l, beta, tau, alpha, gamma, nonnull },
        v_star,
    })
}

fn sample_ids(config: &SimConfig) -> Vec<String> {
    match config.design {
        Design::MultiTissue => (0..config.n())
            .map(|i| format!("ind{}_t{}", i / 3 + 1, i % 3 + 1))
            .collect(),
        Design::Twin => (0..config.n())
            .map(|i| {
                let age = if i % 2 == 0 { "0" } else { "18m" };
                format!("m{}_tw{}_{}", i / 4 + 1, (i / 2) % 2 + 1, age)
            })
            .collect(),
    }
}
