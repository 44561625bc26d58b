//! Covariance basis terms `B_1 .. B_b` and their structured representations.

use std::collections::{BTreeMap, HashMap};

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg;

/// Serialize a `DMatrix` as a JSON array of rows.
pub(crate) mod rows {
    use nalgebra::DMatrix;
    use serde::{Deserialize, Deserializer, Serialize, Serializer};

    pub fn serialize<S: Serializer>(m: &DMatrix<f64>, s: S) -> Result<S::Ok, S::Error> {
        let rows: Vec<Vec<f64>> = (0..m.nrows())
            .map(|i| m.row(i).iter().copied().collect())
            .collect();
        rows.serialize(s)
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<DMatrix<f64>, D::Error> {
        let rows: Vec<Vec<f64>> = Vec::deserialize(d)?;
        from_rows(&rows, None).map_err(serde::de::Error::custom)
    }

    pub fn from_rows(rows: &[Vec<f64>], ncols: Option<usize>) -> Result<DMatrix<f64>, String> {
        let nrows = rows.len();
        let ncols = match (rows.first(), ncols) {
            (Some(r), _) => r.len(),
            (None, Some(c)) => c,
            (None, None) => 0,
        };
        if rows.iter().any(|r| r.len() != ncols) {
            return Err("ragged matrix rows".to_string());
        }
        Ok(DMatrix::from_fn(nrows, ncols, |i, j| rows[i][j]))
    }
}

/// One term of the covariance model. Structured kinds stay symbolic until a
/// dense matrix is actually needed.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum BasisTerm {
    Dense {
        #[serde(with = "rows")]
        matrix: DMatrix<f64>,
    },
    Identity,
    /// Ones wherever two samples share a group label (a partition matrix).
    BlockPartition { labels: Vec<String> },
    /// `I_blocks ⊗ small`.
    Kronecker {
        blocks: usize,
        #[serde(with = "rows")]
        small: DMatrix<f64>,
    },
    /// Diagonal matrix with ones where `mask` is true.
    DiagonalIndicator { mask: Vec<bool> },
}

impl BasisTerm {
    /// Dimension implied by the term itself, when it carries one.
    fn implied_dim(&self) -> Option<usize> {
        match self {
            BasisTerm::Dense { matrix } => Some(matrix.nrows()),
            BasisTerm::Identity => None,
            BasisTerm::BlockPartition { labels } => Some(labels.len()),
            BasisTerm::Kronecker { blocks, small } => Some(blocks * small.nrows()),
            BasisTerm::DiagonalIndicator { mask } => Some(mask.len()),
        }
    }

    pub fn entry(&self, r: usize, c: usize) -> f64 {
        match self {
            BasisTerm::Dense { matrix } => matrix[(r, c)],
            BasisTerm::Identity => f64::from(r == c),
            BasisTerm::BlockPartition { labels } => f64::from(labels[r] == labels[c]),
            BasisTerm::Kronecker { small, .. } => {
                let s = small.nrows();
                if r / s == c / s {
                    small[(r % s, c % s)]
                } else {
                    0.0
                }
            }
            BasisTerm::DiagonalIndicator { mask } => f64::from(r == c && mask[r]),
        }
    }

    pub fn materialize(&self, n: usize) -> DMatrix<f64> {
        match self {
            BasisTerm::Dense { matrix } => matrix.clone(),
            BasisTerm::Identity => DMatrix::identity(n, n),
            BasisTerm::DiagonalIndicator { mask } => {
                DMatrix::from_diagonal(&DVector::from_iterator(n, mask.iter().map(|&b| f64::from(b))))
            }
            BasisTerm::Kronecker { blocks, small } => {
                let s = small.nrows();
                let mut m = DMatrix::zeros(n, n);
                for b in 0..*blocks {
                    m.view_mut((b * s, b * s), (s, s)).copy_from(small);
                }
                m
            }
            BasisTerm::BlockPartition { .. } => DMatrix::from_fn(n, n, |r, c| self.entry(r, c)),
        }
    }

    /// Index pairs `(r, c)` with a possibly nonzero entry, as adjacency lists
    /// used for block detection. Dense terms report their actual nonzeros.
    fn add_edges(&self, n: usize, uf: &mut UnionFind) {
        match self {
            BasisTerm::Identity | BasisTerm::DiagonalIndicator { .. } => {}
            BasisTerm::Dense { matrix } => {
                for r in 0..n {
                    for c in (r + 1)..n {
                        if matrix[(r, c)] != 0.0 || matrix[(c, r)] != 0.0 {
                            uf.union(r, c);
                        }
                    }
                }
            }
            BasisTerm::BlockPartition { labels } => {
                let mut first: HashMap<&str, usize> = HashMap::new();
                for (i, l) in labels.iter().enumerate() {
                    match first.get(l.as_str()) {
                        Some(&f) => uf.union(f, i),
                        None => {
                            first.insert(l.as_str(), i);
                        }
                    }
                }
            }
            BasisTerm::Kronecker { blocks, small } => {
                let s = small.nrows();
                for b in 0..*blocks {
                    for r in 0..s {
                        for c in (r + 1)..s {
                            if small[(r, c)] != 0.0 || small[(c, r)] != 0.0 {
                                uf.union(b * s + r, b * s + c);
                            }
                        }
                    }
                }
            }
        }
    }
}

struct UnionFind {
    parent: Vec<usize>,
}

impl UnionFind {
    fn new(n: usize) -> Self {
        Self { parent: (0..n).collect() }
    }
    fn find(&mut self, mut i: usize) -> usize {
        while self.parent[i] != i {
            self.parent[i] = self.parent[self.parent[i]];
            i = self.parent[i];
        }
        i
    }
    fn union(&mut self, a: usize, b: usize) {
        let (ra, rb) = (self.find(a), self.find(b));
        if ra != rb {
            // smaller root wins so components are keyed deterministically
            let (lo, hi) = if ra < rb { (ra, rb) } else { (rb, ra) };
            self.parent[hi] = lo;
        }
    }
}

/// The ordered list of basis matrices `B_1 .. B_b`, all `n × n`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CovarianceBasis {
    pub n: usize,
    pub terms: Vec<BasisTerm>,
}

/// Per-block dense restriction of every basis term, for covariance models
/// that are block diagonal under a common sample partition.
#[derive(Clone, Debug)]
pub struct BlockBasis {
    pub n: usize,
    pub blocks: Vec<Block>,
}

#[derive(Clone, Debug)]
pub struct Block {
    pub indices: Vec<usize>,
    /// `terms[j]` is `B_j` restricted to `indices × indices`.
    pub terms: Vec<DMatrix<f64>>,
}

impl CovarianceBasis {
    pub fn new(n: usize, terms: Vec<BasisTerm>) -> Result<Self> {
        let basis = Self { n, terms };
        basis.validate()?;
        Ok(basis)
    }

    pub fn len(&self) -> usize {
        self.terms.len()
    }

    pub fn is_empty(&self) -> bool {
        self.terms.is_empty()
    }

    pub fn validate(&self) -> Result<()> {
        if self.terms.is_empty() {
            return Err(Error::InvalidInput("covariance basis has no terms".into()));
        }
        for (j, t) in self.terms.iter().enumerate() {
            if let Some(d) = t.implied_dim() {
                if d != self.n {
                    return Err(Error::DimensionMismatch(format!(
                        "basis term {j} has dimension {d}, expected {}",
                        self.n
                    )));
                }
            }
            match t {
                BasisTerm::Dense { matrix } => {
                    if !matrix.is_square() {
                        return Err(Error::DimensionMismatch(format!("basis term {j} is not square")));
                    }
                    check_symmetric(matrix, j)?;
                }
                BasisTerm::Kronecker { small, .. } => {
                    if !small.is_square() {
                        return Err(Error::DimensionMismatch(format!("basis term {j} block is not square")));
                    }
                    check_symmetric(small, j)?;
                }
                _ => {}
            }
        }
        let gram = self.gram();
        let ev = linalg::sym_eigenvalues_desc(&gram);
        let lmax = ev[0];
        let lmin = ev[ev.len() - 1];
        if lmin <= 1e-10 * lmax {
            return Err(Error::InvalidInput(format!(
                "basis terms are linearly dependent (Gram eigenvalue ratio {:e})",
                lmin / lmax
            )));
        }
        Ok(())
    }

    /// Gram matrix of the vectorized terms, `<vec B_i, vec B_j>`.
    pub fn gram(&self) -> DMatrix<f64> {
        let dense: Vec<DMatrix<f64>> = (0..self.len()).map(|j| self.materialize(j)).collect();
        let b = dense.len();
        DMatrix::from_fn(b, b, |i, j| dense[i].dot(&dense[j]))
    }

    pub fn materialize(&self, j: usize) -> DMatrix<f64> {
        self.terms[j].materialize(self.n)
    }

    pub fn materialize_all(&self) -> Vec<DMatrix<f64>> {
        (0..self.len()).map(|j| self.materialize(j)).collect()
    }

    /// `Σ_j tau_j B_j`. Positive definiteness is the caller's concern.
    pub fn build_covariance(&self, tau: &DVector<f64>) -> Result<DMatrix<f64>> {
        if tau.len() != self.len() {
            return Err(Error::DimensionMismatch(format!(
                "tau has length {}, basis has {} terms",
                tau.len(),
                self.len()
            )));
        }
        let mut v = DMatrix::zeros(self.n, self.n);
        for (t, term) in tau.iter().zip(&self.terms) {
            if *t != 0.0 {
                v += term.materialize(self.n) * *t;
            }
        }
        Ok(v)
    }

    /// Change of frame: each term becomes `Q^T B_j Q` (dense).
    pub fn rotate(&self, q: &DMatrix<f64>) -> Result<CovarianceBasis> {
        if q.nrows() != self.n {
            return Err(Error::DimensionMismatch(format!(
                "rotation has {} rows, basis dimension is {}",
                q.nrows(),
                self.n
            )));
        }
        let qt = q.transpose();
        let terms = self
            .terms
            .iter()
            .map(|t| BasisTerm::Dense {
                matrix: linalg::symmetrize(&(&qt * t.materialize(self.n) * q)),
            })
            .collect();
        Ok(CovarianceBasis { n: q.ncols(), terms })
    }

    /// Split samples into the connected components of the union sparsity
    /// pattern of all terms. A single component means the model is dense.
    pub fn block_basis(&self) -> BlockBasis {
        let mut uf = UnionFind::new(self.n);
        for t in &self.terms {
            t.add_edges(self.n, &mut uf);
        }
        let mut comps: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
        for i in 0..self.n {
            let r = uf.find(i);
            comps.entry(r).or_default().push(i);
        }
        let blocks = comps
            .into_values()
            .map(|idx| {
                let terms = self
                    .terms
                    .iter()
                    .map(|t| DMatrix::from_fn(idx.len(), idx.len(), |r, c| t.entry(idx[r], idx[c])))
                    .collect();
                Block { indices: idx, terms }
            })
            .collect();
        BlockBasis { n: self.n, blocks }
    }
}

fn check_symmetric(m: &DMatrix<f64>, j: usize) -> Result<()> {
    if m.iter().any(|v| !v.is_finite()) {
        return Err(Error::InvalidInput(format!("basis term {j} has non-finite entries")));
    }
    let asym = (m - m.transpose()).amax();
    if asym > 1e-12 * m.amax().max(1.0) {
        return Err(Error::InvalidInput(format!("basis term {j} is not symmetric ({asym:e})")));
    }
    Ok(())
}

impl BlockBasis {
    pub fn len_terms(&self) -> usize {
        self.blocks.first().map_or(0, |b| b.terms.len())
    }

    pub fn max_block(&self) -> usize {
        self.blocks.iter().map(|b| b.indices.len()).max().unwrap_or(0)
    }

    /// Per-block `Σ_j x_j B_j`.
    pub fn combine(&self, x: &DVector<f64>) -> Vec<DMatrix<f64>> {
        self.blocks
            .iter()
            .map(|b| {
                let s = b.indices.len();
                let mut v = DMatrix::zeros(s, s);
                for (xj, t) in x.iter().zip(&b.terms) {
                    if *xj != 0.0 {
                        v += t * *xj;
                    }
                }
                v
            })
            .collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn identity_gives_identity() {
        let basis = CovarianceBasis::new(4, vec![BasisTerm::Identity]).unwrap();
        let v = basis.build_covariance(&DVector::from_vec(vec![1.0])).unwrap();
        assert_eq!(v, DMatrix::identity(4, 4));
    }

    #[test]
    fn identity_plus_ones() {
        let basis = CovarianceBasis::new(
            2,
            vec![
                BasisTerm::Identity,
                BasisTerm::Dense {
                    matrix: DMatrix::from_element(2, 2, 1.0),
                },
            ],
        )
        .unwrap();
        let v = basis.build_covariance(&DVector::from_vec(vec![1.0, 1.0])).unwrap();
        assert_eq!(v, DMatrix::from_row_slice(2, 2, &[2.0, 1.0, 1.0, 2.0]));
    }

    #[test]
    fn dependent_terms_rejected() {
        let r = CovarianceBasis::new(
            3,
            vec![
                BasisTerm::Identity,
                BasisTerm::DiagonalIndicator {
                    mask: vec![true, true, true],
                },
            ],
        );
        assert!(matches!(r, Err(Error::InvalidInput(_))));
    }

    #[test]
    fn asymmetric_dense_rejected() {
        let r = CovarianceBasis::new(
            2,
            vec![BasisTerm::Dense {
                matrix: DMatrix::from_row_slice(2, 2, &[1.0, 0.5, 0.0, 1.0]),
            }],
        );
        assert!(r.is_err());
    }

    #[test]
    fn block_partition_and_blocks() {
        let labels: Vec<String> = ["a", "a", "b", "c", "b"].iter().map(|s| s.to_string()).collect();
        let basis = CovarianceBasis::new(
            5,
            vec![BasisTerm::Identity, BasisTerm::BlockPartition { labels }],
        )
        .unwrap();
        let m = basis.materialize(1);
        assert_eq!(m[(0, 1)], 1.0);
        assert_eq!(m[(2, 4)], 1.0);
        assert_eq!(m[(0, 2)], 0.0);
        let bb = basis.block_basis();
        let idx: Vec<Vec<usize>> = bb.blocks.iter().map(|b| b.indices.clone()).collect();
        assert_eq!(idx, vec![vec![0, 1], vec![2, 4], vec![3]]);
        assert_eq!(bb.blocks[1].terms[1], DMatrix::from_element(2, 2, 1.0));
    }

    #[test]
    fn json_roundtrip() {
        let basis = CovarianceBasis::new(
            4,
            vec![
                BasisTerm::Identity,
                BasisTerm::Kronecker {
                    blocks: 2,
                    small: DMatrix::from_row_slice(2, 2, &[1.0, 0.5, 0.5, 1.0]),
                },
                BasisTerm::DiagonalIndicator {
                    mask: vec![true, false, true, false],
                },
            ],
        )
        .unwrap();
        let s = serde_json::to_string(&basis).unwrap();
        assert!(s.contains("\"kind\":\"kronecker\""));
        let back: CovarianceBasis = serde_json::from_str(&s).unwrap();
        assert_eq!(back, basis);
    }
}
