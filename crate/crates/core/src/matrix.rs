//! Matrix representations for affinities and transition kernels.
//!
//! A node-to-node matrix is held in one of three forms:
//!
//! - `Dense`: an explicit N×N array.
//! - `LowRank`: a factor pair `(left, right)`, both N×r, whose product `left · rightᵀ`
//!   is the matrix. Products against an N×K block are bracketed as
//!   `left · (rightᵀ · block)`, costing O(N·r·K).
//! - `SparseLocal`: compressed rows holding at most nine entries per node
//!   (self plus the 8-connected grid neighborhood).
//!
//! None of the hot paths ever materialize an N×N array unless the representation
//! is already dense.

use ndarray::linalg::general_mat_mul;
use ndarray::{Array1, Array2, ArrayView2, Axis};

use crate::error::{check_dim, Error, Result};

/// Tolerance on row sums for a matrix to count as row-stochastic.
pub const STOCHASTIC_TOL: f64 = 1e-6;

/// Row sums below this are treated as empty rows.
pub const DEGENERATE_ROW_SUM: f64 = 1e-12;

/// A rectangular patch grid laid out row-major.
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub struct Grid {
    pub height: usize,
    pub width: usize,
}

impl Grid {
    pub fn new(height: usize, width: usize) -> Self {
        Grid { height, width }
    }

    pub fn nodes(&self) -> usize {
        self.height * self.width
    }

    /// Fails with `GridMismatch` unless the grid covers exactly `n` nodes.
    pub fn check_nodes(&self, n: usize) -> Result<()> {
        if self.height.checked_mul(self.width) == Some(n) {
            Ok(())
        } else {
            Err(Error::GridMismatch {
                grid_h: self.height,
                grid_w: self.width,
                nodes: n,
            })
        }
    }

    /// 8-connected neighbors of `node`, in increasing index order. Boundaries do not wrap.
    pub fn neighbors(&self, node: usize) -> impl Iterator<Item = usize> + '_ {
        let (r, c) = (node / self.width, node % self.width);
        (-1isize..=1).flat_map(move |dr| {
            (-1isize..=1).filter_map(move |dc| {
                if dr == 0 && dc == 0 {
                    return None;
                }
                let rr = r as isize + dr;
                let cc = c as isize + dc;
                if rr < 0 || cc < 0 || rr >= self.height as isize || cc >= self.width as isize {
                    None
                } else {
                    Some(rr as usize * self.width + cc as usize)
                }
            })
        })
    }
}

/// Compressed sparse rows.
#[derive(Debug, Clone, PartialEq)]
pub struct SparseRows {
    n: usize,
    row_ptr: Vec<usize>,
    cols: Vec<usize>,
    vals: Vec<f64>,
}

impl SparseRows {
    /// Builds from per-row `(column, value)` lists. Columns must be `< rows.len()`.
    pub fn from_rows(rows: Vec<Vec<(usize, f64)>>) -> Result<Self> {
        let n = rows.len();
        let mut row_ptr = Vec::with_capacity(n + 1);
        let mut cols = Vec::new();
        let mut vals = Vec::new();
        row_ptr.push(0);
        for row in rows {
            for (c, v) in row {
                if c >= n {
                    return Err(Error::DimensionMismatch {
                        context: "sparse column index",
                        expected: n,
                        found: c,
                    });
                }
                cols.push(c);
                vals.push(v);
            }
            row_ptr.push(cols.len());
        }
        Ok(SparseRows {
            n,
            row_ptr,
            cols,
            vals,
        })
    }

    pub fn n(&self) -> usize {
        self.n
    }

    pub fn nnz(&self) -> usize {
        self.vals.len()
    }

    /// `(column, value)` pairs of one row.
    pub fn row(&self, i: usize) -> impl Iterator<Item = (usize, f64)> + '_ {
        let span = self.row_ptr[i]..self.row_ptr[i + 1];
        self.cols[span.clone()]
            .iter()
            .copied()
            .zip(self.vals[span].iter().copied())
    }

    pub fn row_len(&self, i: usize) -> usize {
        self.row_ptr[i + 1] - self.row_ptr[i]
    }

    fn map_values(&self, mut f: impl FnMut(usize, f64) -> f64) -> SparseRows {
        let mut out = self.clone();
        for i in 0..self.n {
            for k in self.row_ptr[i]..self.row_ptr[i + 1] {
                out.vals[k] = f(i, self.vals[k]);
            }
        }
        out
    }

    pub fn to_dense(&self) -> Array2<f64> {
        let mut out = Array2::zeros((self.n, self.n));
        for i in 0..self.n {
            for (c, v) in self.row(i) {
                out[[i, c]] += v;
            }
        }
        out
    }

    fn accumulate(&self, weight: f64, block: ArrayView2<f64>, out: &mut Array2<f64>) {
        let k = block.ncols();
        for i in 0..self.n {
            let mut dst = out.row_mut(i);
            for (c, v) in self.row(i) {
                let w = weight * v;
                let src = block.row(c);
                for j in 0..k {
                    dst[j] += w * src[j];
                }
            }
        }
    }
}

/// Factor pair whose product `left · rightᵀ` is an N×N matrix of rank ≤ r.
#[derive(Debug, Clone, PartialEq)]
pub struct LowRank {
    pub left: Array2<f64>,
    pub right: Array2<f64>,
}

impl LowRank {
    pub fn new(left: Array2<f64>, right: Array2<f64>) -> Result<Self> {
        check_dim("low-rank factor rows", left.nrows(), right.nrows())?;
        check_dim("low-rank factor rank", left.ncols(), right.ncols())?;
        Ok(LowRank { left, right })
    }

    pub fn n(&self) -> usize {
        self.left.nrows()
    }

    pub fn rank(&self) -> usize {
        self.left.ncols()
    }

    pub fn to_dense(&self) -> Array2<f64> {
        self.left.dot(&self.right.t())
    }

    /// Row sums `left · (rightᵀ · 1)` in O(N·r).
    pub fn row_sums(&self) -> Array1<f64> {
        let col_totals = self.right.sum_axis(Axis(0));
        self.left.dot(&col_totals)
    }

    fn accumulate(
        &self,
        weight: f64,
        block: ArrayView2<f64>,
        out: &mut Array2<f64>,
        scratch: &mut Array2<f64>,
    ) {
        let shape = (self.rank(), block.ncols());
        if scratch.dim() != shape {
            *scratch = Array2::zeros(shape);
        }
        // rightᵀ · block first: r×K, never N×N.
        general_mat_mul(1.0, &self.right.t(), &block, 0.0, scratch);
        general_mat_mul(weight, &self.left, scratch, 1.0, out);
    }
}

/// Storage form of a node-to-node matrix.
#[derive(Debug, Clone, PartialEq)]
pub enum Representation {
    Dense(Array2<f64>),
    LowRank(LowRank),
    SparseLocal(SparseRows),
}

impl Representation {
    pub fn n(&self) -> usize {
        match self {
            Representation::Dense(m) => m.nrows(),
            Representation::LowRank(f) => f.n(),
            Representation::SparseLocal(s) => s.n(),
        }
    }

    pub fn kind(&self) -> &'static str {
        match self {
            Representation::Dense(_) => "dense",
            Representation::LowRank(_) => "low-rank",
            Representation::SparseLocal(_) => "sparse-local",
        }
    }

    pub fn to_dense(&self) -> Array2<f64> {
        match self {
            Representation::Dense(m) => m.clone(),
            Representation::LowRank(f) => f.to_dense(),
            Representation::SparseLocal(s) => s.to_dense(),
        }
    }

    pub fn row_sums(&self) -> Array1<f64> {
        match self {
            Representation::Dense(m) => m.sum_axis(Axis(1)),
            Representation::LowRank(f) => f.row_sums(),
            Representation::SparseLocal(s) => {
                Array1::from_iter((0..s.n()).map(|i| s.row(i).map(|(_, v)| v).sum::<f64>()))
            }
        }
    }

    /// `out += weight · self · block`.
    pub fn accumulate(
        &self,
        weight: f64,
        block: ArrayView2<f64>,
        out: &mut Array2<f64>,
        scratch: &mut Array2<f64>,
    ) {
        match self {
            Representation::Dense(m) => general_mat_mul(weight, m, &block, 1.0, out),
            Representation::LowRank(f) => f.accumulate(weight, block, out, scratch),
            Representation::SparseLocal(s) => s.accumulate(weight, block, out),
        }
    }

    /// `self · block` as a fresh array.
    pub fn apply(&self, block: ArrayView2<f64>) -> Result<Array2<f64>> {
        check_dim("matrix-block product", self.n(), block.nrows())?;
        let mut out = Array2::zeros((self.n(), block.ncols()));
        let mut scratch = Array2::zeros((0, 0));
        self.accumulate(1.0, block, &mut out, &mut scratch);
        Ok(out)
    }
}

/// Sets negative entries to zero. Idempotent.
pub fn clamp_nonnegative(m: &mut Array2<f64>) {
    m.mapv_inplace(|v| v.max(0.0));
}

/// A node-to-node affinity, not yet normalized.
#[derive(Debug, Clone, PartialEq)]
pub struct Affinity {
    repr: Representation,
}

impl Affinity {
    pub fn dense(m: Array2<f64>) -> Result<Self> {
        check_dim("square affinity", m.nrows(), m.ncols())?;
        Ok(Affinity {
            repr: Representation::Dense(m),
        })
    }

    pub fn low_rank(factors: LowRank) -> Self {
        Affinity {
            repr: Representation::LowRank(factors),
        }
    }

    pub fn sparse(rows: SparseRows) -> Self {
        Affinity {
            repr: Representation::SparseLocal(rows),
        }
    }

    pub fn repr(&self) -> &Representation {
        &self.repr
    }

    pub fn into_repr(self) -> Representation {
        self.repr
    }

    pub fn n(&self) -> usize {
        self.repr.n()
    }

    pub fn to_dense(&self) -> Array2<f64> {
        self.repr.to_dense()
    }
}

/// Row-normalizes an affinity into a transition matrix, keeping its representation.
///
/// Dense affinities are clamped at zero first. Low-rank affinities fold the inverse
/// row sums into the left factor; their entries must already be nonnegative (see
/// [`crate::affinity::NonNegPolicy::Shift`]). Sparse values are clamped at zero.
pub fn row_normalize(affinity: Affinity) -> Result<StochasticMatrix> {
    let check = |row: usize, sum: f64| -> Result<()> {
        if sum.is_finite() && sum >= DEGENERATE_ROW_SUM {
            Ok(())
        } else {
            Err(Error::DegenerateRow { row, sum })
        }
    };
    let repr = match affinity.repr {
        Representation::Dense(mut m) => {
            clamp_nonnegative(&mut m);
            for (i, mut row) in m.axis_iter_mut(Axis(0)).enumerate() {
                let sum = row.sum();
                check(i, sum)?;
                row.mapv_inplace(|v| v / sum);
            }
            Representation::Dense(m)
        }
        Representation::LowRank(mut f) => {
            let sums = f.row_sums();
            for (i, (&sum, mut row)) in sums.iter().zip(f.left.axis_iter_mut(Axis(0))).enumerate()
            {
                check(i, sum)?;
                row.mapv_inplace(|v| v / sum);
            }
            Representation::LowRank(f)
        }
        Representation::SparseLocal(s) => {
            let clamped = s.map_values(|_, v| v.max(0.0));
            let sums: Vec<f64> = (0..clamped.n())
                .map(|i| clamped.row(i).map(|(_, v)| v).sum())
                .collect();
            for (i, &sum) in sums.iter().enumerate() {
                check(i, sum)?;
            }
            Representation::SparseLocal(clamped.map_values(|i, v| v / sums[i]))
        }
    };
    Ok(StochasticMatrix { repr })
}

/// A row-stochastic N×N transition matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct StochasticMatrix {
    repr: Representation,
}

impl StochasticMatrix {
    /// Wraps a representation after checking nonnegativity (dense/sparse) and row sums.
    pub fn new(repr: Representation) -> Result<Self> {
        match &repr {
            Representation::Dense(m) => {
                check_dim("square transition", m.nrows(), m.ncols())?;
                if let Some(pos) = m.iter().position(|v| !(*v >= 0.0)) {
                    return Err(Error::NotAProbability {
                        row: pos / m.ncols(),
                        reason: "negative or non-finite entry".into(),
                    });
                }
            }
            Representation::SparseLocal(s) => {
                for i in 0..s.n() {
                    if s.row(i).any(|(_, v)| !(v >= 0.0)) {
                        return Err(Error::NotAProbability {
                            row: i,
                            reason: "negative or non-finite entry".into(),
                        });
                    }
                }
            }
            Representation::LowRank(_) => {}
        }
        for (i, s) in repr.row_sums().iter().enumerate() {
            if !((s - 1.0).abs() <= STOCHASTIC_TOL) {
                return Err(Error::NotAProbability {
                    row: i,
                    reason: format!("row sums to {s}"),
                });
            }
        }
        Ok(StochasticMatrix { repr })
    }

    pub fn identity(n: usize) -> Self {
        StochasticMatrix {
            repr: Representation::Dense(Array2::eye(n)),
        }
    }

    pub fn repr(&self) -> &Representation {
        &self.repr
    }

    pub fn n(&self) -> usize {
        self.repr.n()
    }

    pub fn to_dense(&self) -> Array2<f64> {
        self.repr.to_dense()
    }

    pub fn apply(&self, block: ArrayView2<f64>) -> Result<Array2<f64>> {
        self.repr.apply(block)
    }
}

/// A convex combination `Σ wₜ Sₜ` of transition matrices, evaluated lazily.
///
/// Products are computed term by term; the mixture is never densified unless
/// [`Transition::to_dense`] is called explicitly.
#[derive(Debug, Clone)]
pub struct Transition {
    n: usize,
    terms: Vec<(f64, StochasticMatrix)>,
}

impl Transition {
    pub fn single(s: StochasticMatrix) -> Self {
        Transition {
            n: s.n(),
            terms: vec![(1.0, s)],
        }
    }

    /// Builds `Σ wₜ Sₜ`. Weights must be nonnegative and sum to 1; zero-weight
    /// terms are dropped.
    pub fn mixture(terms: Vec<(f64, StochasticMatrix)>) -> Result<Self> {
        let n = terms
            .first()
            .map(|(_, s)| s.n())
            .ok_or_else(|| Error::invalid("terms", 0, "mixture needs at least one term"))?;
        for (w, s) in &terms {
            check_dim("mixture term size", n, s.n())?;
            if !(*w >= 0.0) {
                return Err(Error::invalid("weight", w, "mixture weights must be >= 0"));
            }
        }
        let total: f64 = terms.iter().map(|(w, _)| w).sum();
        if (total - 1.0).abs() > 1e-9 {
            return Err(Error::invalid("weights", total, "mixture weights must sum to 1"));
        }
        let terms = terms.into_iter().filter(|(w, _)| *w > 0.0).collect();
        Ok(Transition { n, terms })
    }

    /// Flattens a weighted combination of mixtures into one mixture.
    pub fn combine(parts: Vec<(f64, Transition)>) -> Result<Self> {
        let terms = parts
            .into_iter()
            .flat_map(|(w, t)| t.terms.into_iter().map(move |(v, s)| (w * v, s)))
            .collect();
        Transition::mixture(terms)
    }

    pub fn n(&self) -> usize {
        self.n
    }

    pub fn terms(&self) -> &[(f64, StochasticMatrix)] {
        &self.terms
    }

    /// `out = Σ wₜ Sₜ · block`, reusing `scratch` between terms.
    pub fn apply_into(
        &self,
        block: ArrayView2<f64>,
        out: &mut Array2<f64>,
        scratch: &mut Array2<f64>,
    ) -> Result<()> {
        check_dim("transition-block product", self.n, block.nrows())?;
        if out.dim() != (self.n, block.ncols()) {
            *out = Array2::zeros((self.n, block.ncols()));
        } else {
            out.fill(0.0);
        }
        for (w, s) in &self.terms {
            s.repr.accumulate(*w, block, out, scratch);
        }
        Ok(())
    }

    pub fn apply(&self, block: ArrayView2<f64>) -> Result<Array2<f64>> {
        let mut out = Array2::zeros((self.n, block.ncols()));
        let mut scratch = Array2::zeros((0, 0));
        self.apply_into(block, &mut out, &mut scratch)?;
        Ok(out)
    }

    pub fn to_dense(&self) -> Array2<f64> {
        let mut out = Array2::zeros((self.n, self.n));
        for (w, s) in &self.terms {
            out.scaled_add(*w, &s.to_dense());
        }
        out
    }

    /// True when the mixture is exactly one low-rank term with weight 1.
    pub fn as_single_low_rank(&self) -> Option<&LowRank> {
        match self.terms.as_slice() {
            [(w, s)] if *w == 1.0 => match s.repr() {
                Representation::LowRank(f) => Some(f),
                _ => None,
            },
            _ => None,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    #[test]
    fn grid_neighbor_counts() {
        let g = Grid::new(3, 3);
        assert_eq!(g.neighbors(0).collect::<Vec<_>>(), vec![1, 3, 4]);
        assert_eq!(g.neighbors(1).count(), 5);
        assert_eq!(g.neighbors(4).count(), 8);
        let g = Grid::new(5, 5);
        assert_eq!(g.neighbors(12).collect::<Vec<_>>(), vec![6, 7, 8, 11, 13, 16, 17, 18]);
    }

    #[test]
    fn grid_mismatch() {
        assert!(matches!(
            Grid::new(2, 3).check_nodes(5),
            Err(Error::GridMismatch { .. })
        ));
        Grid::new(2, 3).check_nodes(6).unwrap();
    }

    #[test]
    fn normalize_uniform_and_diagonal() {
        let s = row_normalize(Affinity::dense(array![[1.0, 1.0], [1.0, 1.0]]).unwrap()).unwrap();
        assert_eq!(s.to_dense(), array![[0.5, 0.5], [0.5, 0.5]]);
        let s = row_normalize(Affinity::dense(array![[2.0, 0.0], [0.0, 3.0]]).unwrap()).unwrap();
        assert_eq!(s.to_dense(), Array2::<f64>::eye(2));
    }

    #[test]
    fn normalize_rejects_empty_row() {
        let err = row_normalize(Affinity::dense(array![[1.0, 0.0], [-1.0, 0.0]]).unwrap());
        assert!(matches!(err, Err(Error::DegenerateRow { row: 1, .. })));
    }

    #[test]
    fn clamp_is_idempotent() {
        let mut a = array![[-1.0, 0.5], [0.0, -0.0]];
        clamp_nonnegative(&mut a);
        let once = a.clone();
        clamp_nonnegative(&mut a);
        assert_eq!(a, once);
    }

    #[test]
    fn low_rank_normalization_folds_into_left_factor() {
        let left = array![[1.0, 2.0], [0.5, 0.5], [3.0, 0.0]];
        let right = array![[1.0, 1.0], [2.0, 0.0], [0.0, 1.0]];
        let dense = left.dot(&right.t());
        let s = row_normalize(Affinity::low_rank(LowRank::new(left, right.clone()).unwrap())).unwrap();
        let Representation::LowRank(f) = s.repr() else {
            panic!("representation changed")
        };
        assert_eq!(f.right, right);
        let sd = s.to_dense();
        for i in 0..3 {
            let total: f64 = dense.row(i).sum();
            for j in 0..3 {
                assert!((sd[[i, j]] - dense[[i, j]] / total).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn stochastic_matrix_validates() {
        assert!(StochasticMatrix::new(Representation::Dense(array![[0.5, 0.6], [0.5, 0.5]])).is_err());
        assert!(StochasticMatrix::new(Representation::Dense(array![[1.5, -0.5], [0.5, 0.5]])).is_err());
        StochasticMatrix::new(Representation::Dense(array![[0.25, 0.75], [1.0, 0.0]])).unwrap();
    }

    #[test]
    fn sparse_product_matches_dense() {
        let rows = vec![
            vec![(0, 0.5), (2, 0.5)],
            vec![(1, 1.0)],
            vec![(0, 0.25), (1, 0.25), (2, 0.5)],
        ];
        let s = SparseRows::from_rows(rows).unwrap();
        let block = array![[1.0, 0.0], [0.0, 1.0], [0.5, 0.5]];
        let r = Representation::SparseLocal(s.clone());
        let got = r.apply(block.view()).unwrap();
        assert_eq!(got, s.to_dense().dot(&block));
    }

    #[test]
    fn mixture_weights_validated() {
        let i = StochasticMatrix::identity(3);
        assert!(Transition::mixture(vec![(0.5, i.clone()), (0.4, i.clone())]).is_err());
        assert!(Transition::mixture(vec![(1.5, i.clone()), (-0.5, i.clone())]).is_err());
        assert!(Transition::mixture(vec![(1.0, i), (0.0, StochasticMatrix::identity(4))]).is_err());
    }
}
