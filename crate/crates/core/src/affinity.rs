//! Global, local, and fused node-to-node affinities built from attention features.

use ndarray::{Array2, ArrayView2, Axis};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{check_dim, Error, Result};
use crate::matrix::{row_normalize, Affinity, Grid, LowRank, SparseRows, StochasticMatrix, Transition};

/// Norms below this mark a feature row as corrupt.
pub const MIN_ROW_NORM: f64 = 1e-12;

pub const DEFAULT_BETA: f64 = 0.5;
pub const DEFAULT_EPSILON_SELF: f64 = 1e-2;

/// Query/key projections of one attention head, one row per patch token.
#[derive(Debug, Clone, PartialEq)]
pub struct HeadFeatures {
    pub queries: Array2<f64>,
    pub keys: Array2<f64>,
    pub layer_index: u32,
    pub head_index: u32,
}

impl HeadFeatures {
    pub fn n(&self) -> usize {
        self.queries.nrows()
    }
}

/// Per-head features of one image together with its patch grid.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureBundle {
    heads: Vec<HeadFeatures>,
    grid: Grid,
    feature_dim: usize,
    source_tag: String,
}

impl FeatureBundle {
    pub fn new(
        heads: Vec<HeadFeatures>,
        grid: Grid,
        feature_dim: usize,
        source_tag: impl Into<String>,
    ) -> Result<Self> {
        if grid.height < 2 || grid.width < 2 {
            return Err(Error::InvalidFeatures(format!(
                "grid {}x{} must be at least 2x2",
                grid.height, grid.width
            )));
        }
        if feature_dim == 0 {
            return Err(Error::InvalidFeatures("feature dimension must be >= 1".into()));
        }
        if heads.is_empty() {
            return Err(Error::InvalidFeatures("bundle has no heads".into()));
        }
        let n = grid.nodes();
        for head in &heads {
            for (name, m) in [("queries", &head.queries), ("keys", &head.keys)] {
                if m.dim() != (n, feature_dim) {
                    return Err(Error::InvalidFeatures(format!(
                        "head {}/{} {name} has shape {:?}, expected ({n}, {feature_dim})",
                        head.layer_index,
                        head.head_index,
                        m.dim()
                    )));
                }
                if m.iter().any(|v| !v.is_finite()) {
                    return Err(Error::InvalidFeatures(format!(
                        "head {}/{} {name} contains non-finite values",
                        head.layer_index, head.head_index
                    )));
                }
            }
        }
        Ok(FeatureBundle {
            heads,
            grid,
            feature_dim,
            source_tag: source_tag.into(),
        })
    }

    pub fn heads(&self) -> &[HeadFeatures] {
        &self.heads
    }

    pub fn grid(&self) -> Grid {
        self.grid
    }

    pub fn n(&self) -> usize {
        self.grid.nodes()
    }

    pub fn feature_dim(&self) -> usize {
        self.feature_dim
    }

    pub fn source_tag(&self) -> &str {
        &self.source_tag
    }
}

/// Balance between global and local transitions, and the self-loop weight.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FusionParams {
    pub beta: f64,
    pub epsilon_self: f64,
}

impl Default for FusionParams {
    fn default() -> Self {
        FusionParams {
            beta: DEFAULT_BETA,
            epsilon_self: DEFAULT_EPSILON_SELF,
        }
    }
}

impl FusionParams {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.beta) {
            return Err(Error::invalid("beta", self.beta, "must lie in [0, 1]"));
        }
        if !(self.epsilon_self > 0.0 && self.epsilon_self.is_finite()) {
            return Err(Error::invalid("epsilon_self", self.epsilon_self, "must be > 0"));
        }
        Ok(())
    }
}

/// How negative cosine affinities are made nonnegative before normalization.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "kebab-case")]
pub enum NonNegPolicy {
    /// `max(cos, 0)`. Destroys the low-rank structure, so the result is dense.
    /// Rows left all zero fall back to a self-loop.
    Clamp,
    /// `(cos + 1) / 2`. Keeps a factored form of rank D+1.
    #[default]
    Shift,
}

/// Row-wise L2-normalized queries and keys; their product is the cosine matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct CosineFactors {
    pub queries: Array2<f64>,
    pub keys: Array2<f64>,
}

fn normalize_rows(m: ArrayView2<f64>, name: &'static str) -> Result<Array2<f64>> {
    let mut out = m.to_owned();
    for (i, mut row) in out.axis_iter_mut(Axis(0)).enumerate() {
        let norm = row.dot(&row).sqrt();
        if !(norm >= MIN_ROW_NORM) {
            return Err(Error::ZeroNormRow {
                matrix: name,
                row: i,
                norm,
            });
        }
        row.mapv_inplace(|v| v / norm);
    }
    Ok(out)
}

impl CosineFactors {
    pub fn to_dense(&self) -> Array2<f64> {
        self.queries.dot(&self.keys.t())
    }

    /// Cosine of token `i`'s query against token `j`'s key.
    pub fn cosine(&self, i: usize, j: usize) -> f64 {
        self.queries.row(i).dot(&self.keys.row(j))
    }

    /// Dense cosine matrix with negatives clamped to zero.
    pub fn clamped(&self) -> Affinity {
        let mut m = self.to_dense();
        crate::matrix::clamp_nonnegative(&mut m);
        Affinity::dense(m).expect("cosine matrix is square")
    }

    /// Factored `(cos + 1) / 2`: each factor gains a constant column `1/√2` and the
    /// normalized rows are scaled by `1/√2`.
    pub fn shifted(&self) -> Affinity {
        let half = std::f64::consts::FRAC_1_SQRT_2;
        let augment = |m: &Array2<f64>| {
            let (n, d) = m.dim();
            let mut out = Array2::from_elem((n, d + 1), half);
            out.slice_mut(ndarray::s![.., ..d]).assign(&(m * half));
            out
        };
        let factors = LowRank::new(augment(&self.queries), augment(&self.keys))
            .expect("factor shapes agree");
        Affinity::low_rank(factors)
    }

    /// [`Self::clamped`], except that a row with no positive cosine gets a
    /// self-loop so it can still be row-normalized.
    pub fn clamped_with_self_loops(&self) -> Affinity {
        let mut m = self.to_dense();
        crate::matrix::clamp_nonnegative(&mut m);
        for (i, mut row) in m.axis_iter_mut(Axis(0)).enumerate() {
            if row.sum() <= 0.0 {
                row[i] = 1.0;
            }
        }
        Affinity::dense(m).expect("cosine matrix is square")
    }

    pub fn with_policy(&self, policy: NonNegPolicy) -> Affinity {
        match policy {
            NonNegPolicy::Clamp => self.clamped_with_self_loops(),
            NonNegPolicy::Shift => self.shifted(),
        }
    }
}

/// Cosine affinity between every query and every key of one head, in factored form.
pub fn global_affinity(head: &HeadFeatures) -> Result<CosineFactors> {
    check_dim("query/key rows", head.queries.nrows(), head.keys.nrows())?;
    check_dim("query/key width", head.queries.ncols(), head.keys.ncols())?;
    Ok(CosineFactors {
        queries: normalize_rows(head.queries.view(), "queries")?,
        keys: normalize_rows(head.keys.view(), "keys")?,
    })
}

/// Sparse local affinity: `epsilon_self` on the diagonal, clamped cosine on the
/// 8-connected grid neighborhood, zero elsewhere.
pub fn local_affinity(head: &HeadFeatures, grid: Grid, epsilon_self: f64) -> Result<Affinity> {
    if !(epsilon_self > 0.0 && epsilon_self.is_finite()) {
        return Err(Error::invalid("epsilon_self", epsilon_self, "must be > 0"));
    }
    grid.check_nodes(head.n())?;
    let cos = global_affinity(head)?;
    local_from_factors(&cos, grid, epsilon_self)
}

pub(crate) fn local_from_factors(
    cos: &CosineFactors,
    grid: Grid,
    epsilon_self: f64,
) -> Result<Affinity> {
    grid.check_nodes(cos.queries.nrows())?;
    let rows = (0..grid.nodes())
        .map(|i| {
            let mut row: Vec<(usize, f64)> = grid
                .neighbors(i)
                .map(|j| (j, cos.cosine(i, j).max(0.0)))
                .collect();
            let at = row.partition_point(|&(j, _)| j < i);
            row.insert(at, (i, epsilon_self));
            row
        })
        .collect();
    Ok(Affinity::sparse(SparseRows::from_rows(rows)?))
}

/// `beta · global + (1 − beta) · local`, kept as a weighted pair.
pub fn fuse(global: StochasticMatrix, local: StochasticMatrix, beta: f64) -> Result<Transition> {
    if !(0.0..=1.0).contains(&beta) {
        return Err(Error::invalid("beta", beta, "must lie in [0, 1]"));
    }
    check_dim("fused transition size", global.n(), local.n())?;
    Transition::mixture(vec![(beta, global), (1.0 - beta, local)])
}

/// Unnormalized global and local affinities of one head.
#[derive(Debug, Clone)]
pub struct HeadAffinity {
    pub global: Affinity,
    pub local: Affinity,
}

impl HeadAffinity {
    /// Row-normalizes both parts and fuses them with `beta`.
    pub fn transition(&self, beta: f64) -> Result<Transition> {
        fuse(
            row_normalize(self.global.clone())?,
            row_normalize(self.local.clone())?,
            beta,
        )
    }
}

/// Builds global and local affinities for every head of a bundle in parallel.
pub fn head_affinities(
    bundle: &FeatureBundle,
    policy: NonNegPolicy,
    epsilon_self: f64,
) -> Result<Vec<HeadAffinity>> {
    bundle
        .heads()
        .par_iter()
        .map(|head| {
            let cos = global_affinity(head)?;
            Ok(HeadAffinity {
                global: cos.with_policy(policy),
                local: local_from_factors(&cos, bundle.grid(), epsilon_self)?,
            })
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::matrix::Representation;
    use ndarray::array;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn head(q: Array2<f64>, k: Array2<f64>) -> HeadFeatures {
        HeadFeatures {
            queries: q,
            keys: k,
            layer_index: 0,
            head_index: 0,
        }
    }

    fn random_head(rng: &mut ChaCha8Rng, n: usize, d: usize) -> HeadFeatures {
        let q = Array2::from_shape_fn((n, d), |_| rng.random_range(-1.0..1.0));
        let k = Array2::from_shape_fn((n, d), |_| rng.random_range(-1.0..1.0));
        head(q, k)
    }

    // Scalar-loop cosine, independent of the factored path.
    fn brute_cosine(h: &HeadFeatures) -> Array2<f64> {
        let n = h.n();
        let d = h.queries.ncols();
        Array2::from_shape_fn((n, n), |(i, j)| {
            let (mut dot, mut qq, mut kk) = (0.0, 0.0, 0.0);
            for c in 0..d {
                dot += h.queries[[i, c]] * h.keys[[j, c]];
                qq += h.queries[[i, c]] * h.queries[[i, c]];
                kk += h.keys[[j, c]] * h.keys[[j, c]];
            }
            dot / (qq.sqrt() * kk.sqrt())
        })
    }

    #[test]
    fn cosine_trivial_cases() {
        let cos = global_affinity(&head(array![[3.0, 4.0], [1.0, 0.0]], array![[3.0, 4.0], [0.0, 1.0]])).unwrap();
        assert!((cos.cosine(0, 0) - 1.0).abs() < 1e-15);
        assert_eq!(cos.cosine(1, 1), 0.0);
    }

    #[test]
    fn factored_matches_brute_force() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let h = random_head(&mut rng, 16, 4);
        let cos = global_affinity(&h).unwrap();
        let dense = cos.to_dense();
        let oracle = brute_cosine(&h);
        for (a, b) in dense.iter().zip(oracle.iter()) {
            assert!((a - b).abs() < 1e-6);
        }
    }

    #[test]
    fn shifted_factors_reproduce_affine_map() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let h = random_head(&mut rng, 12, 3);
        let oracle = brute_cosine(&h);
        let shifted = global_affinity(&h).unwrap().shifted();
        let Representation::LowRank(f) = shifted.repr() else {
            panic!("expected low-rank")
        };
        assert_eq!(f.rank(), 4);
        let dense = shifted.to_dense();
        for (a, b) in dense.iter().zip(oracle.iter()) {
            assert!((a - (b + 1.0) / 2.0).abs() < 1e-12);
            assert!(*a >= -1e-15);
        }
        let clamped = global_affinity(&h).unwrap().clamped().to_dense();
        for (a, b) in clamped.iter().zip(oracle.iter()) {
            assert!((a - b.max(0.0)).abs() < 1e-12);
        }
    }

    #[test]
    fn clamp_policy_keeps_isolated_rows_normalizable() {
        // Token 1's query points away from every key.
        let h = head(array![[1.0, 0.0], [-1.0, -1.0]], array![[1.0, 0.0], [0.0, 1.0]]);
        let cos = global_affinity(&h).unwrap();
        assert_eq!(cos.clamped().to_dense().row(1).sum(), 0.0);
        let a = cos.with_policy(NonNegPolicy::Clamp).to_dense();
        assert_eq!(a.row(1).to_vec(), vec![0.0, 1.0]);
        assert_eq!(a.row(0).to_vec(), vec![1.0, 0.0]);
        assert!(row_normalize(cos.with_policy(NonNegPolicy::Clamp)).is_ok());
    }

    #[test]
    fn zero_norm_rows_rejected() {
        let err = global_affinity(&head(array![[1.0, 0.0], [0.0, 0.0]], array![[1.0, 0.0], [0.0, 1.0]]));
        assert!(matches!(err, Err(Error::ZeroNormRow { matrix: "queries", row: 1, .. })));
        let err = global_affinity(&head(array![[1.0, 0.0], [0.0, 1.0]], array![[0.0, 0.0], [0.0, 1.0]]));
        assert!(matches!(err, Err(Error::ZeroNormRow { matrix: "keys", row: 0, .. })));
    }

    fn off_diagonal_count(a: &Affinity, i: usize) -> usize {
        let Representation::SparseLocal(s) = a.repr() else {
            panic!("expected sparse")
        };
        s.row(i).filter(|&(j, _)| j != i).count()
    }

    #[test]
    fn local_neighborhood_sizes() {
        let ones = Array2::from_elem((9, 2), 1.0);
        let a = local_affinity(&head(ones.clone(), ones), Grid::new(3, 3), 0.01).unwrap();
        assert_eq!(off_diagonal_count(&a, 0), 3);
        assert_eq!(off_diagonal_count(&a, 1), 5);
        assert_eq!(off_diagonal_count(&a, 4), 8);
        let ones = Array2::from_elem((25, 2), 1.0);
        let a = local_affinity(&head(ones.clone(), ones), Grid::new(5, 5), 0.01).unwrap();
        assert_eq!(off_diagonal_count(&a, 12), 8);
    }

    #[test]
    fn local_entries_follow_definition() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let h = random_head(&mut rng, 12, 3);
        let grid = Grid::new(3, 4);
        let oracle = brute_cosine(&h);
        let dense = local_affinity(&h, grid, 0.02).unwrap().to_dense();
        for i in 0..12 {
            let nbrs: Vec<usize> = grid.neighbors(i).collect();
            for j in 0..12 {
                let want = if i == j {
                    0.02
                } else if nbrs.contains(&j) {
                    oracle[[i, j]].max(0.0)
                } else {
                    0.0
                };
                assert!((dense[[i, j]] - want).abs() < 1e-12, "({i},{j})");
            }
        }
    }

    #[test]
    fn local_constant_features_give_equal_weights() {
        let q = Array2::from_shape_fn((16, 3), |(_, c)| [1.0, 2.0, 0.5][c]);
        let k = Array2::from_shape_fn((16, 3), |(_, c)| [0.3, 1.0, 1.0][c]);
        let cos = (1.0 * 0.3 + 2.0 * 1.0 + 0.5 * 1.0) / ((1.0f64 + 4.0 + 0.25).sqrt() * (0.09f64 + 1.0 + 1.0).sqrt());
        let a = local_affinity(&head(q, k), Grid::new(4, 4), 0.01).unwrap();
        let Representation::SparseLocal(s) = a.repr() else { unreachable!() };
        for i in 0..16 {
            for (j, v) in s.row(i) {
                if j != i {
                    assert!((v - cos).abs() < 1e-12);
                }
            }
        }
    }

    #[test]
    fn local_grid_mismatch() {
        let ones = Array2::from_elem((10, 2), 1.0);
        let err = local_affinity(&head(ones.clone(), ones), Grid::new(3, 3), 0.01);
        assert!(matches!(err, Err(Error::GridMismatch { .. })));
    }

    #[test]
    fn fuse_degenerate_weights_and_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let h = random_head(&mut rng, 8, 3);
        let grid = Grid::new(2, 4);
        let cos = global_affinity(&h).unwrap();
        let sg = row_normalize(cos.shifted()).unwrap();
        let sl = row_normalize(local_affinity(&h, grid, 0.01).unwrap()).unwrap();
        let g = Array2::from_shape_fn((8, 3), |_| rng.random::<f64>());
        let pg = sg.apply(g.view()).unwrap();
        let pl = sl.apply(g.view()).unwrap();

        let t1 = fuse(sg.clone(), sl.clone(), 1.0).unwrap();
        assert_eq!(t1.apply(g.view()).unwrap(), pg);
        let t0 = fuse(sg.clone(), sl.clone(), 0.0).unwrap();
        assert_eq!(t0.apply(g.view()).unwrap(), pl);

        let half = fuse(sg.clone(), sl.clone(), 0.5).unwrap();
        let oracle = (0.5 * sg.to_dense() + 0.5 * sl.to_dense()).dot(&g);
        let got = half.apply(g.view()).unwrap();
        for (a, b) in got.iter().zip(oracle.iter()) {
            assert!((a - b).abs() < 1e-9);
        }
    }

    #[test]
    fn fuse_rejects_bad_inputs() {
        let a = StochasticMatrix::identity(3);
        let b = StochasticMatrix::identity(4);
        assert!(matches!(fuse(a.clone(), b, 0.5), Err(Error::DimensionMismatch { .. })));
        assert!(fuse(a.clone(), a, 1.5).is_err());
    }

    #[test]
    fn bundle_validation() {
        let ones = Array2::from_elem((4, 2), 1.0);
        let h = head(ones.clone(), ones.clone());
        FeatureBundle::new(vec![h.clone()], Grid::new(2, 2), 2, "t").unwrap();
        assert!(FeatureBundle::new(vec![h.clone()], Grid::new(1, 4), 2, "t").is_err());
        assert!(FeatureBundle::new(vec![h.clone()], Grid::new(2, 2), 3, "t").is_err());
        let mut bad = h;
        bad.keys[[0, 0]] = f64::NAN;
        assert!(FeatureBundle::new(vec![bad], Grid::new(2, 2), 2, "t").is_err());
    }

    #[test]
    fn fusion_params_validate() {
        FusionParams::default().validate().unwrap();
        assert!(FusionParams { beta: 1.1, epsilon_self: 0.1 }.validate().is_err());
        assert!(FusionParams { beta: 0.5, epsilon_self: 0.0 }.validate().is_err());
    }
}
