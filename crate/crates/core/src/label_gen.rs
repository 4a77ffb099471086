//! Node-to-label generation matrix.

use ndarray::{Array2, ArrayView2, Axis};

use crate::error::{check_dim, Error, Result};

/// Entries below this are rejected as negative probabilities.
pub const NEGATIVE_TOL: f64 = 1e-9;
/// Allowed deviation of an input row sum from 1 before renormalization.
pub const ROW_SUM_TOL: f64 = 1e-4;

/// Row-stochastic N×K matrix giving each node's label distribution when the walk stops.
#[derive(Debug, Clone, PartialEq)]
pub struct LabelGenerator {
    g: Array2<f64>,
    class_names: Vec<String>,
    scale_dim: usize,
}

impl LabelGenerator {
    pub fn matrix(&self) -> &Array2<f64> {
        &self.g
    }

    pub fn view(&self) -> ArrayView2<'_, f64> {
        self.g.view()
    }

    pub fn class_names(&self) -> &[String] {
        &self.class_names
    }

    /// Dimension used for the `√D` score temperature; 0 when built from probabilities.
    pub fn scale_dim(&self) -> usize {
        self.scale_dim
    }

    pub fn n(&self) -> usize {
        self.g.nrows()
    }

    pub fn classes(&self) -> usize {
        self.g.ncols()
    }

    fn check_names(k: usize, class_names: &[String]) -> Result<()> {
        if k == 0 {
            return Err(Error::invalid("classes", 0, "need at least one class"));
        }
        check_dim("class name count", k, class_names.len())
    }
}

/// Row-wise `softmax(token_queries · prompt_keysᵀ / √D)`.
pub fn cross_attention_g(
    token_queries: ArrayView2<f64>,
    prompt_keys: ArrayView2<f64>,
    class_names: Vec<String>,
) -> Result<LabelGenerator> {
    check_dim("query/prompt embedding width", token_queries.ncols(), prompt_keys.ncols())?;
    LabelGenerator::check_names(prompt_keys.nrows(), &class_names)?;
    let d = token_queries.ncols();
    if d == 0 {
        return Err(Error::invalid("embedding dimension", 0, "must be >= 1"));
    }
    if token_queries.iter().chain(prompt_keys.iter()).any(|v| !v.is_finite()) {
        return Err(Error::InvalidFeatures("non-finite embedding entry".into()));
    }
    let mut scores = token_queries.dot(&prompt_keys.t());
    scores /= (d as f64).sqrt();
    Ok(LabelGenerator {
        g: softmax_rows(scores),
        class_names,
        scale_dim: d,
    })
}

/// Row-wise softmax with max subtraction.
pub(crate) fn softmax_rows(mut scores: Array2<f64>) -> Array2<f64> {
    for mut row in scores.axis_iter_mut(Axis(0)) {
        let max = row.fold(f64::NEG_INFINITY, |m, &v| m.max(v));
        row.mapv_inplace(|v| (v - max).exp());
        let total = row.sum();
        row /= total;
    }
    scores
}

/// Accepts precomputed per-node class probabilities and renormalizes rows exactly.
pub fn g_from_probabilities(probs: Array2<f64>, class_names: Vec<String>) -> Result<LabelGenerator> {
    LabelGenerator::check_names(probs.ncols(), &class_names)?;
    let mut g = probs;
    for (i, mut row) in g.axis_iter_mut(Axis(0)).enumerate() {
        if let Some(v) = row.iter().find(|v| !(**v >= -NEGATIVE_TOL) || !v.is_finite()) {
            return Err(Error::NotAProbability {
                row: i,
                reason: format!("entry {v}"),
            });
        }
        row.mapv_inplace(|v| v.max(0.0));
        let total = row.sum();
        if (total - 1.0).abs() > ROW_SUM_TOL {
            return Err(Error::NotAProbability {
                row: i,
                reason: format!("row sums to {total}"),
            });
        }
        row /= total;
    }
    Ok(LabelGenerator {
        g,
        class_names,
        scale_dim: 0,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn names(k: usize) -> Vec<String> {
        (0..k).map(|i| format!("c{i}")).collect()
    }

    #[test]
    fn uniform_scores_give_uniform_rows() {
        let q = Array2::from_elem((3, 2), 1.0);
        let k = Array2::from_elem((4, 2), 0.5);
        let g = cross_attention_g(q.view(), k.view(), names(4)).unwrap();
        assert!(g.matrix().iter().all(|v| (v - 0.25).abs() < 1e-15));
        assert_eq!(g.scale_dim(), 2);
    }

    #[test]
    fn single_class_is_certain() {
        let q = array![[1.0, -3.0], [100.0, 2.0]];
        let k = array![[0.2, 0.1]];
        let g = cross_attention_g(q.view(), k.view(), names(1)).unwrap();
        assert!(g.matrix().iter().all(|v| *v == 1.0));
    }

    #[test]
    fn matches_scalar_softmax_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(10);
        let q = Array2::from_shape_fn((4, 5), |_| rng.random_range(-2.0..2.0));
        let k = Array2::from_shape_fn((3, 5), |_| rng.random_range(-2.0..2.0));
        let g = cross_attention_g(q.view(), k.view(), names(3)).unwrap();
        for i in 0..4 {
            let mut s = [0.0; 3];
            for (c, slot) in s.iter_mut().enumerate() {
                for d in 0..5 {
                    *slot += q[[i, d]] * k[[c, d]];
                }
                *slot /= 5f64.sqrt();
            }
            let z: f64 = s.iter().map(|v| v.exp()).sum();
            for (c, score) in s.iter().enumerate() {
                assert!((g.matrix()[[i, c]] - score.exp() / z).abs() < 1e-9);
            }
            assert!((g.matrix().row(i).sum() - 1.0).abs() < 1e-9);
        }
    }

    #[test]
    fn large_scores_stay_finite() {
        let q = array![[1e4, 0.0]];
        let k = array![[1.0, 0.0], [-1.0, 0.0]];
        let g = cross_attention_g(q.view(), k.view(), names(2)).unwrap();
        assert_eq!(g.matrix().row(0).to_vec(), vec![1.0, 0.0]);
    }

    #[test]
    fn shift_invariance_per_row() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let scores = Array2::from_shape_fn((3, 4), |_| rng.random_range(-3.0..3.0));
        let base = softmax_rows(scores.clone());
        let mut shifted = scores;
        shifted.row_mut(1).mapv_inplace(|v| v + 42.0);
        let shifted = softmax_rows(shifted);
        for (a, b) in base.iter().zip(shifted.iter()) {
            assert!((a - b).abs() < 1e-9);
        }
    }

    #[test]
    fn temperature_tracks_dimension() {
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let q = Array2::from_shape_fn((5, 3), |_| rng.random_range(-2.0..2.0));
        let k = Array2::from_shape_fn((4, 3), |_| rng.random_range(-2.0..2.0));
        let base = cross_attention_g(q.view(), k.view(), names(4)).unwrap();
        // Padding to 2D columns doubles the temperature; scaling queries by √2 scales scores by √2.
        let mut q2 = Array2::zeros((5, 6));
        q2.slice_mut(ndarray::s![.., ..3]).assign(&(&q * 2f64.sqrt()));
        let mut k2 = Array2::zeros((4, 6));
        k2.slice_mut(ndarray::s![.., ..3]).assign(&k);
        let wide = cross_attention_g(q2.view(), k2.view(), names(4)).unwrap();
        for (a, b) in base.matrix().iter().zip(wide.matrix().iter()) {
            assert!((a - b).abs() < 1e-9);
        }
    }

    #[test]
    fn probabilities_renormalized() {
        let g = g_from_probabilities(array![[0.2, 0.8], [0.50005, 0.5]], names(2)).unwrap();
        assert!((g.matrix().row(1).sum() - 1.0).abs() < 1e-12);
        assert_eq!(g.matrix().row(0).to_vec(), vec![0.2, 0.8]);
    }

    #[test]
    fn probabilities_rejected() {
        let err = g_from_probabilities(array![[1.01, -0.01]], names(2));
        assert!(matches!(err, Err(Error::NotAProbability { row: 0, .. })));
        let err = g_from_probabilities(array![[0.5, 0.4]], names(2));
        assert!(matches!(err, Err(Error::NotAProbability { .. })));
        let err = g_from_probabilities(array![[0.5, 0.5]], names(3));
        assert!(matches!(err, Err(Error::DimensionMismatch { .. })));
    }

    #[test]
    fn dimension_mismatch() {
        let q = Array2::<f64>::zeros((2, 3));
        let k = Array2::<f64>::zeros((2, 4));
        assert!(matches!(
            cross_attention_g(q.view(), k.view(), names(2)),
            Err(Error::DimensionMismatch { .. })
        ));
    }
}
