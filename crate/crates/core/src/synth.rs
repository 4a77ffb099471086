//! Seeded synthetic inputs: random stochastic matrices for oracle checks and
//! labelled grid scenes that stand in for extracted attention features.

use ndarray::{Array2, Axis};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::affinity::{FeatureBundle, HeadFeatures};
use crate::error::Result;
use crate::format::{BundleFile, LabelInput};
use crate::label_gen::{g_from_probabilities, LabelGenerator};
use crate::matrix::{Grid, LowRank};

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Rounds through `f32` so values survive the on-disk format unchanged.
fn f32_exact(v: f64) -> f64 {
    v as f32 as f64
}

fn normalize_rows(m: &mut Array2<f64>) {
    for mut row in m.axis_iter_mut(Axis(0)) {
        let s = row.sum();
        row /= s;
    }
}

/// Dense row-stochastic matrix with uniform(0,1) entries before normalization.
pub fn random_stochastic(rng: &mut impl Rng, rows: usize, cols: usize) -> Array2<f64> {
    let mut m = Array2::from_shape_fn((rows, cols), |_| rng.random::<f64>() + 1e-3);
    normalize_rows(&mut m);
    m
}

/// Row-stochastic N×K generator with random class names.
pub fn random_generator(rng: &mut impl Rng, n: usize, k: usize) -> LabelGenerator {
    g_from_probabilities(random_stochastic(rng, n, k), class_names(k))
        .expect("random rows are stochastic")
}

/// Nonnegative factors `(q_tilde, kmat)` with `q_tilde · kmatᵀ` row-stochastic.
pub fn random_factored_stochastic(rng: &mut impl Rng, n: usize, d: usize) -> LowRank {
    let left = Array2::from_shape_fn((n, d), |_| rng.random::<f64>());
    let right = Array2::from_shape_fn((n, d), |_| rng.random::<f64>());
    let f = LowRank::new(left, right).expect("shapes agree");
    let sums = f.row_sums();
    let mut left = f.left;
    for (mut row, s) in left.axis_iter_mut(Axis(0)).zip(sums.iter()) {
        row /= *s;
    }
    LowRank::new(left, f.right).expect("shapes agree")
}

/// Heads with independent Gaussian queries and keys.
pub fn random_bundle(rng: &mut impl Rng, grid: Grid, d: usize, heads: usize) -> FeatureBundle {
    let n = grid.nodes();
    let heads = (0..heads)
        .map(|h| HeadFeatures {
            queries: Array2::from_shape_fn((n, d), |_| f32_exact(rng.sample(StandardNormal))),
            keys: Array2::from_shape_fn((n, d), |_| f32_exact(rng.sample(StandardNormal))),
            layer_index: (h / 5) as u32,
            head_index: (h % 5) as u32,
        })
        .collect();
    FeatureBundle::new(heads, grid, d, "random").expect("valid random bundle")
}

pub fn class_names(k: usize) -> Vec<String> {
    (0..k).map(|i| format!("class_{i}")).collect()
}

/// Parameters of a labelled synthetic scene.
#[derive(Debug, Clone)]
pub struct SceneSpec {
    pub grid: Grid,
    pub classes: usize,
    pub heads: usize,
    pub feature_dim: usize,
    /// Feature noise of the cleanest head; head `h` gets `(1 + h) ×` this.
    pub feature_noise: f64,
    /// Logit margin of the true class in the coarse probabilities.
    pub label_margin: f64,
    /// Standard deviation of logit noise in the coarse probabilities.
    pub label_noise: f64,
    /// Store cross-attention embeddings instead of precomputed probabilities.
    pub cross_attention: bool,
    pub seed: u64,
}

impl Default for SceneSpec {
    fn default() -> Self {
        SceneSpec {
            grid: Grid::new(24, 24),
            classes: 4,
            heads: 4,
            feature_dim: 16,
            feature_noise: 0.35,
            label_margin: 1.0,
            label_noise: 1.2,
            cross_attention: false,
            seed: 0,
        }
    }
}

/// A scene file together with its ground-truth labels.
#[derive(Debug, Clone)]
pub struct SyntheticScene {
    pub file: BundleFile,
    pub truth: Vec<u32>,
}

/// Voronoi regions of `classes` random seeds, one class per region.
fn region_labels(rng: &mut impl Rng, grid: Grid, classes: usize) -> Vec<u32> {
    let seeds: Vec<(f64, f64)> = (0..classes)
        .map(|_| {
            (
                rng.random::<f64>() * grid.height as f64,
                rng.random::<f64>() * grid.width as f64,
            )
        })
        .collect();
    (0..grid.nodes())
        .map(|i| {
            let (r, c) = ((i / grid.width) as f64, (i % grid.width) as f64);
            seeds
                .iter()
                .enumerate()
                .map(|(k, (sr, sc))| (k, (r - sr).powi(2) + (c - sc).powi(2)))
                .fold((0, f64::INFINITY), |best, cur| if cur.1 < best.1 { cur } else { best })
                .0 as u32
        })
        .collect()
}

fn unit_embeddings(rng: &mut impl Rng, k: usize, d: usize) -> Array2<f64> {
    let mut e = Array2::from_shape_fn((k, d), |_| rng.sample::<f64, _>(StandardNormal));
    for mut row in e.axis_iter_mut(Axis(0)) {
        let norm = row.dot(&row).sqrt().max(1e-9);
        row /= norm;
    }
    e
}

/// Builds a labelled scene: features cluster by region, coarse labels are noisy.
pub fn scene(spec: &SceneSpec) -> Result<SyntheticScene> {
    let mut rng = rng(spec.seed);
    let grid = spec.grid;
    let (n, d, k) = (grid.nodes(), spec.feature_dim, spec.classes);
    let truth = region_labels(&mut rng, grid, k);
    let embed = unit_embeddings(&mut rng, k, d);

    let heads = (0..spec.heads)
        .map(|h| {
            let sigma = spec.feature_noise * (1.0 + h as f64);
            let noisy = |rng: &mut ChaCha8Rng| {
                Array2::from_shape_fn((n, d), |(i, c)| {
                    let noise: f64 = rng.sample(StandardNormal);
                    f32_exact(embed[[truth[i] as usize, c]] + sigma * noise)
                })
            };
            HeadFeatures {
                queries: noisy(&mut rng),
                keys: noisy(&mut rng),
                layer_index: (h / 5) as u32,
                head_index: (h % 5) as u32,
            }
        })
        .collect();
    let bundle = FeatureBundle::new(heads, grid, d, format!("synthetic seed={}", spec.seed))?;

    let labels = if spec.cross_attention {
        let scale = spec.label_margin * (d as f64).sqrt();
        let token_queries = Array2::from_shape_fn((n, d), |(i, c)| {
            let noise: f64 = rng.sample(StandardNormal);
            f32_exact(scale * embed[[truth[i] as usize, c]] + spec.label_noise * noise)
        });
        let prompt_keys = embed.mapv(f32_exact);
        LabelInput::CrossAttention {
            token_queries,
            prompt_keys,
        }
    } else {
        let mut logits = Array2::from_shape_fn((n, k), |(i, c)| {
            let noise: f64 = rng.sample(StandardNormal);
            let margin = if truth[i] as usize == c { spec.label_margin } else { 0.0 };
            margin + spec.label_noise * noise
        });
        for mut row in logits.axis_iter_mut(Axis(0)) {
            let max = row.fold(f64::NEG_INFINITY, |m, &v| m.max(v));
            row.mapv_inplace(|v| (v - max).exp());
            let s = row.sum();
            row.mapv_inplace(|v| f32_exact(v / s));
        }
        LabelInput::Probabilities(logits)
    };

    Ok(SyntheticScene {
        file: BundleFile {
            bundle,
            class_names: class_names(k),
            labels,
        },
        truth,
    })
}

/// Pixel accuracy and mean IoU of `pred` against `truth`.
pub fn score(pred: &[u32], truth: &[u32], classes: usize) -> (f64, f64) {
    let correct = pred.iter().zip(truth).filter(|(a, b)| a == b).count();
    let mut ious = Vec::new();
    for c in 0..classes as u32 {
        let inter = pred.iter().zip(truth).filter(|(a, b)| **a == c && **b == c).count();
        let union = pred.iter().zip(truth).filter(|(a, b)| **a == c || **b == c).count();
        if union > 0 {
            ious.push(inter as f64 / union as f64);
        }
    }
    let miou = if ious.is_empty() { 0.0 } else { ious.iter().sum::<f64>() / ious.len() as f64 };
    (correct as f64 / truth.len().max(1) as f64, miou)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::format::{decode_bundle, encode_bundle};

    #[test]
    fn scenes_are_deterministic_and_survive_encoding() {
        for cross in [false, true] {
            let spec = SceneSpec {
                grid: Grid::new(6, 5),
                cross_attention: cross,
                seed: 9,
                ..Default::default()
            };
            let a = scene(&spec).unwrap();
            let b = scene(&spec).unwrap();
            assert_eq!(a.file, b.file);
            assert_eq!(a.truth, b.truth);
            let back = decode_bundle(&encode_bundle(&a.file).unwrap()).unwrap();
            assert_eq!(back.bundle, a.file.bundle);
            back.label_generator().unwrap();
        }
    }

    #[test]
    fn factored_instances_are_stochastic() {
        let mut r = rng(1);
        let f = random_factored_stochastic(&mut r, 20, 3);
        for s in f.row_sums() {
            assert!((s - 1.0).abs() < 1e-12);
        }
        assert!(f.to_dense().iter().all(|v| *v >= 0.0));
    }

    #[test]
    fn score_counts() {
        let (acc, miou) = score(&[0, 0, 1, 1], &[0, 1, 1, 1], 2);
        assert_eq!(acc, 0.75);
        assert!((miou - (0.5 + 2.0 / 3.0) / 2.0).abs() < 1e-12);
    }
}
