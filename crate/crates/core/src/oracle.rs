//! Reference computations written with plain loops over dense arrays, and
//! the equivalence suite that compares the engine against them.
//!
//! Nothing here reuses the engine's matrix representations: each reference
//! rebuilds its dense operands from the raw inputs.

use ndarray::{Array2, ArrayView2, Axis};
use rand::Rng;
use serde::Serialize;

use crate::affinity::{FeatureBundle, NonNegPolicy};
use crate::entropy_fusion::{fuse_heads, head_weights, FusionMode};
use crate::error::Result;
use crate::format::{BundleFile, LabelInput};
use crate::label_gen::LabelGenerator;
use crate::matrix::{Affinity, Grid, LowRank};
use crate::pipeline::{build_transition, PipelineConfig, StageTimings};
use crate::synth;
use crate::walk::{
    exact_walk_dense, exact_walk_woodbury, max_row_sum_error, residual_l1, truncated_walk,
    TruncatedWalk, WalkConfig,
};

pub fn matmul(a: ArrayView2<f64>, b: ArrayView2<f64>) -> Array2<f64> {
    assert_eq!(a.ncols(), b.nrows());
    let mut out = Array2::zeros((a.nrows(), b.ncols()));
    for i in 0..a.nrows() {
        for k in 0..a.ncols() {
            let aik = a[[i, k]];
            for j in 0..b.ncols() {
                out[[i, j]] += aik * b[[k, j]];
            }
        }
    }
    out
}

pub fn max_abs_diff(a: ArrayView2<f64>, b: ArrayView2<f64>) -> f64 {
    assert_eq!(a.dim(), b.dim());
    a.iter().zip(b.iter()).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}

/// `(1 − α) Σ_{t<terms} αᵗ Sᵗ G`, by Horner's rule.
pub fn power_series(s: ArrayView2<f64>, g: ArrayView2<f64>, alpha: f64, terms: usize) -> Array2<f64> {
    let mut acc = g.to_owned();
    for _ in 1..terms {
        acc = &g + &(matmul(s, acc.view()) * alpha);
    }
    acc * (1.0 - alpha)
}

/// Unnormalized partial sum `(1 − α) Σ_{t≤L} αᵗ Sᵗ G` from explicit powers.
pub fn partial_sum(s: ArrayView2<f64>, g: ArrayView2<f64>, alpha: f64, steps: usize) -> Array2<f64> {
    let mut power_g = g.to_owned();
    let mut acc = g.to_owned() * (1.0 - alpha);
    let mut coeff = 1.0 - alpha;
    for _ in 0..steps {
        power_g = matmul(s, power_g.view());
        coeff *= alpha;
        acc = acc + &power_g * coeff;
    }
    acc
}

/// Normalized truncated walk `P_L`.
pub fn truncated(s: ArrayView2<f64>, g: ArrayView2<f64>, alpha: f64, steps: usize) -> Array2<f64> {
    let norm = 1.0 - alpha.powi(steps as i32 + 1);
    partial_sum(s, g, alpha, steps) / norm
}

/// Cosine similarity of every query row against every key row.
pub fn cosine_matrix(q: ArrayView2<f64>, k: ArrayView2<f64>) -> Array2<f64> {
    let norm = |m: ArrayView2<f64>, i: usize| m.row(i).iter().map(|v| v * v).sum::<f64>().sqrt();
    Array2::from_shape_fn((q.nrows(), k.nrows()), |(i, j)| {
        let dot: f64 = (0..q.ncols()).map(|c| q[[i, c]] * k[[j, c]]).sum();
        dot / (norm(q, i) * norm(k, j))
    })
}

pub fn normalize_rows(m: &Array2<f64>) -> Array2<f64> {
    let mut out = m.clone();
    for mut row in out.axis_iter_mut(Axis(0)) {
        let s: f64 = row.iter().sum();
        row.mapv_inplace(|v| v / s);
    }
    out
}

/// Dense local affinity: neighbor cosines clamped at 0, `eps` on the diagonal.
pub fn local_dense(cos: &Array2<f64>, grid: Grid, eps: f64) -> Array2<f64> {
    let n = grid.nodes();
    let mut a = Array2::zeros((n, n));
    for i in 0..n {
        let (r, c) = ((i / grid.width) as isize, (i % grid.width) as isize);
        for dr in -1..=1isize {
            for dc in -1..=1isize {
                let (rr, cc) = (r + dr, c + dc);
                if rr < 0 || cc < 0 || rr >= grid.height as isize || cc >= grid.width as isize {
                    continue;
                }
                let j = rr as usize * grid.width + cc as usize;
                a[[i, j]] = if i == j { eps } else { cos[[i, j]].max(0.0) };
            }
        }
    }
    a
}

pub fn softmax(scores: &[f64]) -> Vec<f64> {
    let max = scores.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = scores.iter().map(|s| (s - max).exp()).collect();
    let total: f64 = exps.iter().sum();
    exps.iter().map(|e| e / total).collect()
}

/// Mean row entropy, natural log, with `0 ln 0 = 0`.
pub fn entropy(p: ArrayView2<f64>) -> f64 {
    let mut total = 0.0;
    for v in p.iter() {
        if *v > 0.0 {
            total -= v * v.ln();
        }
    }
    total / p.nrows() as f64
}

/// Dense transition of the whole pipeline rebuilt from raw features.
pub fn dense_pipeline_transition(
    bundle: &FeatureBundle,
    g: ArrayView2<f64>,
    beta: f64,
    eps: f64,
    temperature: f64,
) -> (Array2<f64>, Vec<f64>) {
    let grid = bundle.grid();
    let per_head: Vec<Array2<f64>> = bundle
        .heads()
        .iter()
        .map(|h| {
            let cos = cosine_matrix(h.queries.view(), h.keys.view());
            let global = normalize_rows(&cos.mapv(|v| (v + 1.0) / 2.0));
            let local = normalize_rows(&local_dense(&cos, grid, eps));
            global * beta + local * (1.0 - beta)
        })
        .collect();
    let scores: Vec<f64> = per_head
        .iter()
        .map(|s| -temperature * entropy(matmul(s.view(), g).view()))
        .collect();
    let w = softmax(&scores);
    let n = grid.nodes();
    let mut s = Array2::zeros((n, n));
    for (sh, wh) in per_head.iter().zip(&w) {
        s = s + sh * *wh;
    }
    (s, w)
}

/// Largest row-sum deviations seen across a suite.
#[derive(Debug, Clone, Copy, Default, Serialize)]
pub struct RowSumLedger {
    /// `max |row sum − 1|` over final walk outputs.
    pub final_error: f64,
    /// `max |row sum − (1 − α^(L+1))|` over unnormalized partial sums.
    pub partial_error: f64,
}

impl RowSumLedger {
    pub fn record_final(&mut self, p: ArrayView2<f64>) {
        self.final_error = self.final_error.max(max_row_sum_error(p, 1.0));
    }

    pub fn record_partial(&mut self, p: ArrayView2<f64>, alpha: f64, steps: usize) {
        let target = 1.0 - alpha.powi(steps as i32 + 1);
        self.partial_error = self.partial_error.max(max_row_sum_error(p, target));
    }
}

/// Outcome of one equivalence check.
#[derive(Debug, Clone, Serialize)]
pub struct Check {
    pub name: String,
    pub instances: usize,
    pub max_deviation: f64,
    pub tolerance: f64,
    pub passed: bool,
}

impl Check {
    fn new(name: &str, instances: usize, max_deviation: f64, tolerance: f64) -> Self {
        Check {
            name: name.to_owned(),
            instances,
            max_deviation,
            tolerance,
            passed: max_deviation <= tolerance,
        }
    }
}

/// Exact dense solve against a long power series on random stochastic matrices.
pub fn check_exact_dense(
    rng: &mut impl Rng,
    instances: usize,
    max_n: usize,
    max_k: usize,
    terms: usize,
    ledger: &mut RowSumLedger,
) -> Result<Check> {
    let mut worst = 0.0f64;
    for i in 0..instances {
        let alpha = if i % 2 == 0 { 0.5 } else { 0.9 };
        let n = rng.random_range(2..=max_n);
        let k = rng.random_range(1..=max_k);
        let s = synth::random_stochastic(rng, n, n);
        let g = synth::random_generator(rng, n, k);
        let exact = exact_walk_dense(s.view(), &g, alpha)?;
        ledger.record_final(exact.p.view());
        let series = power_series(s.view(), g.view(), alpha, terms);
        worst = worst.max(max_abs_diff(exact.p.view(), series.view()));
    }
    Ok(Check::new("exact-dense-vs-series", instances, worst, 1e-6))
}

/// Measured tail mass `Σ (P̃_∞ − P̃_L)` against `N·α^(L+1)`.
pub fn check_tail(
    rng: &mut impl Rng,
    sizes: &[usize],
    steps: &[usize],
    alphas: &[f64],
    ledger: &mut RowSumLedger,
) -> Result<Check> {
    let mut worst = 0.0f64;
    let mut count = 0;
    for &n in sizes {
        for &alpha in alphas {
            let s = synth::random_stochastic(rng, n, n);
            let k = rng.random_range(1..=6);
        let g = synth::random_generator(rng, n, k);
            let exact = exact_walk_dense(s.view(), &g, alpha)?;
            for &l in steps {
                let partial = partial_sum(s.view(), g.view(), alpha, l);
                ledger.record_partial(partial.view(), alpha, l);
                let measured: f64 = (&exact.p - &partial).sum();
                worst = worst.max((measured - residual_l1(alpha, l, n)).abs());
                count += 1;
            }
        }
    }
    Ok(Check::new("tail-mass", count, worst, 1e-9))
}

/// Woodbury solve against the dense solve of the densified factors.
pub fn check_woodbury(
    rng: &mut impl Rng,
    instances: usize,
    max_n: usize,
    max_d: usize,
    ledger: &mut RowSumLedger,
) -> Result<Check> {
    let mut worst = 0.0f64;
    for i in 0..instances {
        let alpha = [0.5, 0.9, 0.99][i % 3];
        let n = rng.random_range(max_d.max(2)..=max_n);
        let d = rng.random_range(1..=max_d);
        let f: LowRank = synth::random_factored_stochastic(rng, n, d);
        let k = rng.random_range(1..=8);
        let g = synth::random_generator(rng, n, k);
        let fast = exact_walk_woodbury(f.left.view(), f.right.view(), &g, alpha)?;
        let dense = exact_walk_dense(matmul(f.left.view(), f.right.t()).view(), &g, alpha)?;
        ledger.record_final(fast.p.view());
        worst = worst.max(max_abs_diff(fast.p.view(), dense.p.view()));
    }
    Ok(Check::new("woodbury-vs-dense", instances, worst, 1e-6))
}

/// Full engine path (low-rank global + sparse local, entropy weights,
/// iterative walk) against the densified reference.
pub fn check_path_equivalence(
    rng: &mut impl Rng,
    grids: &[Grid],
    heads: usize,
    feature_dim: usize,
    steps: usize,
    ledger: &mut RowSumLedger,
) -> Result<Check> {
    let mut worst = 0.0f64;
    for &grid in grids {
        let n = grid.nodes();
        let bundle = synth::random_bundle(rng, grid, feature_dim, heads);
        let k = rng.random_range(2..=8);
        let g = synth::random_generator(rng, n, k);
        let file = BundleFile {
            bundle,
            class_names: g.class_names().to_vec(),
            labels: LabelInput::Probabilities(g.matrix().clone()),
        };
        let cfg = PipelineConfig {
            walk: WalkConfig { steps, ..Default::default() },
            fusion: FusionMode::Weighted,
            nonneg: NonNegPolicy::Shift,
            ..Default::default()
        };
        let fused = build_transition(&file, &g, &cfg, &mut StageTimings::default())?;

        let mut walk = TruncatedWalk::new(&fused.transition, &g, cfg.walk.alpha)?;
        for l in 0..=steps {
            walk.advance_to(l)?;
            ledger.record_partial(walk.partial().view(), cfg.walk.alpha, l);
        }
        let fast = truncated_walk(&fused.transition, &g, &cfg.walk)?;
        ledger.record_final(fast.p.view());

        let beta = cfg.walk.fusion.beta;
        let (s, w) = dense_pipeline_transition(
            &file.bundle,
            g.view(),
            beta,
            cfg.walk.fusion.epsilon_self,
            cfg.walk.temperature,
        );
        let reference = truncated(s.view(), g.view(), cfg.walk.alpha, steps);
        let weight_gap = w
            .iter()
            .zip(&fused.weighting.weights)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max);
        worst = worst
            .max(max_abs_diff(fast.p.view(), reference.view()))
            .max(weight_gap);
    }
    Ok(Check::new("lowrank-sparse-vs-dense-path", grids.len(), worst, 1e-5))
}

/// Closed-form and structural properties of the entropy weights.
#[derive(Debug, Clone, Copy, Default, Serialize)]
pub struct WeightProperties {
    pub vectors: usize,
    /// Largest deviation from the scalar softmax reference.
    pub softmax_deviation: f64,
    /// Largest deviation from permutation equivariance.
    pub symmetry_deviation: f64,
    /// Number of pairs where lower entropy did not receive strictly larger weight.
    pub monotonicity_violations: usize,
    /// Largest deviation from uniform at `c = 1e-3`.
    pub low_temperature_deviation: f64,
    /// Largest deviation from the argmin indicator at `c = 1e3`.
    pub high_temperature_deviation: f64,
    /// Largest `|Σw − 1|`.
    pub sum_deviation: f64,
}

/// Entropy vectors are drawn on a 0.01 lattice so that distinct entries are
/// separated enough for the `c = 1e3` limit to be visible at 1e-3.
pub fn weight_properties(rng: &mut impl Rng, vectors: usize) -> Result<WeightProperties> {
    let mut out = WeightProperties {
        vectors,
        ..Default::default()
    };
    for _ in 0..vectors {
        let h = rng.random_range(1..=16);
        let entropies: Vec<f64> = (0..h).map(|_| rng.random_range(0..=300) as f64 * 0.01).collect();
        let c: f64 = rng.random_range(0.1..10.0);
        let w = head_weights(&entropies, c)?;

        let scores: Vec<f64> = entropies.iter().map(|e| -c * e).collect();
        for (a, b) in w.iter().zip(softmax(&scores)) {
            out.softmax_deviation = out.softmax_deviation.max((a - b).abs());
        }
        out.sum_deviation = out.sum_deviation.max((w.iter().sum::<f64>() - 1.0).abs());
        for i in 0..h {
            for j in 0..h {
                if entropies[i] < entropies[j] && w[i] <= w[j] {
                    out.monotonicity_violations += 1;
                }
            }
        }

        let mut perm: Vec<usize> = (0..h).collect();
        for i in (1..h).rev() {
            perm.swap(i, rng.random_range(0..=i));
        }
        let permuted: Vec<f64> = perm.iter().map(|&i| entropies[i]).collect();
        let wp = head_weights(&permuted, c)?;
        for (pos, &i) in perm.iter().enumerate() {
            out.symmetry_deviation = out.symmetry_deviation.max((wp[pos] - w[i]).abs());
        }

        let cold = head_weights(&entropies, 1e-3)?;
        for v in &cold {
            out.low_temperature_deviation = out.low_temperature_deviation.max((v - 1.0 / h as f64).abs());
        }
        let hot = head_weights(&entropies, 1e3)?;
        let min = entropies.iter().cloned().fold(f64::INFINITY, f64::min);
        let ties = entropies.iter().filter(|e| **e == min).count() as f64;
        for (v, e) in hot.iter().zip(&entropies) {
            let limit = if *e == min { 1.0 / ties } else { 0.0 };
            out.high_temperature_deviation = out.high_temperature_deviation.max((v - limit).abs());
        }
    }
    Ok(out)
}

/// Weighted fusion of identical heads must return that head, for each representation.
pub fn check_identical_heads(rng: &mut impl Rng, instances: usize) -> Result<Check> {
    let mut worst = 0.0f64;
    for _ in 0..instances {
        let n = rng.random_range(4..=40);
        let h = rng.random_range(1..=6);
        let raw: Vec<f64> = (0..h).map(|_| rng.random::<f64>() + 1e-3).collect();
        let total: f64 = raw.iter().sum();
        let w: Vec<f64> = raw.iter().map(|v| v / total).collect();

        let dense = Affinity::dense(synth::random_stochastic(rng, n, n))?;
        let lr = Affinity::low_rank(synth::random_factored_stochastic(rng, n, 3));
        let side = rng.random_range(2..=6);
        let grid = Grid::new(side, n.div_ceil(side).max(2));
        let bundle = synth::random_bundle(rng, grid, 3, 1);
        let sparse = crate::affinity::local_affinity(&bundle.heads()[0], grid, 0.01)?;
        for a in [dense, lr, sparse] {
            let fused = fuse_heads(&vec![a.clone(); h], &w)?;
            worst = worst.max(max_abs_diff(fused.to_dense().view(), a.to_dense().view()));
        }
    }
    Ok(Check::new("identical-heads-fusion", instances, worst, 1e-9))
}

/// Global affinity and label softmax against their loop definitions.
pub fn check_primitives(rng: &mut impl Rng, instances: usize) -> Result<Check> {
    let mut worst = 0.0f64;
    for _ in 0..instances {
        let grid = Grid::new(rng.random_range(2..=7), rng.random_range(2..=7));
        let d = rng.random_range(1..=8);
        let bundle = synth::random_bundle(rng, grid, d, 1);
        let head = &bundle.heads()[0];
        let cos = crate::affinity::global_affinity(head)?.to_dense();
        let reference = cosine_matrix(head.queries.view(), head.keys.view());
        worst = worst.max(max_abs_diff(cos.view(), reference.view()));

        let k = rng.random_range(1..=5);
        let keys = Array2::from_shape_fn((k, d), |_| rng.random_range(-2.0..2.0));
        let g: LabelGenerator = crate::label_gen::cross_attention_g(
            head.queries.view(),
            keys.view(),
            synth::class_names(k),
        )?;
        let scale = (d as f64).sqrt();
        for i in 0..grid.nodes() {
            let scores: Vec<f64> = (0..k)
                .map(|c| (0..d).map(|j| head.queries[[i, j]] * keys[[c, j]]).sum::<f64>() / scale)
                .collect();
            for (c, v) in softmax(&scores).iter().enumerate() {
                worst = worst.max((g.matrix()[[i, c]] - v).abs());
            }
        }
    }
    Ok(Check::new("cosine-and-label-softmax", instances, worst, 1e-12))
}

/// The equivalence suite at sizes that finish in about a second.
pub fn verify_suite(seed: u64) -> Result<Vec<Check>> {
    let mut rng = synth::rng(seed);
    let mut ledger = RowSumLedger::default();
    let mut checks = vec![
        check_exact_dense(&mut rng, 20, 48, 8, 500, &mut ledger)?,
        check_tail(&mut rng, &[4, 17, 32], &[0, 3, 10, 50], &[0.5, 0.9], &mut ledger)?,
        check_woodbury(&mut rng, 12, 128, 16, &mut ledger)?,
        check_path_equivalence(
            &mut rng,
            &[Grid::new(5, 7), Grid::new(8, 8)],
            4,
            8,
            40,
            &mut ledger,
        )?,
        check_identical_heads(&mut rng, 10)?,
        check_primitives(&mut rng, 10)?,
    ];
    let props = weight_properties(&mut rng, 200)?;
    checks.push(Check::new(
        "head-weight-properties",
        props.vectors,
        props
            .softmax_deviation
            .max(props.symmetry_deviation)
            .max(props.low_temperature_deviation)
            .max(props.high_temperature_deviation)
            .max(props.sum_deviation)
            .max(props.monotonicity_violations as f64),
        1e-3,
    ));
    checks.push(Check::new("final-row-sums", checks.len(), ledger.final_error, 1e-5));
    checks.push(Check::new("partial-row-sums", checks.len() - 1, ledger.partial_error, 1e-6));
    Ok(checks)
}
