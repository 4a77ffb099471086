//! Entropy-guided weighting of attention heads.
//!
//! Each head is scored by the mean Shannon entropy (nats) of the label
//! distribution a single walk step through that head produces. Confident
//! heads (low entropy) receive larger weights via `softmax(-c · H)`.

use std::collections::BTreeMap;

use ndarray::{Array2, ArrayView2, Axis};
use serde::{Deserialize, Serialize};

use crate::error::{check_dim, Error, Result};
use crate::label_gen::LabelGenerator;
use crate::matrix::{Affinity, LowRank, Representation, SparseRows, Transition};

pub const DEFAULT_TEMPERATURE: f64 = 1.0;

/// How per-head weights are chosen.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "kebab-case")]
pub enum FusionMode {
    /// All weight on the lowest-entropy head.
    Single,
    /// Uniform weights.
    Mean,
    /// Entropy softmax weights.
    #[default]
    Weighted,
}

/// Per-head entropies and the weights derived from them.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HeadWeighting {
    pub entropies: Vec<f64>,
    pub weights: Vec<f64>,
    pub temperature: f64,
    pub mode: FusionMode,
}

impl HeadWeighting {
    pub fn compute(entropies: Vec<f64>, temperature: f64, mode: FusionMode) -> Result<Self> {
        if entropies.is_empty() {
            return Err(Error::invalid("heads", 0, "need at least one head"));
        }
        let weights = match mode {
            FusionMode::Weighted => head_weights(&entropies, temperature)?,
            FusionMode::Mean => vec![1.0 / entropies.len() as f64; entropies.len()],
            FusionMode::Single => {
                let best = min_entropy_head(&entropies);
                (0..entropies.len()).map(|h| if h == best { 1.0 } else { 0.0 }).collect()
            }
        };
        Ok(HeadWeighting {
            entropies,
            weights,
            temperature,
            mode,
        })
    }
}

/// Index of the smallest entropy; ties resolve to the lowest index.
pub fn min_entropy_head(entropies: &[f64]) -> usize {
    entropies
        .iter()
        .enumerate()
        .fold((0, f64::INFINITY), |(bi, bv), (i, &v)| if v < bv { (i, v) } else { (bi, bv) })
        .0
}

/// Label probabilities after a single walk step: `S · G`.
pub fn one_step_probs(transition: &Transition, g: &LabelGenerator) -> Result<Array2<f64>> {
    check_dim("one-step transition size", transition.n(), g.n())?;
    transition.apply(g.view())
}

/// Mean row entropy in nats, with `0 · ln 0 = 0`.
pub fn head_entropy(p: ArrayView2<f64>) -> f64 {
    let n = p.nrows();
    if n == 0 {
        return 0.0;
    }
    let total: f64 = p
        .iter()
        .filter(|&&v| v > 0.0)
        .map(|&v| -v * v.ln())
        .sum();
    total / n as f64
}

/// `w_h = exp(-c·H_h) / Σ exp(-c·H_h')`, evaluated with max subtraction.
pub fn head_weights(entropies: &[f64], c: f64) -> Result<Vec<f64>> {
    if !(c > 0.0 && c.is_finite()) {
        return Err(Error::invalid("c", c, "temperature must be > 0"));
    }
    if let Some(h) = entropies.iter().find(|h| !h.is_finite()) {
        return Err(Error::invalid("entropy", h, "must be finite"));
    }
    let logits: Vec<f64> = entropies.iter().map(|h| -c * h).collect();
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = logits.iter().map(|l| (l - max).exp()).collect();
    let total: f64 = exps.iter().sum();
    Ok(exps.into_iter().map(|e| e / total).collect())
}

/// Weighted sum of unnormalized per-head affinities.
///
/// Dense and sparse heads are summed entrywise. Low-rank heads are not densified:
/// their factors are stacked column-wise (left factors scaled by the weights), so
/// a product against the result is exactly `Σ w_h · (per-head product)`.
pub fn fuse_heads(heads: &[Affinity], weights: &[f64]) -> Result<Affinity> {
    let first = heads
        .first()
        .ok_or_else(|| Error::invalid("heads", 0, "need at least one head"))?;
    check_dim("head weight count", heads.len(), weights.len())?;
    let n = first.n();
    for h in heads {
        check_dim("head affinity size", n, h.n())?;
        if std::mem::discriminant(h.repr()) != std::mem::discriminant(first.repr()) {
            return Err(Error::MixedRepresentation {
                first: first.repr().kind(),
                other: h.repr().kind(),
            });
        }
    }
    match first.repr() {
        Representation::Dense(_) => {
            let mut out = Array2::zeros((n, n));
            for (h, &w) in heads.iter().zip(weights) {
                if let Representation::Dense(m) = h.repr() {
                    out.scaled_add(w, m);
                }
            }
            Affinity::dense(out)
        }
        Representation::LowRank(_) => {
            let mut lefts = Vec::with_capacity(heads.len());
            let mut rights = Vec::with_capacity(heads.len());
            for (h, &w) in heads.iter().zip(weights) {
                if let Representation::LowRank(f) = h.repr() {
                    lefts.push(&f.left * w);
                    rights.push(f.right.view());
                }
            }
            let lv: Vec<_> = lefts.iter().map(|m| m.view()).collect();
            let left = ndarray::concatenate(Axis(1), &lv).expect("row counts agree");
            let right = ndarray::concatenate(Axis(1), &rights).expect("row counts agree");
            Ok(Affinity::low_rank(LowRank::new(left, right)?))
        }
        Representation::SparseLocal(_) => {
            let mut rows: Vec<BTreeMap<usize, f64>> = vec![BTreeMap::new(); n];
            for (h, &w) in heads.iter().zip(weights) {
                if let Representation::SparseLocal(s) = h.repr() {
                    for (i, row) in rows.iter_mut().enumerate() {
                        for (j, v) in s.row(i) {
                            *row.entry(j).or_insert(0.0) += w * v;
                        }
                    }
                }
            }
            let rows = rows.into_iter().map(|r| r.into_iter().collect()).collect();
            Ok(Affinity::sparse(SparseRows::from_rows(rows)?))
        }
    }
}

/// `Σ w_h S_h` over per-head transitions, kept lazy.
pub fn fuse_transitions(heads: Vec<Transition>, weights: &[f64]) -> Result<Transition> {
    check_dim("head weight count", heads.len(), weights.len())?;
    Transition::combine(weights.iter().copied().zip(heads).collect())
}
