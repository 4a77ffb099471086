//! End-to-end refinement: features → per-head transitions → head weights →
//! fused walk → probabilities and mask. Also the convergence and ablation
//! reports built on top of it.

use std::fmt::Write as _;
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::affinity::{fuse, head_affinities, HeadAffinity, NonNegPolicy};
use crate::entropy_fusion::{
    fuse_heads, fuse_transitions, head_entropy, one_step_probs, FusionMode, HeadWeighting,
};
use crate::error::Result;
use crate::format::BundleFile;
use crate::label_gen::LabelGenerator;
use crate::matrix::{row_normalize, Grid, Transition};
use crate::walk::{argmax_mask, residual_l1, run_walk, LabelProbabilities, Mask, TruncatedWalk, WalkConfig};

/// Which affinity terms enter the transition.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "kebab-case")]
pub enum AffinityMode {
    /// Global only (beta forced to 1).
    Global,
    /// Local only (beta forced to 0).
    Local,
    /// `beta · global + (1 − beta) · local`.
    #[default]
    Fused,
}

/// Where head weights are applied.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "kebab-case")]
pub enum WeightOrder {
    /// Weighted sum of per-head row-stochastic transitions.
    #[default]
    Transition,
    /// Weighted sum of raw per-head affinities, then one normalization.
    Affinity,
}

/// Every tunable of a refinement run.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize, Default)]
pub struct PipelineConfig {
    pub walk: WalkConfig,
    pub fusion: FusionMode,
    pub affinity: AffinityMode,
    pub nonneg: NonNegPolicy,
    pub weight_order: WeightOrder,
}

impl PipelineConfig {
    pub fn effective_beta(&self) -> f64 {
        match self.affinity {
            AffinityMode::Global => 1.0,
            AffinityMode::Local => 0.0,
            AffinityMode::Fused => self.walk.fusion.beta,
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.walk.validate()
    }
}

/// Wall time of each pipeline stage, in seconds.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct StageTimings {
    pub labels: f64,
    pub affinity: f64,
    pub weighting: f64,
    pub walk: f64,
}

/// The fused transition together with the head weighting that produced it.
#[derive(Debug, Clone)]
pub struct FusedTransition {
    pub transition: Transition,
    pub weighting: HeadWeighting,
}

/// Per-head affinities → entropy weights → fused transition.
pub fn build_transition(
    file: &BundleFile,
    g: &LabelGenerator,
    cfg: &PipelineConfig,
    timings: &mut StageTimings,
) -> Result<FusedTransition> {
    cfg.validate()?;
    let beta = cfg.effective_beta();
    let start = Instant::now();
    let heads = head_affinities(&file.bundle, cfg.nonneg, cfg.walk.fusion.epsilon_self)?;
    let per_head = heads
        .iter()
        .map(|h| h.transition(beta))
        .collect::<Result<Vec<_>>>()?;
    timings.affinity = start.elapsed().as_secs_f64();

    let start = Instant::now();
    let entropies = per_head
        .iter()
        .map(|t| one_step_probs(t, g).map(|p| head_entropy(p.view())))
        .collect::<Result<Vec<_>>>()?;
    let weighting = HeadWeighting::compute(entropies, cfg.walk.temperature, cfg.fusion)?;
    let transition = match cfg.weight_order {
        WeightOrder::Transition => fuse_transitions(per_head, &weighting.weights)?,
        WeightOrder::Affinity => fuse_raw_affinities(&heads, &weighting.weights, beta)?,
    };
    timings.weighting = start.elapsed().as_secs_f64();
    Ok(FusedTransition {
        transition,
        weighting,
    })
}

fn fuse_raw_affinities(heads: &[HeadAffinity], weights: &[f64], beta: f64) -> Result<Transition> {
    // Zero-weight heads contribute nothing; dropping them keeps stacked factors small.
    let (globals, locals, w): (Vec<_>, Vec<_>, Vec<_>) = heads
        .iter()
        .zip(weights)
        .filter(|(_, w)| **w > 0.0)
        .map(|(h, w)| (h.global.clone(), h.local.clone(), *w))
        .fold((vec![], vec![], vec![]), |(mut g, mut l, mut ws), (a, b, c)| {
            g.push(a);
            l.push(b);
            ws.push(c);
            (g, l, ws)
        });
    let global = row_normalize(fuse_heads(&globals, &w)?)?;
    let local = row_normalize(fuse_heads(&locals, &w)?)?;
    fuse(global, local, beta)
}

/// Result of one refinement run.
#[derive(Debug, Clone)]
pub struct Refinement {
    pub probabilities: LabelProbabilities,
    pub mask: Mask,
    pub weighting: HeadWeighting,
    pub timings: StageTimings,
}

pub fn refine(file: &BundleFile, cfg: &PipelineConfig) -> Result<Refinement> {
    let mut timings = StageTimings::default();
    let start = Instant::now();
    let g = file.label_generator()?;
    timings.labels = start.elapsed().as_secs_f64();
    let fused = build_transition(file, &g, cfg, &mut timings)?;
    let start = Instant::now();
    let probabilities = run_walk(&fused.transition, &g, &cfg.walk)?;
    timings.walk = start.elapsed().as_secs_f64();
    let mask = argmax_mask(probabilities.p.view(), file.bundle.grid())?;
    Ok(Refinement {
        probabilities,
        mask,
        weighting: fused.weighting,
        timings,
    })
}

/// Checkpoints reported by the convergence sweep.
pub const CONVERGENCE_STEPS: [usize; 7] = [0, 1, 5, 10, 20, 40, 80];

/// One line of the convergence report.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConvergenceRow {
    pub steps: usize,
    pub prev_steps: usize,
    /// Fraction of nodes whose argmax differs from the previous checkpoint.
    pub changed_fraction: f64,
    /// `changed_fraction / (steps − prev_steps)`.
    pub changed_per_step: f64,
    /// Max-abs difference between normalized iterates at the two checkpoints.
    pub iterate_delta: f64,
    pub residual_bound: f64,
}

/// Runs the truncated walk once and snapshots it at each checkpoint.
pub fn convergence_report(
    transition: &Transition,
    g: &LabelGenerator,
    alpha: f64,
    grid: Grid,
    checkpoints: &[usize],
) -> Result<Vec<ConvergenceRow>> {
    let mut walk = TruncatedWalk::new(transition, g, alpha)?;
    let mut prev: Option<(usize, ndarray::Array2<f64>, Mask)> = None;
    let mut rows = Vec::with_capacity(checkpoints.len());
    for &steps in checkpoints {
        walk.advance_to(steps)?;
        let p = walk.normalized();
        let mask = argmax_mask(p.view(), grid)?;
        let (prev_steps, changed, delta) = match &prev {
            Some((ps, pp, pm)) => (
                *ps,
                mask.changed_fraction(pm),
                p.iter().zip(pp.iter()).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max),
            ),
            None => (steps, 0.0, 0.0),
        };
        let span = steps.saturating_sub(prev_steps);
        rows.push(ConvergenceRow {
            steps,
            prev_steps,
            changed_fraction: changed,
            changed_per_step: if span == 0 { 0.0 } else { changed / span as f64 },
            iterate_delta: delta,
            residual_bound: residual_l1(alpha, steps, transition.n()),
        });
        prev = Some((steps, p, mask));
    }
    Ok(rows)
}

pub fn convergence_csv(rows: &[ConvergenceRow]) -> String {
    let mut out = String::from("steps,prev_steps,changed_fraction,changed_per_step,iterate_delta,residual_bound\n");
    for r in rows {
        let _ = writeln!(
            out,
            "{},{},{:.6},{:.6},{:.6e},{:.6e}",
            r.steps, r.prev_steps, r.changed_fraction, r.changed_per_step, r.iterate_delta, r.residual_bound
        );
    }
    out
}

/// One configuration of the ablation grid.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub fusion: FusionMode,
    pub affinity: AffinityMode,
    /// Index of the highest-weight head.
    pub top_head: usize,
    pub top_weight: f64,
    /// Fraction of nodes whose label differs from the coarse (step-0) mask.
    pub changed_vs_coarse: f64,
    /// Pixel accuracy and mean IoU against ground truth, when known.
    pub accuracy: Option<f64>,
    pub miou: Option<f64>,
}

pub fn ablate(
    file: &BundleFile,
    base: &PipelineConfig,
    fusions: &[FusionMode],
    affinities: &[AffinityMode],
    truth: Option<&[u32]>,
) -> Result<Vec<AblationRow>> {
    let g = file.label_generator()?;
    let coarse = argmax_mask(g.view(), file.bundle.grid())?;
    let k = g.classes();
    let mut rows = Vec::new();
    for &affinity in affinities {
        for &fusion in fusions {
            let cfg = PipelineConfig {
                fusion,
                affinity,
                ..*base
            };
            let r = refine(file, &cfg)?;
            let w = &r.weighting.weights;
            let top_head = crate::entropy_fusion::min_entropy_head(
                &w.iter().map(|v| -v).collect::<Vec<_>>(),
            );
            let scores = truth.map(|t| crate::synth::score(&r.mask.labels, t, k));
            rows.push(AblationRow {
                fusion,
                affinity,
                top_head,
                top_weight: w[top_head],
                changed_vs_coarse: r.mask.changed_fraction(&coarse),
                accuracy: scores.map(|s| s.0),
                miou: scores.map(|s| s.1),
            });
        }
    }
    Ok(rows)
}

fn kebab<T: Serialize>(v: &T) -> String {
    serde_json::to_value(v)
        .ok()
        .and_then(|v| v.as_str().map(str::to_owned))
        .unwrap_or_default()
}

pub fn ablation_csv(rows: &[AblationRow]) -> String {
    let mut out = String::from("fusion,affinity,top_head,top_weight,changed_vs_coarse,accuracy,miou\n");
    let opt = |v: Option<f64>| v.map(|x| format!("{x:.6}")).unwrap_or_default();
    for r in rows {
        let _ = writeln!(
            out,
            "{},{},{},{:.6},{:.6},{},{}",
            kebab(&r.fusion),
            kebab(&r.affinity),
            r.top_head,
            r.top_weight,
            r.changed_vs_coarse,
            opt(r.accuracy),
            opt(r.miou)
        );
    }
    out
}
