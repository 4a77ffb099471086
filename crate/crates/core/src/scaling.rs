//! Per-step timing of the walk on synthetic bundles, comparing the factored
//! transition (low-rank global + sparse local) with its densified form.

use std::fmt::Write as _;
use std::time::Instant;

use serde::Serialize;

use crate::affinity::{head_affinities, NonNegPolicy, DEFAULT_EPSILON_SELF};
use crate::entropy_fusion::fuse_transitions;
use crate::error::Result;
use crate::matrix::{Grid, Representation, StochasticMatrix, Transition};
use crate::synth;
use crate::walk::TruncatedWalk;

/// Node counts of the default sweep; each is a near-square grid.
pub const DEFAULT_SIZES: [usize; 5] = [1024, 2048, 4096, 8192, 16384];
/// Dense transitions above this size are skipped (8 bytes × N² of memory).
pub const DENSE_LIMIT: usize = 4096;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "kebab-case")]
pub enum Path {
    LowRank,
    Dense,
}

impl Path {
    pub fn name(self) -> &'static str {
        match self {
            Path::LowRank => "low-rank",
            Path::Dense => "dense",
        }
    }
}

#[derive(Debug, Clone, Copy, Serialize)]
pub struct ScalingConfig {
    pub feature_dim: usize,
    pub classes: usize,
    pub heads: usize,
    pub beta: f64,
    pub alpha: f64,
    /// Timed repetitions; the fastest is kept.
    pub reps: usize,
    /// Minimum wall time of one repetition, in seconds.
    pub min_batch_seconds: f64,
    pub dense_limit: usize,
    pub seed: u64,
}

impl Default for ScalingConfig {
    fn default() -> Self {
        ScalingConfig {
            feature_dim: 16,
            classes: 8,
            heads: 4,
            beta: 0.5,
            alpha: 0.9,
            reps: 5,
            min_batch_seconds: 0.05,
            dense_limit: DENSE_LIMIT,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, Copy, Serialize)]
pub struct ScalingRow {
    pub path: Path,
    pub n: usize,
    pub grid: Grid,
    pub steps_per_rep: usize,
    pub seconds_per_step: f64,
}

/// Time ratio between two sizes of one path.
#[derive(Debug, Clone, Copy, Serialize)]
pub struct ScalingRatio {
    pub path: Path,
    pub n_small: usize,
    pub n_large: usize,
    pub raw: f64,
    /// `raw^(1 / log2(n_large / n_small))`: the growth per doubling of N.
    pub per_doubling: f64,
}

/// Most-square grid with `n` nodes.
pub fn grid_for(n: usize) -> Grid {
    let mut h = (n as f64).sqrt() as usize;
    while h > 1 && !n.is_multiple_of(h) {
        h -= 1;
    }
    Grid::new(h.max(2), (n / h.max(1)).max(2))
}

fn low_rank_transition(grid: Grid, cfg: &ScalingConfig) -> Result<Transition> {
    let mut rng = synth::rng(cfg.seed ^ grid.nodes() as u64);
    let bundle = synth::random_bundle(&mut rng, grid, cfg.feature_dim, cfg.heads);
    let heads = head_affinities(&bundle, NonNegPolicy::Shift, DEFAULT_EPSILON_SELF)?;
    let per_head = heads
        .iter()
        .map(|h| h.transition(cfg.beta))
        .collect::<Result<Vec<_>>>()?;
    let w = vec![1.0 / cfg.heads as f64; cfg.heads];
    fuse_transitions(per_head, &w)
}

/// Fastest observed seconds per walk step.
pub fn time_per_step(transition: &Transition, cfg: &ScalingConfig) -> Result<(usize, f64)> {
    let mut rng = synth::rng(cfg.seed.wrapping_add(1));
    let g = synth::random_generator(&mut rng, transition.n(), cfg.classes);
    let mut walk = TruncatedWalk::new(transition, &g, cfg.alpha)?;
    walk.advance_to(2)?;

    let mut iters = 1;
    loop {
        let start = Instant::now();
        for _ in 0..iters {
            walk.advance()?;
        }
        if start.elapsed().as_secs_f64() >= cfg.min_batch_seconds || iters >= 1 << 16 {
            break;
        }
        iters *= 2;
    }
    let mut best = f64::INFINITY;
    for _ in 0..cfg.reps.max(1) {
        let start = Instant::now();
        for _ in 0..iters {
            walk.advance()?;
        }
        best = best.min(start.elapsed().as_secs_f64() / iters as f64);
    }
    Ok((iters, best))
}

pub fn scaling_sweep(sizes: &[usize], cfg: &ScalingConfig) -> Result<Vec<ScalingRow>> {
    let mut rows = Vec::new();
    for &n in sizes {
        let grid = grid_for(n);
        let transition = low_rank_transition(grid, cfg)?;
        let (iters, t) = time_per_step(&transition, cfg)?;
        rows.push(ScalingRow {
            path: Path::LowRank,
            n: grid.nodes(),
            grid,
            steps_per_rep: iters,
            seconds_per_step: t,
        });
        if grid.nodes() <= cfg.dense_limit {
            let dense = transition.to_dense();
            drop(transition);
            let dense = Transition::single(StochasticMatrix::new(Representation::Dense(dense))?);
            let (iters, t) = time_per_step(&dense, cfg)?;
            rows.push(ScalingRow {
                path: Path::Dense,
                n: grid.nodes(),
                grid,
                steps_per_rep: iters,
                seconds_per_step: t,
            });
        }
    }
    Ok(rows)
}

pub fn ratio(rows: &[ScalingRow], path: Path, n_small: usize, n_large: usize) -> Option<ScalingRatio> {
    let find = |n| rows.iter().find(|r| r.path == path && r.n == n);
    let (a, b) = (find(n_small)?, find(n_large)?);
    let raw = b.seconds_per_step / a.seconds_per_step;
    let doublings = (n_large as f64 / n_small as f64).log2();
    Some(ScalingRatio {
        path,
        n_small,
        n_large,
        raw,
        per_doubling: raw.powf(1.0 / doublings),
    })
}

pub fn scaling_csv(rows: &[ScalingRow]) -> String {
    let mut out = String::from("path,n,grid_h,grid_w,steps_per_rep,seconds_per_step\n");
    for r in rows {
        let _ = writeln!(
            out,
            "{},{},{},{},{},{:.6e}",
            r.path.name(),
            r.n,
            r.grid.height,
            r.grid.width,
            r.steps_per_rep,
            r.seconds_per_step
        );
    }
    out
}

pub fn ratios_csv(ratios: &[ScalingRatio]) -> String {
    let mut out = String::from("path,n_small,n_large,raw_ratio,per_doubling_ratio\n");
    for r in ratios {
        let _ = writeln!(
            out,
            "{},{},{},{:.4},{:.4}",
            r.path.name(),
            r.n_small,
            r.n_large,
            r.raw,
            r.per_doubling
        );
    }
    out
}
