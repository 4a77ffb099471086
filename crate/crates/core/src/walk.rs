//! Expected label probabilities of a stopping random walk.
//!
//! At every node the walk continues with probability `alpha` (moving along the
//! transition matrix `S`) or stops with probability `1 − alpha` and emits a label
//! drawn from the generator `G`. The infinite walk has the closed form
//! `P∞ = (1 − α)(I − αS)⁻¹G`; the truncated walk keeps the first `L + 1` terms of
//! the geometric series and rescales by `1 / (1 − α^(L+1))`.

use nalgebra::DMatrix;
use ndarray::{Array2, ArrayView2, Axis};
use serde::{Deserialize, Serialize};

use crate::affinity::FusionParams;
use crate::entropy_fusion::DEFAULT_TEMPERATURE;
use crate::error::{check_dim, Error, Result};
use crate::label_gen::LabelGenerator;
use crate::matrix::{Grid, Transition};

pub const DEFAULT_ALPHA: f64 = 0.9;
pub const DEFAULT_STEPS: usize = 40;
pub const DEFAULT_RESIDUAL_TOLERANCE: f64 = 1e-5;

/// Which solver computes the label probabilities.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "kebab-case")]
pub enum WalkMode {
    /// Dense LU solve of `(I − αS) X = (1 − α) G`.
    ExactDense,
    /// Woodbury identity on a single low-rank transition; solves an r×r system.
    ExactWoodbury,
    /// `L` steps of the iterative update, never forming an N×N matrix.
    #[default]
    TruncatedIterative,
}

/// Scalar hyperparameters of a walk.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct WalkConfig {
    pub alpha: f64,
    pub steps: usize,
    pub fusion: FusionParams,
    pub temperature: f64,
    /// Allowed deviation of final row sums from 1.
    pub residual_tolerance: f64,
    pub mode: WalkMode,
}

impl Default for WalkConfig {
    fn default() -> Self {
        WalkConfig {
            alpha: DEFAULT_ALPHA,
            steps: DEFAULT_STEPS,
            fusion: FusionParams::default(),
            temperature: DEFAULT_TEMPERATURE,
            residual_tolerance: DEFAULT_RESIDUAL_TOLERANCE,
            mode: WalkMode::default(),
        }
    }
}

impl WalkConfig {
    pub fn validate(&self) -> Result<()> {
        check_alpha(self.alpha)?;
        self.fusion.validate()?;
        if !(self.temperature > 0.0 && self.temperature.is_finite()) {
            return Err(Error::invalid("c", self.temperature, "temperature must be > 0"));
        }
        if !(self.residual_tolerance > 0.0) {
            return Err(Error::invalid(
                "residual_tolerance",
                self.residual_tolerance,
                "must be > 0",
            ));
        }
        Ok(())
    }
}

fn check_alpha(alpha: f64) -> Result<()> {
    if alpha > 0.0 && alpha < 1.0 {
        Ok(())
    } else {
        Err(Error::invalid("alpha", alpha, "must lie in (0, 1)"))
    }
}

/// N×K label probabilities produced by a walk.
#[derive(Debug, Clone, PartialEq)]
pub struct LabelProbabilities {
    pub p: Array2<f64>,
    pub steps_used: usize,
    /// `N·α^(L+1)` for truncated walks, 0 for exact solves.
    pub residual_bound_value: f64,
    pub mode: WalkMode,
}

impl LabelProbabilities {
    /// Largest `|row sum − 1|`.
    pub fn max_row_sum_error(&self) -> f64 {
        max_row_sum_error(self.p.view(), 1.0)
    }

    fn check(self, tolerance: f64) -> Result<Self> {
        for (i, row) in self.p.axis_iter(Axis(0)).enumerate() {
            let s = row.sum();
            if !((s - 1.0).abs() <= tolerance) {
                return Err(Error::NotAProbability {
                    row: i,
                    reason: format!("walk output row sums to {s}"),
                });
            }
        }
        Ok(self)
    }
}

pub(crate) fn max_row_sum_error(p: ArrayView2<f64>, target: f64) -> f64 {
    p.axis_iter(Axis(0))
        .map(|r| (r.sum() - target).abs())
        .fold(0.0, f64::max)
}

fn to_nalgebra(m: ArrayView2<f64>) -> DMatrix<f64> {
    DMatrix::from_fn(m.nrows(), m.ncols(), |i, j| m[[i, j]])
}

fn from_nalgebra(m: &DMatrix<f64>) -> Array2<f64> {
    Array2::from_shape_fn((m.nrows(), m.ncols()), |(i, j)| m[(i, j)])
}

fn solve(system: DMatrix<f64>, rhs: DMatrix<f64>) -> Result<DMatrix<f64>> {
    let size = system.nrows();
    let x = system
        .lu()
        .solve(&rhs)
        .ok_or(Error::SingularSystem { size })?;
    if x.iter().any(|v| !v.is_finite()) {
        return Err(Error::SingularSystem { size });
    }
    Ok(x)
}

/// Exact infinite-walk probabilities from a dense transition matrix.
pub fn exact_walk_dense(
    s: ArrayView2<f64>,
    g: &LabelGenerator,
    alpha: f64,
) -> Result<LabelProbabilities> {
    check_alpha(alpha)?;
    check_dim("dense transition (square)", s.nrows(), s.ncols())?;
    check_dim("dense transition vs generator", s.nrows(), g.n())?;
    let n = s.nrows();
    let system = DMatrix::identity(n, n) - to_nalgebra(s) * alpha;
    let rhs = to_nalgebra(g.view()) * (1.0 - alpha);
    let x = solve(system, rhs)?;
    Ok(LabelProbabilities {
        p: from_nalgebra(&x),
        steps_used: 0,
        residual_bound_value: 0.0,
        mode: WalkMode::ExactDense,
    })
}

/// Exact infinite-walk probabilities for `S = q_tilde · kmatᵀ`.
///
/// Uses `(I − αQ̃Kᵀ)⁻¹ = I + αQ̃(I_r − αKᵀQ̃)⁻¹Kᵀ`, so the only system solved is r×r.
pub fn exact_walk_woodbury(
    q_tilde: ArrayView2<f64>,
    kmat: ArrayView2<f64>,
    g: &LabelGenerator,
    alpha: f64,
) -> Result<LabelProbabilities> {
    check_alpha(alpha)?;
    check_dim("woodbury factor rows", q_tilde.nrows(), kmat.nrows())?;
    check_dim("woodbury factor rank", q_tilde.ncols(), kmat.ncols())?;
    check_dim("woodbury factors vs generator", q_tilde.nrows(), g.n())?;
    let r = q_tilde.ncols();
    let kt_q = kmat.t().dot(&q_tilde);
    let core = DMatrix::identity(r, r) - to_nalgebra(kt_q.view()) * alpha;
    let kt_g = kmat.t().dot(&g.view());
    let inner = from_nalgebra(&solve(core, to_nalgebra(kt_g.view()))?);
    let mut p = q_tilde.dot(&inner);
    p *= alpha;
    p += &g.view();
    p *= 1.0 - alpha;
    Ok(LabelProbabilities {
        p,
        steps_used: 0,
        residual_bound_value: 0.0,
        mode: WalkMode::ExactWoodbury,
    })
}

/// Step-by-step evaluation of the truncated walk.
///
/// Holds the unnormalized partial sum `P̃_L`, updated as
/// `P̃_L = (1 − α)G + α·S·P̃_(L−1)` from `P̃_0 = (1 − α)G`.
pub struct TruncatedWalk<'a> {
    transition: &'a Transition,
    g: ArrayView2<'a, f64>,
    alpha: f64,
    steps: usize,
    partial: Array2<f64>,
    next: Array2<f64>,
    scratch: Array2<f64>,
}

impl<'a> TruncatedWalk<'a> {
    pub fn new(transition: &'a Transition, g: &'a LabelGenerator, alpha: f64) -> Result<Self> {
        check_alpha(alpha)?;
        check_dim("transition vs generator", transition.n(), g.n())?;
        let partial = g.matrix() * (1.0 - alpha);
        Ok(TruncatedWalk {
            transition,
            g: g.view(),
            alpha,
            steps: 0,
            next: Array2::zeros(partial.dim()),
            partial,
            scratch: Array2::zeros((0, 0)),
        })
    }

    pub fn steps(&self) -> usize {
        self.steps
    }

    /// Unnormalized partial sum; rows sum to `1 − α^(L+1)`.
    pub fn partial(&self) -> &Array2<f64> {
        &self.partial
    }

    pub fn advance(&mut self) -> Result<()> {
        self.transition
            .apply_into(self.partial.view(), &mut self.next, &mut self.scratch)?;
        let alpha = self.alpha;
        self.next.mapv_inplace(|v| v * alpha);
        self.next.scaled_add(1.0 - alpha, &self.g);
        std::mem::swap(&mut self.partial, &mut self.next);
        self.steps += 1;
        if self.partial.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFiniteIterate { step: self.steps });
        }
        Ok(())
    }

    pub fn advance_to(&mut self, steps: usize) -> Result<()> {
        while self.steps < steps {
            self.advance()?;
        }
        Ok(())
    }

    /// `P_L = P̃_L / (1 − α^(L+1))`.
    pub fn normalized(&self) -> Array2<f64> {
        if self.steps == 0 {
            return self.g.to_owned();
        }
        let scale = 1.0 / (1.0 - self.alpha.powi(self.steps as i32 + 1));
        &self.partial * scale
    }

    pub fn finish(&self) -> LabelProbabilities {
        LabelProbabilities {
            p: self.normalized(),
            steps_used: self.steps,
            residual_bound_value: residual_l1(self.alpha, self.steps, self.transition.n()),
            mode: WalkMode::TruncatedIterative,
        }
    }
}

/// Truncated walk of `cfg.steps` steps over a (possibly multi-head, mixed) transition.
pub fn truncated_walk(
    transition: &Transition,
    g: &LabelGenerator,
    cfg: &WalkConfig,
) -> Result<LabelProbabilities> {
    let mut walk = TruncatedWalk::new(transition, g, cfg.alpha)?;
    walk.advance_to(cfg.steps)?;
    walk.finish().check(cfg.residual_tolerance)
}

/// Dispatches on `cfg.mode`.
pub fn run_walk(
    transition: &Transition,
    g: &LabelGenerator,
    cfg: &WalkConfig,
) -> Result<LabelProbabilities> {
    cfg.validate()?;
    let out = match cfg.mode {
        WalkMode::TruncatedIterative => return truncated_walk(transition, g, cfg),
        WalkMode::ExactDense => exact_walk_dense(transition.to_dense().view(), g, cfg.alpha)?,
        WalkMode::ExactWoodbury => {
            let f = transition.as_single_low_rank().ok_or_else(|| {
                Error::invalid(
                    "mode",
                    "exact-woodbury",
                    "requires a single low-rank head with beta = 1",
                )
            })?;
            exact_walk_woodbury(f.left.view(), f.right.view(), g, cfg.alpha)?
        }
    };
    out.check(cfg.residual_tolerance)
}

/// L1 norm of the truncated tail, `n·α^(L+1)`.
pub fn residual_l1(alpha: f64, steps: usize, n: usize) -> f64 {
    n as f64 * alpha.powf(steps as f64 + 1.0)
}

/// Smallest `L ≥ 0` with `n·α^(L+1) ≤ tol`.
pub fn steps_for_tolerance(alpha: f64, n: usize, tol: f64) -> Result<usize> {
    check_alpha(alpha)?;
    if !(tol > 0.0) {
        return Err(Error::invalid("tol", tol, "must be > 0"));
    }
    let estimate = ((tol / n as f64).ln() / alpha.ln()).ceil() - 1.0;
    let mut steps = if estimate.is_finite() { estimate.max(0.0) as usize } else { 0 };
    // Fix up rounding in the logarithms by checking the bound directly.
    while steps > 0 && residual_l1(alpha, steps - 1, n) <= tol {
        steps -= 1;
    }
    while residual_l1(alpha, steps, n) > tol {
        steps += 1;
    }
    Ok(steps)
}

/// Per-node class indices on the patch grid.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Mask {
    pub grid: Grid,
    pub labels: Vec<u32>,
}

impl Mask {
    pub fn at(&self, row: usize, col: usize) -> u32 {
        self.labels[row * self.grid.width + col]
    }

    /// Fraction of nodes whose label differs from `other`.
    pub fn changed_fraction(&self, other: &Mask) -> f64 {
        let changed = self
            .labels
            .iter()
            .zip(&other.labels)
            .filter(|(a, b)| a != b)
            .count();
        changed as f64 / self.labels.len().max(1) as f64
    }

    /// Nearest-neighbor resampling to `height × width`.
    pub fn upsample(&self, height: usize, width: usize) -> Mask {
        let labels = (0..height)
            .flat_map(|r| {
                (0..width).map(move |c| {
                    let sr = r * self.grid.height / height;
                    let sc = c * self.grid.width / width;
                    self.at(sr, sc)
                })
            })
            .collect();
        Mask {
            grid: Grid::new(height, width),
            labels,
        }
    }
}

/// Row-wise argmax; ties go to the lowest class index.
pub fn argmax_mask(p: ArrayView2<f64>, grid: Grid) -> Result<Mask> {
    grid.check_nodes(p.nrows())?;
    let labels = p
        .axis_iter(Axis(0))
        .map(|row| {
            let mut best = 0usize;
            for (k, &v) in row.iter().enumerate() {
                if v > row[best] {
                    best = k;
                }
            }
            best as u32
        })
        .collect();
    Ok(Mask { grid, labels })
}
