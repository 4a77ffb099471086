//! Fixtures shared by the criterion benchmarks.

use rwseg_core::affinity::{head_affinities, NonNegPolicy, DEFAULT_EPSILON_SELF};
use rwseg_core::entropy_fusion::fuse_transitions;
use rwseg_core::matrix::{LowRank, Representation};
use rwseg_core::scaling::grid_for;
use rwseg_core::synth;
use rwseg_core::{FeatureBundle, LabelGenerator, Result, StochasticMatrix, Transition};

pub const FEATURE_DIM: usize = 16;
pub const CLASSES: usize = 8;
pub const HEADS: usize = 4;

/// Synthetic walk inputs with `n` nodes.
pub struct WalkFixture {
    pub bundle: FeatureBundle,
    pub transition: Transition,
    pub g: LabelGenerator,
}

impl WalkFixture {
    pub fn new(n: usize, seed: u64) -> Result<Self> {
        let mut rng = synth::rng(seed);
        let bundle = synth::random_bundle(&mut rng, grid_for(n), FEATURE_DIM, HEADS);
        let heads = head_affinities(&bundle, NonNegPolicy::Shift, DEFAULT_EPSILON_SELF)?;
        let per_head = heads
            .iter()
            .map(|h| h.transition(0.5))
            .collect::<Result<Vec<_>>>()?;
        let transition = fuse_transitions(per_head, &[1.0 / HEADS as f64; HEADS])?;
        let g = synth::random_generator(&mut rng, bundle.n(), CLASSES);
        Ok(WalkFixture { bundle, transition, g })
    }

    /// The same transition as one dense N×N term.
    pub fn densified(&self) -> Result<Transition> {
        let dense = StochasticMatrix::new(Representation::Dense(self.transition.to_dense()))?;
        Ok(Transition::single(dense))
    }
}

/// Factored stochastic matrix with an N×N dense twin.
pub fn factored(n: usize, rank: usize, seed: u64) -> (LowRank, LabelGenerator) {
    let mut rng = synth::rng(seed);
    let f = synth::random_factored_stochastic(&mut rng, n, rank);
    let g = synth::random_generator(&mut rng, n, CLASSES);
    (f, g)
}
