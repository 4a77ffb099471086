//! Training-free refinement of coarse segmentation probabilities by a stopping
//! random walk over fused attention affinities.
//!
//! The pipeline:
//!
//! 1. [`affinity`] turns per-head query/key features into a low-rank global
//!    affinity and a sparse 8-connected local affinity.
//! 2. [`entropy_fusion`] weights heads by the entropy of their one-step label
//!    predictions.
//! 3. [`label_gen`] provides the node-to-label generator `G`.
//! 4. [`walk`] diffuses `G` through the fused transition, exactly or with a
//!    truncated iteration whose tail mass is `N·α^(L+1)`.
//! 5. [`format`], [`manifest`] and [`pipeline`] handle files and orchestration.

// `!(x >= 0.0)` style checks are deliberate: they also reject NaN.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod affinity;
pub mod entropy_fusion;
pub mod error;
pub mod format;
pub mod label_gen;
pub mod manifest;
pub mod matrix;
pub mod oracle;
pub mod pipeline;
pub mod scaling;
pub mod synth;
pub mod walk;

pub use affinity::{FeatureBundle, FusionParams, HeadFeatures, NonNegPolicy};
pub use entropy_fusion::{FusionMode, HeadWeighting};
pub use error::{Error, Result};
pub use format::{BundleFile, LabelInput};
pub use label_gen::LabelGenerator;
pub use manifest::RunManifest;
pub use matrix::{Affinity, Grid, StochasticMatrix, Transition};
pub use pipeline::{AffinityMode, PipelineConfig, WeightOrder};
pub use walk::{LabelProbabilities, Mask, WalkConfig, WalkMode};
