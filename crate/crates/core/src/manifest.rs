//! Run manifests and the output directory layout of a refinement.
//!
//! ```text
//! out_dir/
//!   mask.pgm            class index per grid cell (or upsampled)
//!   probabilities.nrvp  N×K float32 block
//!   manifest.json       config echo, head weights, walk summary
//!   timings.json        wall time per stage
//! ```
//!
//! Wall times live in their own file so that `manifest.json` stays
//! byte-identical across repeated runs.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::format::{encode_pgm, encode_probabilities, BundleFile};
use crate::matrix::Grid;
use crate::pipeline::{PipelineConfig, Refinement, StageTimings};
use crate::walk::{Mask, WalkMode};

pub const MASK_FILE: &str = "mask.pgm";
pub const PROBS_FILE: &str = "probabilities.nrvp";
pub const MANIFEST_FILE: &str = "manifest.json";
pub const TIMINGS_FILE: &str = "timings.json";

/// Identity of one attention head in the input bundle.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct HeadId {
    pub layer: u32,
    pub head: u32,
}

/// Everything needed to interpret and reproduce a run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub tool_version: String,
    pub config: PipelineConfig,
    pub seed: u64,
    pub input: PathBuf,
    pub source_tag: String,
    pub grid: Grid,
    pub class_names: Vec<String>,
    pub heads: Vec<HeadId>,
    pub entropies: Vec<f64>,
    pub weights: Vec<f64>,
    pub mode: WalkMode,
    pub steps_used: usize,
    pub residual_bound: f64,
    pub max_row_sum_error: f64,
    /// Output mask size when upsampled, `None` for grid resolution.
    pub mask_size: Option<(usize, usize)>,
}

impl RunManifest {
    pub fn new(
        input: impl Into<PathBuf>,
        file: &BundleFile,
        cfg: &PipelineConfig,
        seed: u64,
        run: &Refinement,
        mask_size: Option<(usize, usize)>,
    ) -> Self {
        RunManifest {
            tool_version: env!("CARGO_PKG_VERSION").to_owned(),
            config: *cfg,
            seed,
            input: input.into(),
            source_tag: file.bundle.source_tag().to_owned(),
            grid: file.bundle.grid(),
            class_names: file.class_names.clone(),
            heads: file
                .bundle
                .heads()
                .iter()
                .map(|h| HeadId {
                    layer: h.layer_index,
                    head: h.head_index,
                })
                .collect(),
            entropies: run.weighting.entropies.clone(),
            weights: run.weighting.weights.clone(),
            mode: run.probabilities.mode,
            steps_used: run.probabilities.steps_used,
            residual_bound: run.probabilities.residual_bound_value,
            max_row_sum_error: run.probabilities.max_row_sum_error(),
            mask_size,
        }
    }

    pub fn to_json(&self) -> Result<String> {
        serde_json::to_string_pretty(self).map_err(|e| Error::CorruptPayload {
            field: "manifest",
            detail: e.to_string(),
        })
    }

    pub fn from_json(text: &str) -> Result<Self> {
        serde_json::from_str(text).map_err(|e| Error::CorruptPayload {
            field: "manifest",
            detail: e.to_string(),
        })
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_json(&fs::read_to_string(path)?)
    }
}

/// Paths written by [`save_outputs`].
#[derive(Debug, Clone)]
pub struct OutputPaths {
    pub mask: PathBuf,
    pub probabilities: PathBuf,
    pub manifest: PathBuf,
    pub timings: PathBuf,
}

pub fn save_outputs(
    out_dir: impl AsRef<Path>,
    run: &Refinement,
    mask: &Mask,
    manifest: &RunManifest,
) -> Result<OutputPaths> {
    let dir = out_dir.as_ref();
    fs::create_dir_all(dir)?;
    let paths = OutputPaths {
        mask: dir.join(MASK_FILE),
        probabilities: dir.join(PROBS_FILE),
        manifest: dir.join(MANIFEST_FILE),
        timings: dir.join(TIMINGS_FILE),
    };
    fs::write(&paths.mask, encode_pgm(mask)?)?;
    fs::write(
        &paths.probabilities,
        encode_probabilities(&run.probabilities, manifest.grid)?,
    )?;
    fs::write(&paths.manifest, manifest.to_json()? + "\n")?;
    fs::write(&paths.timings, timings_json(&run.timings) + "\n")?;
    Ok(paths)
}

fn timings_json(t: &StageTimings) -> String {
    serde_json::to_string_pretty(t).unwrap_or_default()
}
