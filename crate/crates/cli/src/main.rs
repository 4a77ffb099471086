//! `rwseg`: refine coarse segmentation labels with an attention-driven random walk.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use rayon::prelude::*;
use serde::de::DeserializeOwned;

use rwseg_core::entropy_fusion::FusionMode;
use rwseg_core::format::{load_bundle, save_bundle};
use rwseg_core::manifest::{save_outputs, RunManifest};
use rwseg_core::matrix::Grid;
use rwseg_core::oracle::verify_suite;
use rwseg_core::pipeline::{
    ablate, ablation_csv, build_transition, convergence_csv, convergence_report, refine,
    AffinityMode, PipelineConfig, StageTimings, WeightOrder, CONVERGENCE_STEPS,
};
use rwseg_core::scaling::{ratio, ratios_csv, scaling_csv, scaling_sweep, Path as BenchPath, ScalingConfig, DEFAULT_SIZES};
use rwseg_core::synth::{scene, SceneSpec, SyntheticScene};
use rwseg_core::walk::{steps_for_tolerance, WalkMode};
use rwseg_core::{BundleFile, Error, NonNegPolicy};

#[derive(Parser)]
#[command(name = "rwseg", version, about = "Random-walk refinement of attention-based segmentation")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Refine one bundle, or every `.nrvf` file in a directory.
    Refine(RefineArgs),
    /// Argmax-change fraction and iterate delta at L = 0, 1, 5, 10, 20, 40, 80.
    Convergence(ReportArgs),
    /// Sweep fusion and affinity variants; --fusion / --affinity pin one of each.
    Ablate(AblateArgs),
    /// Per-step timing of the low-rank and dense paths.
    Bench(BenchArgs),
    /// Compare the engine against reference computations on random instances.
    Verify {
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Write a synthetic bundle with known ground truth.
    Synth(SynthArgs),
}

#[derive(Args, Clone, Default)]
struct Tunables {
    /// Continue probability of the walk, in (0, 1).
    #[arg(long, allow_negative_numbers = true)]
    alpha: Option<f64>,
    /// Global share of the global/local mix, in [0, 1].
    #[arg(long, allow_negative_numbers = true)]
    beta: Option<f64>,
    /// Entropy temperature of the head weights.
    #[arg(long = "c", allow_negative_numbers = true)]
    temperature: Option<f64>,
    #[arg(long, allow_negative_numbers = true)]
    epsilon_self: Option<f64>,
    #[arg(long)]
    steps: Option<usize>,
    /// Choose steps so that N·alpha^(L+1) is at most this value.
    #[arg(long, conflicts_with = "steps", allow_negative_numbers = true)]
    target_residual: Option<f64>,
    /// Allowed deviation of output row sums from 1.
    #[arg(long, allow_negative_numbers = true)]
    residual_tolerance: Option<f64>,
    /// exact-dense | exact-woodbury | truncated-iterative
    #[arg(long, value_parser = kebab::<WalkMode>)]
    mode: Option<WalkMode>,
    /// single | mean | weighted
    #[arg(long, value_parser = kebab::<FusionMode>)]
    fusion: Option<FusionMode>,
    /// global | local | fused
    #[arg(long, value_parser = kebab::<AffinityMode>)]
    affinity: Option<AffinityMode>,
    /// shift | clamp
    #[arg(long, value_parser = kebab::<NonNegPolicy>)]
    nonneg: Option<NonNegPolicy>,
    /// transition | affinity
    #[arg(long, value_parser = kebab::<WeightOrder>)]
    weight_order: Option<WeightOrder>,
    #[arg(long)]
    seed: Option<u64>,
}

impl Tunables {
    fn apply(&self, mut cfg: PipelineConfig, nodes: usize) -> Result<PipelineConfig, Error> {
        let w = &mut cfg.walk;
        w.alpha = self.alpha.unwrap_or(w.alpha);
        w.fusion.beta = self.beta.unwrap_or(w.fusion.beta);
        w.fusion.epsilon_self = self.epsilon_self.unwrap_or(w.fusion.epsilon_self);
        w.temperature = self.temperature.unwrap_or(w.temperature);
        w.residual_tolerance = self.residual_tolerance.unwrap_or(w.residual_tolerance);
        w.mode = self.mode.unwrap_or(w.mode);
        w.steps = match self.target_residual {
            Some(tol) => steps_for_tolerance(w.alpha, nodes, tol)?,
            None => self.steps.unwrap_or(w.steps),
        };
        cfg.fusion = self.fusion.unwrap_or(cfg.fusion);
        cfg.affinity = self.affinity.unwrap_or(cfg.affinity);
        cfg.nonneg = self.nonneg.unwrap_or(cfg.nonneg);
        cfg.weight_order = self.weight_order.unwrap_or(cfg.weight_order);
        cfg.validate()?;
        Ok(cfg)
    }
}

#[derive(Args)]
struct RefineArgs {
    /// NRVF bundle, or a directory of them.
    input: PathBuf,
    #[arg(long, default_value = "rwseg-out")]
    out: PathBuf,
    /// Worker threads when INPUT is a directory.
    #[arg(long, default_value_t = 1)]
    jobs: usize,
    /// Start from the config (and seed) recorded in a previous manifest.
    #[arg(long)]
    manifest: Option<PathBuf>,
    /// Nearest-neighbor upsample the mask to HxW.
    #[arg(long, value_parser = parse_size)]
    upsample: Option<(usize, usize)>,
    #[command(flatten)]
    tunables: Tunables,
}

#[derive(Args)]
struct ReportArgs {
    /// NRVF bundle; a synthetic scene from --seed when omitted.
    input: Option<PathBuf>,
    /// Write CSV here instead of stdout.
    #[arg(long)]
    out: Option<PathBuf>,
    #[command(flatten)]
    tunables: Tunables,
}


#[derive(Args)]
struct AblateArgs {
    #[command(flatten)]
    report: ReportArgs,
    /// Comma-separated ground-truth labels (as written by `synth`) for scoring.
    #[arg(long)]
    truth: Option<PathBuf>,
}

#[derive(Args)]
struct BenchArgs {
    /// Node counts to time.
    #[arg(long, value_delimiter = ',', default_values_t = DEFAULT_SIZES)]
    sizes: Vec<usize>,
    #[arg(long, default_value_t = 5)]
    reps: usize,
    /// Largest N timed on the dense path.
    #[arg(long, default_value_t = rwseg_core::scaling::DENSE_LIMIT)]
    dense_limit: usize,
    /// Write the per-size CSV here; ratios go to stdout.
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

#[derive(Args)]
struct SynthArgs {
    #[arg(long)]
    out: PathBuf,
    #[arg(long, value_parser = parse_size, default_value = "24x24")]
    grid: (usize, usize),
    #[arg(long, default_value_t = 4)]
    classes: usize,
    #[arg(long, default_value_t = 4)]
    heads: usize,
    #[arg(long, default_value_t = 16)]
    dim: usize,
    /// Feature noise of the cleanest head.
    #[arg(long)]
    feature_noise: Option<f64>,
    /// Logit noise of the coarse labels.
    #[arg(long)]
    label_noise: Option<f64>,
    /// Store token queries and prompt keys instead of probabilities.
    #[arg(long)]
    cross_attention: bool,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

/// Parses a kebab-case enum name through its serde representation.
fn kebab<T: DeserializeOwned>(s: &str) -> Result<T, String> {
    serde_json::from_value(serde_json::Value::String(s.to_owned())).map_err(|e| e.to_string())
}

fn parse_size(s: &str) -> Result<(usize, usize), String> {
    let (h, w) = s.split_once(['x', 'X']).ok_or("expected HxW")?;
    let h: usize = h.parse().map_err(|_| "bad height")?;
    let w: usize = w.parse().map_err(|_| "bad width")?;
    if h == 0 || w == 0 {
        return Err("sizes must be positive".into());
    }
    Ok((h, w))
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli.command) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {}: {e}", e.name());
            ExitCode::from(1)
        }
    }
}

fn run(command: Command) -> Result<ExitCode, Error> {
    match command {
        Command::Refine(args) => run_refine(args),
        Command::Convergence(args) => run_convergence(args),
        Command::Ablate(args) => run_ablate(args),
        Command::Bench(args) => run_bench(args),
        Command::Verify { seed } => run_verify(seed),
        Command::Synth(args) => run_synth(args),
    }
}

fn emit(text: &str, out: Option<&Path>) -> Result<(), Error> {
    match out {
        Some(path) => {
            if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
                fs::create_dir_all(dir)?;
            }
            fs::write(path, text)?;
        }
        None => print!("{text}"),
    }
    Ok(())
}

fn refine_one(input: &Path, out: &Path, args: &RefineArgs) -> Result<(), Error> {
    let file = load_bundle(input)?;
    let (base, base_seed) = match &args.manifest {
        Some(path) => {
            let m = RunManifest::load(path)?;
            (m.config, m.seed)
        }
        None => (PipelineConfig::default(), 0),
    };
    let cfg = args.tunables.apply(base, file.bundle.n())?;
    let seed = args.tunables.seed.unwrap_or(base_seed);
    let run = refine(&file, &cfg)?;
    let mask = match args.upsample {
        Some((h, w)) => run.mask.upsample(h, w),
        None => run.mask.clone(),
    };
    let manifest = RunManifest::new(input, &file, &cfg, seed, &run, args.upsample);
    save_outputs(out, &run, &mask, &manifest)?;
    println!(
        "{}: steps={} residual_bound={:.3e} -> {}",
        input.display(),
        run.probabilities.steps_used,
        run.probabilities.residual_bound_value,
        out.display()
    );
    Ok(())
}

fn run_refine(args: RefineArgs) -> Result<ExitCode, Error> {
    if !args.input.is_dir() {
        refine_one(&args.input, &args.out, &args)?;
        return Ok(ExitCode::SUCCESS);
    }
    let mut inputs: Vec<PathBuf> = fs::read_dir(&args.input)?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|x| x == "nrvf"))
        .collect();
    inputs.sort();
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(args.jobs.max(1))
        .build()
        .map_err(|e| Error::InvalidParameter {
            name: "jobs",
            value: format!("{} ({e})", args.jobs),
            reason: "could not start worker pool",
        })?;
    let failures: Vec<(PathBuf, Error)> = pool.install(|| {
        inputs
            .par_iter()
            .filter_map(|input| {
                let stem = input.file_stem().unwrap_or_default();
                refine_one(input, &args.out.join(stem), &args)
                    .err()
                    .map(|e| (input.clone(), e))
            })
            .collect()
    });
    for (input, e) in &failures {
        eprintln!("error: {}: {}: {e}", e.name(), input.display());
    }
    Ok(if failures.is_empty() {
        ExitCode::SUCCESS
    } else {
        ExitCode::from(1)
    })
}

/// Loads INPUT, or generates the default synthetic scene for `seed`.
fn load_or_synthesize(input: Option<&Path>, seed: u64) -> Result<(BundleFile, Option<Vec<u32>>), Error> {
    match input {
        Some(path) => Ok((load_bundle(path)?, None)),
        None => {
            let SyntheticScene { file, truth } = scene(&SceneSpec {
                seed,
                ..Default::default()
            })?;
            Ok((file, Some(truth)))
        }
    }
}

fn run_convergence(args: ReportArgs) -> Result<ExitCode, Error> {
    let seed = args.tunables.seed.unwrap_or(0);
    let (file, _) = load_or_synthesize(args.input.as_deref(), seed)?;
    let cfg = args.tunables.apply(PipelineConfig::default(), file.bundle.n())?;
    let g = file.label_generator()?;
    let fused = build_transition(&file, &g, &cfg, &mut StageTimings::default())?;
    let rows = convergence_report(
        &fused.transition,
        &g,
        cfg.walk.alpha,
        file.bundle.grid(),
        &CONVERGENCE_STEPS,
    )?;
    emit(&convergence_csv(&rows), args.out.as_deref())?;
    Ok(ExitCode::SUCCESS)
}

fn read_truth(path: &Path) -> Result<Vec<u32>, Error> {
    fs::read_to_string(path)?
        .split([',', '\n'])
        .map(str::trim)
        .filter(|v| !v.is_empty())
        .map(|v| {
            v.parse().map_err(|_| Error::CorruptPayload {
                field: "truth",
                detail: format!("not a label: {v:?}"),
            })
        })
        .collect()
}

fn run_ablate(args: AblateArgs) -> Result<ExitCode, Error> {
    let report = args.report;
    let seed = report.tunables.seed.unwrap_or(0);
    let (file, mut truth) = load_or_synthesize(report.input.as_deref(), seed)?;
    if let Some(path) = &args.truth {
        let labels = read_truth(path)?;
        if labels.len() != file.bundle.n() {
            return Err(Error::DimensionMismatch {
                context: "truth labels",
                expected: file.bundle.n(),
                found: labels.len(),
            });
        }
        truth = Some(labels);
    }
    let cfg = report.tunables.apply(PipelineConfig::default(), file.bundle.n())?;
    let fusions = match report.tunables.fusion {
        Some(f) => vec![f],
        None => vec![FusionMode::Single, FusionMode::Mean, FusionMode::Weighted],
    };
    let affinities = match report.tunables.affinity {
        Some(a) => vec![a],
        None => vec![AffinityMode::Global, AffinityMode::Local, AffinityMode::Fused],
    };
    let rows = ablate(&file, &cfg, &fusions, &affinities, truth.as_deref())?;
    emit(&ablation_csv(&rows), report.out.as_deref())?;
    Ok(ExitCode::SUCCESS)
}

fn run_bench(args: BenchArgs) -> Result<ExitCode, Error> {
    let cfg = ScalingConfig {
        reps: args.reps,
        dense_limit: args.dense_limit,
        seed: args.seed,
        ..Default::default()
    };
    let rows = scaling_sweep(&args.sizes, &cfg)?;
    let csv = scaling_csv(&rows);
    let mut ratios = Vec::new();
    for path in [BenchPath::LowRank, BenchPath::Dense] {
        let sizes: Vec<usize> = rows.iter().filter(|r| r.path == path).map(|r| r.n).collect();
        for pair in sizes.windows(2) {
            ratios.extend(ratio(&rows, path, pair[0], pair[1]));
        }
        if let (Some(&first), Some(&last)) = (sizes.first(), sizes.last()) {
            if sizes.len() > 2 {
                ratios.extend(ratio(&rows, path, first, last));
            }
        }
    }
    match &args.out {
        Some(path) => {
            emit(&csv, Some(path))?;
            print!("{}", ratios_csv(&ratios));
        }
        None => print!("{csv}\n{}", ratios_csv(&ratios)),
    }
    Ok(ExitCode::SUCCESS)
}

fn run_verify(seed: u64) -> Result<ExitCode, Error> {
    let checks = verify_suite(seed)?;
    let mut ok = true;
    for c in &checks {
        ok &= c.passed;
        println!(
            "{:<30} {:>5} max_dev={:.3e} tol={:.0e} {}",
            c.name,
            c.instances,
            c.max_deviation,
            c.tolerance,
            if c.passed { "ok" } else { "FAIL" }
        );
    }
    Ok(if ok { ExitCode::SUCCESS } else { ExitCode::from(1) })
}

fn run_synth(args: SynthArgs) -> Result<ExitCode, Error> {
    let defaults = SceneSpec::default();
    let s = scene(&SceneSpec {
        feature_noise: args.feature_noise.unwrap_or(defaults.feature_noise),
        label_noise: args.label_noise.unwrap_or(defaults.label_noise),
        grid: Grid::new(args.grid.0, args.grid.1),
        classes: args.classes,
        heads: args.heads,
        feature_dim: args.dim,
        cross_attention: args.cross_attention,
        seed: args.seed,
        ..Default::default()
    })?;
    if let Some(dir) = args.out.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir)?;
    }
    save_bundle(&args.out, &s.file)?;
    let truth = s.truth.iter().map(|v| v.to_string()).collect::<Vec<_>>().join(",");
    let truth_path = args.out.with_extension("truth.csv");
    fs::write(&truth_path, truth + "\n")?;
    println!("{} ({} nodes, truth in {})", args.out.display(), s.truth.len(), truth_path.display());
    Ok(ExitCode::SUCCESS)
}
