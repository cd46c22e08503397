//! `phenobody`: command-line front end for the body model.
//!
//! Exit codes: 0 on success, 1 on a domain error (and for `collide` when the
//! mesh self-intersects), 2 on invalid flags.

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};

mod commands;

#[derive(Debug, Parser)]
#[command(name = "phenobody", version, about = "Phenotype-driven parametric body model")]
struct Cli {
    /// Worker threads (defaults to all cores). Results do not depend on it.
    #[arg(long, global = true, env = "PHENOBODY_THREADS")]
    threads: Option<usize>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Generate the procedural toy humanoid bundle.
    Toy(ToyArgs),
    /// Write the shaped rest mesh.
    Shape(ShapeArgs),
    /// Write the shaped and posed mesh.
    Pose(PoseCmdArgs),
    /// Draw a phenotype vector from a calibrated Beta table.
    Sample(SampleArgs),
    /// Fit per-age Beta distributions to growth targets.
    Calibrate(CalibrateArgs),
    /// Fit shape and pose to a point cloud.
    Fit(Box<FitArgs>),
    /// Check a posed mesh for self-intersection (exit 1 if any).
    Collide(CollideArgs),
    /// Convert world bone orientations into a pose for the bundle skeleton.
    Retarget(RetargetArgs),
    /// Sparse vertex regressors between topologies.
    #[command(subcommand)]
    Regressor(RegressorCommand),
    /// Time the batched forward pass.
    Bench(BenchArgs),
    /// Sample a synthetic scan from the posed mesh surface.
    Scan(ScanArgs),
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum ResolutionArg {
    Coarse,
    Fine,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum MeshFormatArg {
    Obj,
    Ply,
}

#[derive(Debug, Args)]
struct ToyArgs {
    #[arg(long, value_enum, default_value = "fine")]
    resolution: ResolutionArg,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Extra single-target parameters appended to the schema.
    #[arg(long, default_value_t = 0)]
    local_morphs: usize,
    #[arg(long)]
    out: PathBuf,
}

/// Phenotype values: a parameter file, then `--set` overrides.
#[derive(Debug, Args)]
struct PhenoArgs {
    #[arg(long)]
    bundle: PathBuf,
    /// JSON file with `phenotypes` (name → value) and optionally `pose`.
    #[arg(long)]
    params: Option<PathBuf>,
    /// NAME=VALUE with VALUE in [0, 1]; repeatable.
    #[arg(long = "set", value_name = "NAME=VALUE")]
    set: Vec<String>,
}

#[derive(Debug, Args)]
struct PoseArgs {
    /// BONE=X,Y,Z rotation vector in radians; repeatable.
    #[arg(long = "joint", value_name = "BONE=X,Y,Z")]
    joints: Vec<String>,
    #[arg(long, value_name = "X,Y,Z")]
    root_rotation: Option<String>,
    #[arg(long, value_name = "X,Y,Z")]
    root_translation: Option<String>,
    /// Random joint rotations, uniform in ±SCALE radians per axis.
    #[arg(long, value_name = "SCALE")]
    random_pose: Option<f64>,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

#[derive(Debug, Args)]
struct MeshOut {
    #[arg(long)]
    out: PathBuf,
    /// Overrides the format inferred from the extension.
    #[arg(long, value_enum)]
    format: Option<MeshFormatArg>,
}

#[derive(Debug, Args)]
struct ShapeArgs {
    #[command(flatten)]
    pheno: PhenoArgs,
    #[command(flatten)]
    out: MeshOut,
}

#[derive(Debug, Args)]
struct PoseCmdArgs {
    #[command(flatten)]
    pheno: PhenoArgs,
    #[command(flatten)]
    pose: PoseArgs,
    #[command(flatten)]
    out: MeshOut,
    /// Also write the resolved phenotypes and pose as JSON.
    #[arg(long)]
    params_out: Option<PathBuf>,
}

#[derive(Debug, Args)]
struct SampleArgs {
    /// Calibrated Beta table (JSON).
    #[arg(long)]
    table: PathBuf,
    #[arg(long)]
    age_years: f64,
    #[arg(long, default_value_t = 0)]
    gender: u8,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Write JSON here instead of stdout.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Debug, Args)]
struct CalibrateArgs {
    #[arg(long)]
    bundle: PathBuf,
    /// Growth targets CSV.
    #[arg(long)]
    targets: PathBuf,
    /// Parameters given Beta distributions (age is driven by the age map).
    #[arg(long, value_delimiter = ',', required = true)]
    params: Vec<String>,
    /// JSON list of `[years, parameter]` knots; a built-in map otherwise.
    #[arg(long)]
    age_map: Option<PathBuf>,
    #[arg(long, default_value_t = phenobody::stats::DEFAULT_MC_SAMPLES)]
    mc_samples: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = 300)]
    max_iters: usize,
    /// Body density for the BMI proxy (kg/m³).
    #[arg(long, default_value_t = phenobody::shape::DEFAULT_DENSITY)]
    density: f64,
    /// Output Beta table (JSON).
    #[arg(long)]
    out: PathBuf,
    /// Per-bucket report (JSON).
    #[arg(long)]
    report: Option<PathBuf>,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum OptimizerArg {
    GradientDescent,
    LevenbergMarquardt,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum BoundsArg {
    Clamp,
    Sigmoid,
}

#[derive(Debug, Args)]
struct FitArgs {
    #[arg(long)]
    bundle: PathBuf,
    /// Point cloud (PLY or OBJ).
    #[arg(long)]
    scan: PathBuf,
    /// `point_index,tag` CSV with tags body/head/hand/excluded.
    #[arg(long)]
    tags: Option<PathBuf>,
    /// Starting phenotypes and pose (JSON, as written by `--out`).
    #[arg(long)]
    init: Option<PathBuf>,
    /// Beta table used as a phenotype prior.
    #[arg(long, requires = "prior_age_years")]
    prior: Option<PathBuf>,
    #[arg(long)]
    prior_age_years: Option<f64>,
    #[arg(long, default_value_t = 0)]
    prior_gender: u8,
    #[arg(long, value_enum, default_value = "levenberg-marquardt")]
    optimizer: OptimizerArg,
    #[arg(long, default_value_t = 40)]
    max_outer_iters: usize,
    #[arg(long, default_value_t = 10)]
    rigid_outer_iters: usize,
    #[arg(long, default_value_t = 10)]
    inner_steps: usize,
    #[arg(long, default_value_t = 1.0)]
    step_size: f64,
    #[arg(long, default_value_t = true, action = clap::ArgAction::Set)]
    backtracking: bool,
    #[arg(long, default_value_t = 30)]
    max_backtracks: usize,
    /// Huber threshold in meters.
    #[arg(long, default_value_t = 0.005)]
    huber_delta: f64,
    #[arg(long, default_value_t = 0.0)]
    prior_weight: f64,
    #[arg(long, value_enum, default_value = "sigmoid")]
    bounds: BoundsArg,
    #[arg(long, default_value_t = 1e-5)]
    tolerance: f64,
    #[arg(long)]
    max_points: Option<usize>,
    #[arg(long, default_value_t = true, action = clap::ArgAction::Set)]
    init_search: bool,
    /// Region tags left out of the fit.
    #[arg(long, value_delimiter = ',', default_value = "excluded")]
    exclude: Vec<String>,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Fitted phenotypes, pose and summary (JSON).
    #[arg(long)]
    out: PathBuf,
    /// Per-point error CSV.
    #[arg(long)]
    report_csv: Option<PathBuf>,
    /// Fitted mesh with per-vertex error (PLY).
    #[arg(long)]
    report_ply: Option<PathBuf>,
}

#[derive(Debug, Args)]
struct CollideArgs {
    #[command(flatten)]
    pheno: PhenoArgs,
    #[command(flatten)]
    pose: PoseArgs,
    /// Ignore contacts between parent and child parts.
    #[arg(long)]
    exempt_adjacent: bool,
    /// Intersecting face pairs (JSON).
    #[arg(long)]
    report: Option<PathBuf>,
}

#[derive(Debug, Args)]
struct RetargetArgs {
    #[command(flatten)]
    pheno: PhenoArgs,
    /// JSON map of source bone → 3×3 world rotation (rows).
    #[arg(long)]
    orientations: PathBuf,
    /// JSON map of source bone → target bone; identity names otherwise.
    #[arg(long)]
    mapping: Option<PathBuf>,
    /// Output pose (JSON).
    #[arg(long)]
    out: PathBuf,
}

#[derive(Debug, Subcommand)]
enum RegressorCommand {
    /// Barycentric init between two bundles, refined on random shapes and poses.
    Fit(RegressorFitArgs),
    /// Map a mesh through a regressor.
    Apply(RegressorApplyArgs),
    /// Mean round-trip error of a forward/backward pair.
    Cycle(RegressorCycleArgs),
}

#[derive(Debug, Args)]
struct RegressorFitArgs {
    #[arg(long)]
    source: PathBuf,
    #[arg(long)]
    target: PathBuf,
    /// Training shapes and poses.
    #[arg(long, default_value_t = 6)]
    train: usize,
    #[arg(long, default_value_t = 5)]
    rounds: usize,
    #[arg(long, default_value_t = 10)]
    fit_steps: usize,
    #[arg(long, default_value_t = 1e-9)]
    ridge: f64,
    #[arg(long, default_value_t = true, action = clap::ArgAction::Set)]
    dilate: bool,
    /// Joint rotation range of the training poses (radians).
    #[arg(long, default_value_t = 0.4)]
    pose_scale: f64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    out: PathBuf,
    /// Residual history (JSON).
    #[arg(long)]
    report: Option<PathBuf>,
}

#[derive(Debug, Args)]
struct RegressorApplyArgs {
    #[arg(long)]
    regressor: PathBuf,
    /// Source-topology mesh (OBJ or PLY).
    #[arg(long)]
    mesh: PathBuf,
    /// Bundle supplying target faces; points only otherwise.
    #[arg(long)]
    target_bundle: Option<PathBuf>,
    #[command(flatten)]
    out: MeshOut,
}

#[derive(Debug, Args)]
struct RegressorCycleArgs {
    /// A → B regressor.
    #[arg(long)]
    forward: PathBuf,
    /// B → A regressor.
    #[arg(long)]
    backward: PathBuf,
    /// Topology-A bundle used to draw the test meshes.
    #[arg(long)]
    bundle: PathBuf,
    #[arg(long, default_value_t = 4)]
    meshes: usize,
    #[arg(long, default_value_t = 0.4)]
    pose_scale: f64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

#[derive(Debug, Args)]
struct BenchArgs {
    #[arg(long)]
    bundle: PathBuf,
    #[arg(long, value_delimiter = ',', default_value = "1,64,1024,8192")]
    batches: Vec<usize>,
    /// Parameter counts; `full` means the whole schema.
    #[arg(long, value_delimiter = ',', default_value = "full")]
    phenotype_counts: Vec<String>,
    #[arg(long, default_value_t = 5)]
    repeats: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    csv: Option<PathBuf>,
}

#[derive(Debug, Args)]
struct ScanArgs {
    #[command(flatten)]
    pheno: PhenoArgs,
    #[command(flatten)]
    pose: PoseArgs,
    #[arg(long, default_value_t = 20_000)]
    points: usize,
    /// Gaussian noise SD in meters.
    #[arg(long, default_value_t = 0.0)]
    noise: f64,
    /// Point cloud (PLY or OBJ).
    #[arg(long)]
    out: PathBuf,
    /// Ground-truth phenotypes and pose (JSON).
    #[arg(long)]
    truth: Option<PathBuf>,
}

/// Flag problems detected after parsing; reported with exit code 2.
#[derive(Debug)]
pub struct UsageError(pub String);

impl std::fmt::Display for UsageError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for UsageError {}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 2 } else { 0 });
        }
    };
    if let Some(n) = cli.threads {
        if n == 0 {
            eprintln!("error: --threads must be at least 1");
            return ExitCode::from(2);
        }
        if let Err(e) = rayon::ThreadPoolBuilder::new().num_threads(n).build_global() {
            eprintln!("error: {e}");
            return ExitCode::from(1);
        }
    }
    match commands::run(cli.command) {
        Ok(code) => ExitCode::from(code),
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(if e.downcast_ref::<UsageError>().is_some() { 2 } else { 1 })
        }
    }
}
