//! `diwr`: batch front end for reconstruction, analysis, corruption,
//! evaluation and orientation of point clouds.

mod config;

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};
use diwr_core::corrupt::{self, CorruptionParams, OutlierMode, SuiteConfig};
use diwr_core::metrics::{evaluate_meshes, quality_measures, DEFAULT_K, DEFAULT_TRIM};
use diwr_core::optimizer::{RunOutputs, Severity};
use diwr_core::pcio::{
    load_mesh, load_points_auto, normalize_unit_cube, save_mesh, save_oriented_points, save_points,
    MeshFormat, PointFormat,
};
use diwr_core::pipeline::{self, PipelineConfig};
use diwr_core::DiwrError;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde_json::json;
use tracing::info;

#[derive(Debug, Parser)]
#[command(name = "diwr", version, about = "Watertight reconstruction from raw point clouds")]
struct Cli {
    /// Worker threads (default: hardware parallelism)
    #[arg(long, global = true, env = "DIWR_THREADS")]
    threads: Option<usize>,
    /// Log progress to stderr (repeat for more detail)
    #[arg(short, long, global = true, action = clap::ArgAction::Count)]
    verbose: u8,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Optimise normals, areas and confidences, then extract a closed mesh
    Reconstruct(ReconstructArgs),
    /// Print the quality measures of a cloud as JSON
    Analyze(AnalyzeArgs),
    /// Corrupt a clean cloud, either once or as a calibrated stress suite
    Corrupt(CorruptArgs),
    /// Compare a mesh against a reference mesh and print CD/NC as JSON
    Evaluate(EvaluateArgs),
    /// Initialise and orient normals only, writing oriented points
    Orient(OrientArgs),
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum SeverityArg {
    Auto,
    Easy,
    Severe,
}

impl From<SeverityArg> for Severity {
    fn from(s: SeverityArg) -> Self {
        match s {
            SeverityArg::Auto => Severity::Auto,
            SeverityArg::Easy => Severity::Easy,
            SeverityArg::Severe => Severity::Severe,
        }
    }
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum ModeArg {
    Box,
    Interior,
    Sheet,
}

impl From<ModeArg> for OutlierMode {
    fn from(m: ModeArg) -> Self {
        match m {
            ModeArg::Box => OutlierMode::Box,
            ModeArg::Interior => OutlierMode::Interior,
            ModeArg::Sheet => OutlierMode::Sheet,
        }
    }
}

/// Settings shared by the commands that run the pipeline.
#[derive(Debug, Args)]
struct PipelineArgs {
    /// TOML or JSON configuration (keys mirror the optimiser settings)
    #[arg(short, long)]
    config: Option<PathBuf>,
    /// Seed of the initial normals
    #[arg(long)]
    seed: Option<u64>,
    /// Weight regime
    #[arg(long, value_enum)]
    severity: Option<SeverityArg>,
    /// Maximum number of outer iterations
    #[arg(long)]
    tmax: Option<usize>,
    /// Energy grid resolution per axis
    #[arg(long)]
    grid_resolution: Option<usize>,
    /// Extraction lattice resolution per axis
    #[arg(long)]
    resolution: Option<usize>,
}

impl PipelineArgs {
    /// Built-in defaults, overridden by the config file, overridden by flags.
    fn resolve(&self) -> Result<PipelineConfig> {
        let mut cfg = match &self.config {
            Some(p) => config::load(p)?,
            None => PipelineConfig::default(),
        };
        if let Some(s) = self.seed {
            cfg.seed = s;
        }
        if let Some(s) = self.severity {
            cfg.optim.severity = s.into();
        }
        if let Some(t) = self.tmax {
            cfg.optim.t_max = t;
        }
        if let Some(r) = self.grid_resolution {
            cfg.optim.grid_resolution = r;
        }
        if let Some(r) = self.resolution {
            cfg.extract_resolution = r;
        }
        cfg.validate()?;
        Ok(cfg)
    }
}

#[derive(Debug, Args)]
struct ReconstructArgs {
    /// Input cloud (.xyz, .ply or .obj)
    input: PathBuf,
    /// Output mesh (.obj or .ply)
    #[arg(short, long)]
    output: PathBuf,
    /// Retained oriented points with weights (default: <output>_points.ply)
    #[arg(long)]
    points: Option<PathBuf>,
    /// JSON-lines optimisation log (default: <output>_log.jsonl)
    #[arg(long)]
    log: Option<PathBuf>,
    /// Summary report (default: <output>_report.json)
    #[arg(long)]
    report: Option<PathBuf>,
    /// Directory for per-iteration state checkpoints
    #[arg(long)]
    checkpoints: Option<PathBuf>,
    #[command(flatten)]
    pipeline: PipelineArgs,
}

#[derive(Debug, Args)]
struct AnalyzeArgs {
    input: PathBuf,
    /// Neighbours per point
    #[arg(short, long, default_value_t = DEFAULT_K)]
    k: usize,
    /// Percentage trimmed at each end for the non-uniformity measure
    #[arg(long, default_value_t = DEFAULT_TRIM)]
    trim: f64,
}

#[derive(Debug, Args)]
struct CorruptArgs {
    input: PathBuf,
    /// Write a levels^3 stress suite and manifest.csv into this directory
    #[arg(long, conflicts_with = "output")]
    out_dir: Option<PathBuf>,
    /// Write a single corrupted cloud here
    #[arg(short, long, required_unless_present = "out_dir")]
    output: Option<PathBuf>,
    #[arg(long, default_value_t = 5)]
    levels: usize,
    #[arg(long, value_enum, default_value = "box")]
    mode: ModeArg,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Noise std as a fraction of the largest bounding-box side
    #[arg(long, default_value_t = 0.0)]
    noise: f64,
    /// Injected outliers per input point
    #[arg(long, default_value_t = 0.0)]
    outlier_rate: f64,
    /// Non-uniform resampling strength in [0, 1]
    #[arg(long, default_value_t = 0.0)]
    resample: f64,
    /// Uniformly subsample each resampled cloud to at most this many points
    #[arg(long)]
    max_points: Option<usize>,
}

#[derive(Debug, Args)]
struct EvaluateArgs {
    mesh: PathBuf,
    reference: PathBuf,
    /// Surface samples per mesh
    #[arg(long, default_value_t = diwr_core::metrics::DEFAULT_SAMPLES)]
    samples: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

#[derive(Debug, Args)]
struct OrientArgs {
    input: PathBuf,
    /// Oriented output points (.ply)
    #[arg(short, long)]
    output: PathBuf,
    #[command(flatten)]
    pipeline: PipelineArgs,
}

fn sibling(output: &Path, suffix: &str) -> PathBuf {
    let stem = output.file_stem().and_then(|s| s.to_str()).unwrap_or("out");
    output.with_file_name(format!("{stem}{suffix}"))
}

fn mesh_format(path: &Path) -> Result<MeshFormat> {
    MeshFormat::from_path(path)
        .with_context(|| format!("{}: mesh output must end in .obj or .ply", path.display()))
}

fn print_json(value: &serde_json::Value) -> Result<()> {
    println!("{}", serde_json::to_string_pretty(value)?);
    Ok(())
}

fn reconstruct(args: &ReconstructArgs) -> Result<()> {
    let cfg = args.pipeline.resolve()?;
    let format = mesh_format(&args.output)?;
    let cloud = load_points_auto(&args.input)?;
    info!(points = cloud.len(), "loaded {}", args.input.display());
    let log_path = args.log.clone().unwrap_or_else(|| sibling(&args.output, "_log.jsonl"));
    let outputs = RunOutputs {
        log_path: Some(log_path.clone()),
        checkpoint_dir: args.checkpoints.clone(),
    };
    let rec = pipeline::reconstruct(&cloud, &cfg, &outputs)?;
    save_mesh(&args.output, &rec.mesh, format)?;
    let points_path = args.points.clone().unwrap_or_else(|| sibling(&args.output, "_points.ply"));
    save_oriented_points(&points_path, &rec.retained)?;
    let audit = rec.mesh.edge_audit();
    let report = json!({
        "input": args.input,
        "mesh": args.output,
        "points": points_path,
        "log": log_path,
        "quality": rec.quality,
        "iterations": rec.iterations,
        "converged": rec.converged,
        "input_points": cloud.len(),
        "retained_points": rec.retained.len(),
        "vertices": rec.mesh.vertices.len(),
        "faces": rec.mesh.faces.len(),
        "watertight": audit.is_watertight(),
        "euler_characteristic": rec.mesh.euler_characteristic(),
        "volume": rec.mesh.signed_volume(),
    });
    let report_path = args.report.clone().unwrap_or_else(|| sibling(&args.output, "_report.json"));
    std::fs::write(&report_path, serde_json::to_string_pretty(&report)?)?;
    print_json(&report)
}

fn analyze(args: &AnalyzeArgs) -> Result<()> {
    let cloud = load_points_auto(&args.input)?;
    let (cloud, _) = normalize_unit_cube(&cloud)?;
    let q = quality_measures(&cloud, args.k, args.trim)?;
    print_json(&json!({
        "points": cloud.len(),
        "s_hat": q.s_hat,
        "sigma_hat": q.sigma_hat,
        "u_hat": q.u_hat,
        "o_hat": q.o_hat,
        "k": q.k,
        "trim_tau": q.trim_tau,
        "easy": q.is_easy(),
    }))
}

fn corrupt_cmd(args: &CorruptArgs) -> Result<()> {
    let cloud = load_points_auto(&args.input)?;
    let mode: OutlierMode = args.mode.into();
    if let Some(dir) = &args.out_dir {
        std::fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
        let cfg = SuiteConfig {
            levels: args.levels,
            mode,
            seed: args.seed,
            max_points: args.max_points,
        };
        let suite = corrupt::stress_suite(&cloud, &cfg, None)?;
        let mut paths = Vec::with_capacity(suite.cases.len());
        for case in &suite.cases {
            let path = dir.join(format!("case_{:03}.ply", case.id));
            save_points(&path, &case.cloud, PointFormat::Ply)?;
            let mask: String = case.outlier_mask.iter().map(|&m| if m { "1\n" } else { "0\n" }).collect();
            std::fs::write(dir.join(format!("case_{:03}_outliers.txt", case.id)), mask)?;
            paths.push(path);
        }
        corrupt::write_manifest(&dir.join("manifest.csv"), &suite, &paths)?;
        std::fs::write(
            dir.join("calibration.json"),
            serde_json::to_string_pretty(&suite.calibration)?,
        )?;
        return print_json(&json!({
            "cases": suite.cases.len(),
            "manifest": dir.join("manifest.csv"),
            "calibration": suite.calibration,
        }));
    }
    let Some(output) = &args.output else {
        bail!("either --out-dir or --output is required");
    };
    let params = CorruptionParams {
        strength: args.resample,
        sigma_frac: args.noise,
        rate: args.outlier_rate,
        mode,
        max_points: args.max_points,
    };
    let (out, mask) = corrupt::corrupt(&cloud, &params, None, args.seed)?;
    let format = PointFormat::from_path(output)
        .with_context(|| format!("{}: unknown point format", output.display()))?;
    save_points(output, &out, format)?;
    let measured = corrupt::measure(&out)?;
    print_json(&json!({
        "points": out.len(),
        "outliers": mask.iter().filter(|&&m| m).count(),
        "params": params,
        "measured": measured,
    }))
}

fn evaluate(args: &EvaluateArgs) -> Result<()> {
    let mesh = load_mesh(&args.mesh)?;
    let reference = load_mesh(&args.reference)?;
    let mut rng = ChaCha8Rng::seed_from_u64(args.seed);
    let report = evaluate_meshes(&mesh, &reference, args.samples, &mut rng)?;
    let audit = mesh.edge_audit();
    print_json(&json!({
        "chamfer_x1000": report.chamfer_x1000,
        "normal_consistency": report.normal_consistency,
        "samples": report.samples,
        "watertight": audit.is_watertight(),
        "euler_characteristic": mesh.euler_characteristic(),
    }))
}

fn orient(args: &OrientArgs) -> Result<()> {
    let cfg = args.pipeline.resolve()?;
    let cloud = load_points_auto(&args.input)?;
    let oriented = pipeline::orient(&cloud, &cfg)?;
    save_oriented_points(&args.output, &oriented)?;
    print_json(&json!({ "points": oriented.len(), "output": args.output }))
}

fn run(cli: &Cli) -> Result<()> {
    if let Some(n) = cli.threads {
        if n == 0 {
            bail!("--threads must be at least 1");
        }
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .context("configuring the thread pool")?;
    }
    match &cli.command {
        Command::Reconstruct(a) => reconstruct(a),
        Command::Analyze(a) => analyze(a),
        Command::Corrupt(a) => corrupt_cmd(a),
        Command::Evaluate(a) => evaluate(a),
        Command::Orient(a) => orient(a),
    }
}

/// 2 when the pipeline ran but nothing survived to mesh, 1 otherwise.
fn exit_code(err: &anyhow::Error) -> u8 {
    match err.downcast_ref::<DiwrError>() {
        Some(DiwrError::EmptyResult | DiwrError::EmptyLevelSet { .. }) => 2,
        _ => 1,
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let level = match cli.verbose {
        0 => "warn",
        1 => "info",
        _ => "debug",
    };
    let filter = tracing_subscriber::EnvFilter::try_from_default_env()
        .unwrap_or_else(|_| tracing_subscriber::EnvFilter::new(level));
    tracing_subscriber::fmt()
        .with_env_filter(filter)
        .with_writer(std::io::stderr)
        .init();
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e))
        }
    }
}
