//! The `primseg` command line.

use std::ffi::OsString;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::time::Instant;

use clap::{Args, Parser, Subcommand};

use crate::config::Config;
use crate::error::{Error, Result};
use crate::estimation::{read_attributes, write_attributes};
use crate::io::{format_labels, read_cloud, to_json_bytes, write_atomic, write_xyz};
use crate::linalg::EigenSolver;
use crate::metrics::evaluate;
use crate::pipeline::{prepare, segment, validation_objective, ValidationScene};
use crate::spectral::dk_experiment;
use crate::synth::{generate_scene, parse_ground_truth, SceneSpec};
use crate::tuning::{tune_hyperparams, TuneOptions};

#[derive(Debug, Parser)]
#[command(name = "primseg", version, about = "Primitive segmentation of 3D point clouds")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Segment a point cloud into primitive patches.
    #[command(version)]
    Segment(SegmentArgs),
    /// Generate a synthetic scene with ground truth.
    #[command(version)]
    Synth(SynthArgs),
    /// Score a segmentation against ground truth.
    #[command(version)]
    Eval(EvalArgs),
    /// Run the spectral perturbation experiment.
    #[command(version)]
    Dk(DkArgs),
    /// Tune bandwidth hyperparameters on ground-truth scenes.
    #[command(version)]
    Tune(TuneArgs),
}

#[derive(Debug, Args)]
pub struct SegmentArgs {
    /// Point file (.xyz, or .ply).
    #[arg(long)]
    pub input: PathBuf,
    /// Per-point attribute file; estimated from the cloud when absent.
    #[arg(long)]
    pub attrs: Option<PathBuf>,
    /// JSON configuration; defaults apply when absent.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub output: PathBuf,
    #[arg(long)]
    pub labels_out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct SynthArgs {
    #[arg(long)]
    pub spec: PathBuf,
    /// Writes `<prefix>.xyz`, `.labels`, `.attrs` and `.gt.json`.
    #[arg(long)]
    pub out_prefix: PathBuf,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    #[arg(long)]
    pub pred: PathBuf,
    /// Ground truth with surfaces, as written by `synth`.
    #[arg(long)]
    pub gt: PathBuf,
    #[arg(long)]
    pub cloud: PathBuf,
    #[arg(long)]
    pub report: PathBuf,
}

#[derive(Debug, Args)]
pub struct DkArgs {
    #[arg(long)]
    pub n: usize,
    #[arg(long)]
    pub k: usize,
    #[arg(long)]
    pub rho: f64,
    #[arg(long, default_value_t = 1)]
    pub trials: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long)]
    pub csv: PathBuf,
    #[arg(long, value_enum, default_value_t = SolverArg::Lanczos)]
    pub solver: SolverArg,
}

#[derive(Debug, Clone, Copy, clap::ValueEnum)]
pub enum SolverArg {
    Auto,
    Jacobi,
    Lanczos,
}

impl From<SolverArg> for EigenSolver {
    fn from(s: SolverArg) -> Self {
        match s {
            SolverArg::Auto => EigenSolver::Auto,
            SolverArg::Jacobi => EigenSolver::Jacobi,
            SolverArg::Lanczos => EigenSolver::Lanczos,
        }
    }
}

#[derive(Debug, Args)]
pub struct TuneArgs {
    /// Directory of `<name>.gt.json` files with matching `<name>.xyz` clouds
    /// (and `<name>.attrs`, used unless --estimate is given).
    #[arg(long)]
    pub scenes: PathBuf,
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub out: PathBuf,
    /// Iteration trace; defaults to the output path with a `.trace.csv` extension.
    #[arg(long)]
    pub trace: Option<PathBuf>,
    #[arg(long)]
    pub max_iter: Option<usize>,
    /// Estimate attributes instead of reading `.attrs` files.
    #[arg(long)]
    pub estimate: bool,
}

/// Failure of a command, with its exit status.
#[derive(Debug)]
pub enum CliError {
    /// Unreadable or invalid input, arguments or configuration: exit 1.
    Input(Error),
    /// Failure while computing: exit 2.
    Pipeline(Error),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Input(_) => 1,
            CliError::Pipeline(_) => 2,
        }
    }
}

impl std::fmt::Display for CliError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            CliError::Input(e) | CliError::Pipeline(e) => write!(f, "{e}"),
        }
    }
}

type CliResult<T> = std::result::Result<T, CliError>;

fn input<T>(r: Result<T>) -> CliResult<T> {
    r.map_err(CliError::Input)
}

fn compute<T>(r: Result<T>) -> CliResult<T> {
    r.map_err(CliError::Pipeline)
}

fn load_config(path: Option<&Path>) -> CliResult<Config> {
    match path {
        Some(p) => input(Config::load(p)),
        None => Ok(Config::default()),
    }
}

fn read_text(path: &Path) -> CliResult<String> {
    std::fs::read_to_string(path).map_err(|e| CliError::Input(Error::io(path, e)))
}

fn write_out(path: &Path, bytes: &[u8]) -> CliResult<()> {
    input(write_atomic(path, bytes))
}

fn with_suffix(prefix: &Path, suffix: &str) -> PathBuf {
    let mut s: OsString = prefix.as_os_str().to_owned();
    s.push(suffix);
    PathBuf::from(s)
}

pub fn cmd_segment(args: &SegmentArgs) -> CliResult<String> {
    let start = Instant::now();
    let cfg = load_config(args.config.as_deref())?;
    let cloud = input(read_cloud(&args.input))?;
    let attrs = match &args.attrs {
        Some(p) => Some(input(read_attributes(p, Some(cloud.len())))?),
        None => None,
    };
    let seg = compute(segment(&cloud, attrs.as_deref(), &cfg))?;
    write_out(&args.output, &to_json_bytes(&seg.to_json()))?;
    if let Some(p) = &args.labels_out {
        write_out(p, format_labels(&seg.labels).as_bytes())?;
    }
    Ok(format!(
        "n={} segments={} runtime={:.2}s",
        seg.n(),
        seg.num_segments(),
        start.elapsed().as_secs_f64()
    ))
}

pub fn cmd_synth(args: &SynthArgs) -> CliResult<String> {
    let text = read_text(&args.spec)?;
    let spec: SceneSpec = input(serde_json::from_str(&text).map_err(|e| Error::parse(e.line(), e.to_string()).with_path(&args.spec)))?;
    input(spec.validate())?;
    let scene = compute(generate_scene(&spec))?;
    let mut xyz = Vec::new();
    write_xyz(&scene.cloud, &mut xyz).expect("writing to memory");
    let mut attrs = Vec::new();
    write_attributes(&scene.attrs, &mut attrs).expect("writing to memory");
    let p = &args.out_prefix;
    write_out(&with_suffix(p, ".xyz"), &xyz)?;
    write_out(&with_suffix(p, ".labels"), format_labels(&scene.gt.labels).as_bytes())?;
    write_out(&with_suffix(p, ".attrs"), &attrs)?;
    write_out(&with_suffix(p, ".gt.json"), &to_json_bytes(&scene.ground_truth_json()))?;
    Ok(format!("n={} primitives={}", scene.cloud.len(), scene.gt.num_segments()))
}

pub fn cmd_eval(args: &EvalArgs) -> CliResult<String> {
    let (pred, _) = input(parse_ground_truth(&read_text(&args.pred)?).map_err(|e| e.with_path(&args.pred)))?;
    let (gt, surfaces) = input(parse_ground_truth(&read_text(&args.gt)?).map_err(|e| e.with_path(&args.gt)))?;
    let cloud = input(read_cloud(&args.cloud))?;
    if surfaces.is_empty() {
        return Err(CliError::Input(Error::InvalidArgument(format!(
            "{}: ground truth has no surfaces",
            args.gt.display()
        ))));
    }
    for (what, n) in [("prediction", pred.n()), ("ground truth", gt.n())] {
        if n != cloud.len() {
            return Err(CliError::Input(Error::InvalidArgument(format!(
                "{what} labels {n} points but the cloud has {}",
                cloud.len()
            ))));
        }
    }
    let report = compute(evaluate(&cloud, &pred, &gt, &surfaces))?;
    write_out(&args.report, &to_json_bytes(&report))?;
    Ok(report.to_table())
}

pub fn cmd_dk(args: &DkArgs) -> CliResult<String> {
    if args.k == 0 || args.n == 0 || args.n % args.k != 0 {
        return Err(CliError::Input(Error::InvalidArgument(format!(
            "K = {} must divide n = {}",
            args.k, args.n
        ))));
    }
    if !(0.0..1.0).contains(&args.rho) {
        return Err(CliError::Input(Error::InvalidArgument(format!("rho must lie in [0, 1), got {}", args.rho))));
    }
    let reports = compute(dk_experiment(
        args.n,
        args.k,
        args.rho,
        args.trials,
        args.seed,
        args.solver.into(),
        Default::default(),
    ))?;
    let mut csv = String::from("trial,n,K,rho,procrustes_error,relative_error,bound,eigengap,frobenius_E\n");
    for r in &reports {
        let _ = writeln!(
            csv,
            "{},{},{},{},{},{},{},{},{}",
            r.trial, r.n, r.k, r.rho, r.procrustes_error, r.relative_error, r.bound, r.eigengap, r.frobenius_e
        );
    }
    write_out(&args.csv, csv.as_bytes())?;
    let within = reports.iter().filter(|r| r.procrustes_error <= r.bound).count();
    Ok(format!("trials={} within_bound={within}", reports.len()))
}

/// Scene stems in `dir` that have a `.gt.json` file, sorted.
fn scene_stems(dir: &Path) -> CliResult<Vec<PathBuf>> {
    let entries = std::fs::read_dir(dir).map_err(|e| CliError::Input(Error::io(dir, e)))?;
    let mut stems = Vec::new();
    for entry in entries {
        let path = entry.map_err(|e| CliError::Input(Error::io(dir, e)))?.path();
        if let Some(name) = path.file_name().and_then(|n| n.to_str()) {
            if let Some(stem) = name.strip_suffix(".gt.json") {
                stems.push(dir.join(stem));
            }
        }
    }
    stems.sort();
    if stems.is_empty() {
        return Err(CliError::Input(Error::InvalidArgument(format!(
            "{}: no .gt.json scenes found",
            dir.display()
        ))));
    }
    Ok(stems)
}

pub fn cmd_tune(args: &TuneArgs) -> CliResult<String> {
    let mut cfg = load_config(args.config.as_deref())?;
    let stems = scene_stems(&args.scenes)?;
    let mut scenes = Vec::with_capacity(stems.len());
    for stem in &stems {
        let gt_path = with_suffix(stem, ".gt.json");
        let (gt, _) = input(parse_ground_truth(&read_text(&gt_path)?).map_err(|e| e.with_path(&gt_path)))?;
        let cloud = input(read_cloud(&with_suffix(stem, ".xyz")))?;
        if gt.n() != cloud.len() {
            return Err(CliError::Input(Error::InvalidArgument(format!(
                "{}: ground truth labels {} points but the cloud has {}",
                gt_path.display(),
                gt.n(),
                cloud.len()
            ))));
        }
        let attrs_path = with_suffix(stem, ".attrs");
        let attrs = if !args.estimate && attrs_path.exists() {
            Some(input(read_attributes(&attrs_path, Some(cloud.len())))?)
        } else {
            None
        };
        let prepared = compute(prepare(&cloud, attrs.as_deref(), &cfg))?;
        scenes.push(ValidationScene::new(prepared, &gt.labels));
    }
    let opts = TuneOptions {
        max_iter: args.max_iter.unwrap_or(cfg.tune.max_iter),
        ..cfg.tune
    };
    let report = {
        let objective = validation_objective(&scenes, &cfg);
        compute(tune_hyperparams(&objective, &cfg.hyper, &opts))?
    };
    cfg.hyper = report.hp.clone();
    let mut trace = Vec::new();
    report.write_trace_csv(&mut trace).expect("writing to memory");
    let trace_path = args.trace.clone().unwrap_or_else(|| args.out.with_extension("trace.csv"));
    write_out(&args.out, &to_json_bytes(&cfg))?;
    write_out(&trace_path, &trace)?;
    Ok(format!(
        "scenes={} iterations={} objective {:.6e} -> {:.6e} final_step={:.3e} termination={:?}",
        scenes.len(),
        report.iterations,
        report.trace[0].objective,
        report.objective,
        report.final_step,
        report.termination
    ))
}

fn configure_threads() -> CliResult<()> {
    if let Ok(v) = std::env::var("PRIMSEG_THREADS") {
        let n: usize = v
            .parse()
            .ok()
            .filter(|&n| n > 0)
            .ok_or_else(|| CliError::Input(Error::InvalidArgument(format!("PRIMSEG_THREADS must be a positive integer, got {v:?}"))))?;
        // A pool may already exist when called twice in one process.
        let _ = rayon::ThreadPoolBuilder::new().num_threads(n).build_global();
    }
    Ok(())
}

pub fn run_command(cmd: &Command) -> CliResult<String> {
    configure_threads()?;
    match cmd {
        Command::Segment(a) => cmd_segment(a),
        Command::Synth(a) => cmd_synth(a),
        Command::Eval(a) => cmd_eval(a),
        Command::Dk(a) => cmd_dk(a),
        Command::Tune(a) => cmd_tune(a),
    }
}

/// Parses `args`, runs the command and returns the process exit code.
pub fn main_with_args<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { 1 } else { 0 };
        }
    };
    match run_command(&cli.command) {
        Ok(summary) => {
            println!("{}", summary.trim_end());
            0
        }
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}
