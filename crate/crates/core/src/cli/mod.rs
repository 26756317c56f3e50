//! Command-line front end: `phantom`, `train`, `segment`, `eval`, `detect`.

mod commands;
mod config;

use std::ffi::OsString;
use std::path::PathBuf;

use clap::{Args, Parser, Subcommand};

pub use config::{DetectConfig, PhantomConfig, RunConfig};

pub const EXIT_OK: i32 = 0;
pub const EXIT_COMPUTE: i32 = 1;
pub const EXIT_INPUT: i32 = 2;

#[derive(Debug)]
pub enum CliError {
    /// Bad arguments, configuration or input files.
    Input(String),
    /// A computation that was started and failed.
    Compute(String),
}

impl CliError {
    pub fn input(e: impl std::fmt::Display) -> Self {
        Self::Input(e.to_string())
    }

    pub fn compute(e: impl std::fmt::Display) -> Self {
        Self::Compute(e.to_string())
    }

    pub fn exit_code(&self) -> i32 {
        match self {
            Self::Input(_) => EXIT_INPUT,
            Self::Compute(_) => EXIT_COMPUTE,
        }
    }
}

impl std::fmt::Display for CliError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Self::Input(m) => write!(f, "input error: {m}"),
            Self::Compute(m) => write!(f, "error: {m}"),
        }
    }
}

impl From<crate::pipeline::PipelineError> for CliError {
    fn from(e: crate::pipeline::PipelineError) -> Self {
        if e.is_input_error() {
            Self::Input(e.to_string())
        } else {
            Self::Compute(e.to_string())
        }
    }
}

#[derive(Debug, Parser)]
#[command(name = "pascal", version, about = "Partitioned shape models with sparse appearance refinement for tubular structures")]
pub struct Cli {
    /// TOML run configuration; command-line flags take precedence.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Worker threads (0 = all cores).
    #[arg(long, global = true)]
    pub threads: Option<usize>,
    /// Repeat for more log output.
    #[arg(short, long, global = true, action = clap::ArgAction::Count)]
    pub verbose: u8,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a synthetic cohort of tube phantoms.
    Phantom(PhantomArgs),
    /// Train a model bundle from case directories.
    Train(TrainArgs),
    /// Segment one volume with a trained bundle.
    Segment(SegmentArgs),
    /// Compare a predicted mask with a reference mask.
    Eval(EvalArgs),
    /// Score a mask's mean radius against the healthy population.
    Detect(DetectArgs),
}

#[derive(Debug, Args)]
pub struct PhantomArgs {
    #[arg(long)]
    pub healthy: Option<usize>,
    /// Number of bulged cases.
    #[arg(long)]
    pub path: Option<usize>,
    #[arg(long)]
    pub bulge_factor: Option<f64>,
    #[arg(long)]
    pub bulge_fraction: Option<f64>,
    #[arg(long)]
    pub shape_sigma: Option<f64>,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    /// Case directories, or directories holding `case_*` subdirectories.
    #[arg(required = true)]
    pub inputs: Vec<PathBuf>,
    #[arg(long)]
    pub out: PathBuf,
    /// Pin the finest partition count instead of selecting it.
    #[arg(long)]
    pub partitions: Option<usize>,
    /// Silhouette CSV path (default: next to the bundle).
    #[arg(long)]
    pub silhouette: Option<PathBuf>,
    /// Also train on cases whose metadata marks them pathological.
    #[arg(long)]
    pub include_pathological: bool,
}

#[derive(Debug, Args)]
pub struct SegmentArgs {
    #[arg(long)]
    pub model: PathBuf,
    /// Volume to segment.
    #[arg(long, required_unless_present = "case")]
    pub volume: Option<PathBuf>,
    /// Case directory; supplies `volume.nii` and, when present, `truth.nii`.
    #[arg(long, conflicts_with = "volume")]
    pub case: Option<PathBuf>,
    /// Reference mask; adds DSC and Hausdorff to the report.
    #[arg(long)]
    pub truth: Option<PathBuf>,
    #[arg(long)]
    pub out: PathBuf,
    /// Skip the sparse refinement stage.
    #[arg(long)]
    pub no_refine: bool,
    /// Start the search from these landmarks.
    #[arg(long)]
    pub init_landmarks: Option<PathBuf>,
    /// Write the refinement dictionaries as JSON.
    #[arg(long)]
    pub dump_dicts: bool,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    #[arg(long)]
    pub truth: PathBuf,
    #[arg(long)]
    pub pred: PathBuf,
    /// Metrics JSON (default: stdout only).
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Overlay volume coding truth-only 1, prediction-only 2, overlap 3.
    #[arg(long)]
    pub overlay: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct DetectArgs {
    #[arg(long)]
    pub model: PathBuf,
    #[arg(long)]
    pub mask: PathBuf,
    /// Landmarks whose end rings anchor the centreline.
    #[arg(long)]
    pub landmarks: Option<PathBuf>,
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[arg(long)]
    pub threshold: Option<f64>,
}

/// Parse `args`, run the command and return the process exit code.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { EXIT_INPUT } else { EXIT_OK };
        }
    };
    let level = match cli.verbose {
        0 => log::LevelFilter::Warn,
        1 => log::LevelFilter::Info,
        2 => log::LevelFilter::Debug,
        _ => log::LevelFilter::Trace,
    };
    let _ = env_logger::Builder::new().filter_level(level).format_timestamp(None).try_init();
    match execute(cli) {
        Ok(()) => EXIT_OK,
        Err(e) => {
            eprintln!("{e}");
            e.exit_code()
        }
    }
}

fn execute(cli: Cli) -> Result<(), CliError> {
    let mut cfg = match &cli.config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    if let Some(s) = cli.seed {
        cfg.seed = s;
    }
    if let Some(t) = cli.threads {
        cfg.threads = t;
    }
    if cfg.threads > 0 {
        // Fails only if a pool already exists (repeated in-process runs).
        let _ = rayon::ThreadPoolBuilder::new().num_threads(cfg.threads).build_global();
    }
    match cli.command {
        Command::Phantom(a) => commands::phantom(cfg, a),
        Command::Train(a) => commands::train(cfg, a),
        Command::Segment(a) => commands::segment(cfg, a),
        Command::Eval(a) => commands::eval(cfg, a),
        Command::Detect(a) => commands::detect(cfg, a),
    }
}
