//! `dopplerfield`: bake synthetic datasets, process IQ captures, train,
//! render, evaluate and slice learned radar fields.

mod commands;
mod config;
mod export;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};

pub use config::RunConfig;

/// Failure with the process exit code it maps to.
#[derive(Debug)]
pub struct CliError {
    pub code: u8,
    pub message: String,
}

pub const EXIT_USAGE: u8 = 2;
pub const EXIT_DATA: u8 = 3;
pub const EXIT_NUMERICAL: u8 = 4;

impl CliError {
    pub fn usage(message: impl Into<String>) -> Self {
        Self {
            code: EXIT_USAGE,
            message: message.into(),
        }
    }
}

impl From<dopplerfield::Error> for CliError {
    fn from(e: dopplerfield::Error) -> Self {
        use dopplerfield::Error as E;
        let code = match &e {
            E::NumericalAbort { .. } => EXIT_NUMERICAL,
            E::InvalidArgument(_) | E::UnregisteredPrimitive(_) | E::Io { .. } => EXIT_USAGE,
            _ => EXIT_DATA,
        };
        Self {
            code,
            message: e.to_string(),
        }
    }
}

#[derive(Debug, Parser)]
#[command(name = "dopplerfield", version, about = "Radar range-Doppler field toolkit")]
pub struct Cli {
    /// TOML run configuration.
    #[arg(long, global = true, env = config::CONFIG_ENV)]
    pub config: Option<PathBuf>,
    /// Worker threads (default: available parallelism).
    #[arg(long, global = true)]
    pub threads: Option<usize>,
    /// Overrides the configured seed.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    #[arg(short, long, global = true, action = clap::ArgAction::Count)]
    pub verbose: u8,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Render a synthetic dataset from a scene.
    Bake(BakeArgs),
    /// Turn raw or synthetic IQ into range-Doppler frames.
    Dsp(DspArgs),
    /// Fit a field to a dataset.
    Train(TrainArgs),
    /// Render frames from a checkpoint.
    Render(RenderArgs),
    /// Score the learned model and baselines on the holdout frames.
    Eval(EvalArgs),
    /// Export reflectance/transmittance slices of a checkpoint.
    Tomo(TomoArgs),
    /// Score the baselines against each other on the holdout frames.
    CompareBaselines(CompareArgs),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum Preset {
    FiveBox,
}

#[derive(Debug, Args)]
pub struct BakeArgs {
    /// Scene description (JSON); defaults to the five-box preset.
    #[arg(long, conflicts_with = "preset")]
    pub scene: Option<PathBuf>,
    #[arg(long, value_enum)]
    pub preset: Option<Preset>,
    /// Number of trajectory frames.
    #[arg(long)]
    pub frames: Option<usize>,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct DspArgs {
    /// Raw IQ file with a JSON sidecar.
    #[arg(long, conflicts_with = "targets", required_unless_present = "targets")]
    pub iq: Option<PathBuf>,
    /// JSON list of point targets to synthesize.
    #[arg(long)]
    pub targets: Option<PathBuf>,
    /// Chirps to synthesize (default: enough for four strides past one frame).
    #[arg(long)]
    pub chirps: Option<usize>,
    /// Chirps between consecutive frames.
    #[arg(long)]
    pub stride: Option<usize>,
    /// Keep at most this many frames.
    #[arg(long)]
    pub frames: Option<usize>,
    /// Trajectory file providing poses for the frames.
    #[arg(long)]
    pub trajectory: Option<PathBuf>,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    #[arg(long)]
    pub dataset: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    /// Continue from the checkpoint in the output directory.
    #[arg(long)]
    pub resume: bool,
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub learning_rate: Option<f64>,
    #[arg(long)]
    pub batch_size: Option<usize>,
}

#[derive(Debug, Args)]
pub struct RenderArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long)]
    pub dataset: PathBuf,
    /// Frame indices, e.g. `0,5,10-20` (default: the holdout frames).
    #[arg(long)]
    pub frames: Option<String>,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, ValueEnum)]
pub enum Baseline {
    Lidar,
    Nearest,
    Cfar,
}

impl Baseline {
    pub fn name(self) -> &'static str {
        match self {
            Baseline::Lidar => "lidar",
            Baseline::Nearest => "nearest",
            Baseline::Cfar => "cfar",
        }
    }
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    #[arg(long)]
    pub dataset: PathBuf,
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long, value_enum, value_delimiter = ',', default_values_t = [Baseline::Cfar, Baseline::Lidar, Baseline::Nearest])]
    pub baselines: Vec<Baseline>,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct CompareArgs {
    #[arg(long)]
    pub dataset: PathBuf,
    #[arg(long, value_enum, value_delimiter = ',', default_values_t = [Baseline::Cfar, Baseline::Lidar, Baseline::Nearest])]
    pub baselines: Vec<Baseline>,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum Axis {
    X,
    Y,
    Z,
}

#[derive(Debug, Args)]
pub struct TomoArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    /// Slice normal.
    #[arg(long, value_enum, default_value = "z")]
    pub axis: Axis,
    /// Slice coordinate along the normal, meters.
    #[arg(long, default_value_t = 1.0)]
    pub at: f64,
    /// Sample spacing, meters.
    #[arg(long, default_value_t = 0.02)]
    pub resolution: f64,
    /// Also dump the full volume.
    #[arg(long)]
    pub volume: bool,
    #[arg(long)]
    pub out: PathBuf,
}

fn run(cli: Cli) -> Result<(), CliError> {
    let (mut cfg, _) = RunConfig::load(cli.config.as_deref())?;
    if let Some(s) = cli.seed {
        cfg.seed = s;
    }
    if cli.threads.is_some() {
        cfg.threads = cli.threads;
    }
    if let Some(n) = cfg.threads {
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .map_err(|e| CliError::usage(format!("cannot size thread pool: {e}")))?;
    }
    println!("seed: {}", cfg.seed);
    match cli.command {
        Command::Bake(a) => commands::bake(&mut cfg, &a),
        Command::Dsp(a) => commands::dsp(&mut cfg, &a),
        Command::Train(a) => commands::train(&mut cfg, &a),
        Command::Render(a) => commands::render(&mut cfg, &a),
        Command::Eval(a) => commands::eval(&mut cfg, &a.dataset, Some(&a.checkpoint), &a.baselines, &a.out),
        Command::Tomo(a) => commands::tomo(&mut cfg, &a),
        Command::CompareBaselines(a) => commands::eval(&mut cfg, &a.dataset, None, &a.baselines, &a.out),
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { EXIT_USAGE } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    let level = match cli.verbose {
        0 => "warn",
        1 => "info",
        _ => "debug",
    };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level)).init();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {}", e.message);
            ExitCode::from(e.code)
        }
    }
}
