//! `patchlikely` command-line front end.
//!
//! Exit codes: 0 success, 1 usage error, 2 runtime error.

use std::ffi::OsString;
use std::path::{Path, PathBuf};

use clap::error::ErrorKind;
use clap::{ArgGroup, Args, Parser, Subcommand};
use thiserror::Error;

pub mod commands;
pub mod config;
pub mod gradcheck;

pub const THREADS_ENV: &str = "PATCHLIKELY_THREADS";

#[derive(Debug, Error)]
pub enum CliError {
    #[error("{0}")]
    Usage(String),
    #[error(transparent)]
    Core(#[from] patchlikely::Error),
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{0}")]
    Failed(String),
}

impl CliError {
    pub fn io(path: impl AsRef<Path>, source: std::io::Error) -> Self {
        CliError::Io {
            path: path.as_ref().to_path_buf(),
            source,
        }
    }

    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Usage(_) => 1,
            _ => 2,
        }
    }
}

#[derive(Debug, Parser)]
#[command(
    name = "patchlikely",
    version,
    about = "Exact patch likelihoods with a normalizing flow: training, scoring, illusion analysis and generation"
)]
pub struct Cli {
    /// Plain-text key=value file with defaults; flags override it.
    #[arg(long, global = true, value_name = "PATH")]
    pub config: Option<PathBuf>,

    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Train a flow on a corpus directory or on a single image.
    Train(TrainArgs),
    /// Print the NLL of one patch of an image.
    Score(ScoreArgs),
    /// Write the most and least likely patches of an image.
    Minmax(MinmaxArgs),
    /// Write the NLL map of an image's overlapping patches.
    Heatmap(HeatmapArgs),
    /// Sweep an illusion template's target over 256 levels.
    Explain(ExplainArgs),
    /// Manipulate the context of a masked target.
    Generate(GenerateArgs),
    /// Compare analytic and finite-difference derivatives on a tiny flow.
    Gradcheck(GradcheckArgs),
    /// Render a Hermann grid.
    HermannGrid(GridArgs),
    /// Write a procedural dead-leaves image corpus.
    SynthCorpus(SynthArgs),
}

#[derive(Debug, Args)]
#[command(group(ArgGroup::new("source").required(true).args(["corpus", "image"])))]
pub struct TrainArgs {
    /// Directory searched recursively for PNG/PPM images.
    #[arg(long, value_name = "DIR")]
    pub corpus: Option<PathBuf>,
    /// Train on the patches of a single image.
    #[arg(long, value_name = "FILE")]
    pub image: Option<PathBuf>,
    /// Checkpoint path; also receives periodic checkpoints.
    #[arg(long, value_name = "CKPT")]
    pub out: PathBuf,
    /// Continue from this checkpoint.
    #[arg(long, value_name = "CKPT")]
    pub resume: Option<PathBuf>,
    #[arg(long)]
    pub steps: Option<u64>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub batch_size: Option<usize>,
    #[arg(long)]
    pub learning_rate: Option<f64>,
    #[arg(long)]
    pub warmup_steps: Option<u64>,
    #[arg(long)]
    pub checkpoint_every: Option<u64>,
    /// Number of flow steps K.
    #[arg(long)]
    pub flow_steps: Option<usize>,
    #[arg(long)]
    pub hidden_width: Option<usize>,
    #[arg(long)]
    pub patch_size: Option<usize>,
    /// Print a progress line every N steps.
    #[arg(long, default_value_t = 1)]
    pub log_every: u64,
}

fn parse_xy(s: &str) -> Result<(usize, usize), String> {
    let (x, y) = s.split_once(',').ok_or_else(|| format!("expected X,Y, got {s:?}"))?;
    let num = |v: &str| v.trim().parse::<usize>().map_err(|e| format!("{v:?}: {e}"));
    Ok((num(x)?, num(y)?))
}

#[derive(Debug, Args)]
pub struct ScoreArgs {
    #[arg(long, value_name = "CKPT")]
    pub ckpt: PathBuf,
    #[arg(long, value_name = "FILE")]
    pub image: PathBuf,
    /// Top-left corner of the patch; defaults to the centred patch.
    #[arg(long, value_name = "X,Y", value_parser = parse_xy)]
    pub patch: Option<(usize, usize)>,
}

#[derive(Debug, Args)]
pub struct MinmaxArgs {
    #[arg(long, value_name = "CKPT")]
    pub ckpt: PathBuf,
    #[arg(long, value_name = "FILE")]
    pub image: PathBuf,
    /// Number of patches at each end of the ranking.
    #[arg(long)]
    pub k: Option<usize>,
    /// Distance between scored patches (default 1).
    #[arg(long)]
    pub stride: Option<usize>,
    #[arg(long, value_name = "DIR")]
    pub out_dir: PathBuf,
}

#[derive(Debug, Args)]
pub struct HeatmapArgs {
    #[arg(long, value_name = "CKPT")]
    pub ckpt: PathBuf,
    #[arg(long, value_name = "FILE")]
    pub image: PathBuf,
    /// Distance between scored patches (default 8).
    #[arg(long)]
    pub stride: Option<usize>,
    /// PNG rendering; the CSV matrix and JSON metadata are written beside it.
    #[arg(long, value_name = "PNG")]
    pub out: PathBuf,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, clap::ValueEnum)]
pub enum Illusion {
    Contrast,
    Whites,
    Hermann,
}

#[derive(Debug, Args)]
pub struct ExplainArgs {
    #[arg(long, value_name = "CKPT")]
    pub ckpt: PathBuf,
    #[arg(long, value_enum)]
    pub illusion: Illusion,
    /// gray, hue, saturation or value.
    #[arg(long, default_value = "gray")]
    pub channel: String,
    /// Surround level (contrast) or bar polarity white_bar|black_bar (whites).
    #[arg(long)]
    pub context: Option<String>,
    /// Second context to compare against at --target.
    #[arg(long, requires = "target")]
    pub versus: Option<String>,
    /// Report the percentile rank of this target level.
    #[arg(long)]
    pub target: Option<u8>,
    #[arg(long, value_name = "CSV")]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct GenerateArgs {
    #[arg(long, value_name = "CKPT")]
    pub ckpt: PathBuf,
    #[arg(long, value_name = "FILE")]
    pub image: PathBuf,
    /// PNG whose nonzero pixels mark the protected target.
    #[arg(long, value_name = "PNG")]
    pub mask: PathBuf,
    /// Latent step size: positive raises likelihood (default 0.6).
    #[arg(long, allow_hyphen_values = true)]
    pub eta: Option<f64>,
    /// Patch grid spacing (default 8).
    #[arg(long)]
    pub stride: Option<usize>,
    /// Output PNG; a JSON-lines metadata record is written beside it.
    #[arg(long, value_name = "PNG")]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct GradcheckArgs {
    #[arg(long)]
    pub seed: Option<u64>,
    /// Perturb one analytic gradient entry (self-test of the checker).
    #[arg(long, hide = true)]
    pub inject_fault: bool,
}

#[derive(Debug, Args)]
pub struct GridArgs {
    #[arg(long, default_value_t = 512)]
    pub size: usize,
    #[arg(long, default_value_t = 112)]
    pub block: usize,
    #[arg(long, default_value_t = 16)]
    pub bar: usize,
    #[arg(long, value_name = "PNG")]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct SynthArgs {
    #[arg(long, value_name = "DIR")]
    pub out_dir: PathBuf,
    #[arg(long, default_value_t = 120)]
    pub count: usize,
    #[arg(long, default_value_t = 96)]
    pub width: usize,
    #[arg(long, default_value_t = 96)]
    pub height: usize,
    #[arg(long)]
    pub seed: Option<u64>,
}

fn init_threads() -> Result<(), CliError> {
    let Ok(raw) = std::env::var(THREADS_ENV) else {
        return Ok(());
    };
    let n: usize = raw
        .trim()
        .parse()
        .ok()
        .filter(|&n| n > 0)
        .ok_or_else(|| CliError::Usage(format!("{THREADS_ENV} must be a positive integer, got {raw:?}")))?;
    if let Err(e) = rayon::ThreadPoolBuilder::new().num_threads(n).build_global() {
        log::warn!("could not size the worker pool: {e}");
    }
    Ok(())
}

pub fn dispatch(cli: Cli, out: &mut dyn std::io::Write) -> Result<(), CliError> {
    let file = config::FileConfig::load(cli.config.as_deref())?;
    match cli.command {
        Command::Train(a) => commands::train(&a, &file, out),
        Command::Score(a) => commands::score(&a, out),
        Command::Minmax(a) => commands::minmax(&a, &file, out),
        Command::Heatmap(a) => commands::heatmap(&a, &file, out),
        Command::Explain(a) => commands::explain(&a, out),
        Command::Generate(a) => commands::generate(&a, &file, out),
        Command::Gradcheck(a) => gradcheck::run(&a, &file, out),
        Command::HermannGrid(a) => commands::hermann_grid(&a),
        Command::SynthCorpus(a) => commands::synth_corpus(&a, &file, out),
    }
}

/// Parses arguments, runs the command and returns the process exit code.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return match e.kind() {
                ErrorKind::DisplayHelp | ErrorKind::DisplayVersion => 0,
                _ => 1,
            };
        }
    };
    let _ = env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info"))
        .format_timestamp(None)
        .try_init();
    let result = init_threads().and_then(|()| {
        let stdout = std::io::stdout();
        let mut lock = stdout.lock();
        dispatch(cli, &mut lock)
    });
    match result {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}
