//! Command-line front end for `vesselseg`.
//!
//! Every command reads and writes plain files: a dataset directory (see
//! [`dataset`]), a `key = value` run configuration (see [`config`]), weight
//! files, and CSV reports. Identical inputs give byte-identical outputs.
//!
//! Exit status: 0 on success, 1 for usage or configuration errors, 2 for
//! data errors, 3 for numerical failures.

use std::fmt;
use std::io::Write;
use std::path::PathBuf;

use clap::{Args, Parser, Subcommand};
use vesselseg::{Error, ErrorKind};

pub mod commands;
pub mod config;
pub mod dataset;

#[derive(Debug, Parser)]
#[command(name = "vesselseg", version, about = "Kidney microvasculature segmentation toolkit")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Turn polygon annotations and source tiles into a dataset directory.
    Ingest(IngestArgs),
    /// Generate a synthetic vessel dataset directory.
    Synth(SynthArgs),
    /// Train a model from a run configuration.
    Train(TrainArgs),
    /// Score a checkpoint on a dataset split and write the metrics CSV.
    Eval(EvalArgs),
    /// Segment one image with a checkpoint.
    Predict(PredictArgs),
    /// Sweep the learning rate and suggest a value.
    LrFind(LrFindArgs),
}

#[derive(Debug, Args)]
pub struct IngestArgs {
    /// Line-delimited JSON polygon annotations.
    #[arg(long)]
    pub annotations: PathBuf,
    /// Directory of source tiles named `<tile_id>.png` or `<tile_id>.ppm`.
    #[arg(long)]
    pub images: PathBuf,
    /// Output dataset directory.
    #[arg(long)]
    pub out: PathBuf,
    /// Side length of the written tiles.
    #[arg(long, default_value_t = 128)]
    pub size: usize,
    /// Fraction of tiles assigned to the validation split.
    #[arg(long, default_value_t = 0.2)]
    pub val_fraction: f64,
    /// Seed of the train/validation split.
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
}

#[derive(Debug, Args)]
pub struct SynthArgs {
    /// Generator seed; also seeds the train/validation split.
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Number of tiles; must be positive.
    #[arg(long)]
    pub count: usize,
    /// Side length of the tiles.
    #[arg(long, default_value_t = 128)]
    pub size: usize,
    /// Fraction of tiles assigned to the validation split.
    #[arg(long, default_value_t = 0.2)]
    pub val_fraction: f64,
    /// Output dataset directory.
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    /// Run configuration file.
    #[arg(long)]
    pub config: PathBuf,
    /// Override one setting, `key=value`. Repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    pub overrides: Vec<String>,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    /// Weight file written by `train`.
    #[arg(long)]
    pub checkpoint: PathBuf,
    /// Dataset directory [default: data.dir of the config].
    #[arg(long)]
    pub data: Option<PathBuf>,
    /// Probability threshold [default: eval.threshold of the config].
    #[arg(long)]
    pub threshold: Option<f64>,
    /// Split to score: train, val or all.
    #[arg(long, default_value = "val")]
    pub split: String,
    /// Run configuration [default: resolved.cfg beside the checkpoint].
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Write the CSV here instead of standard output.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct PredictArgs {
    /// Weight file written by `train`.
    #[arg(long)]
    pub checkpoint: PathBuf,
    /// RGB image at the model's input size.
    #[arg(long)]
    pub image: PathBuf,
    /// Binary mask output (0 or 255).
    #[arg(long)]
    pub out_mask: PathBuf,
    /// Probability map output, `round(p * 255)` [default: `<out-mask stem>_prob.pgm`].
    #[arg(long)]
    pub prob_out: Option<PathBuf>,
    /// Probability threshold [default: eval.threshold of the config].
    #[arg(long)]
    pub threshold: Option<f64>,
    /// Run configuration [default: resolved.cfg beside the checkpoint].
    #[arg(long)]
    pub config: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct LrFindArgs {
    /// Run configuration file.
    #[arg(long)]
    pub config: PathBuf,
    /// Override one setting, `key=value`. Repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    pub overrides: Vec<String>,
    #[arg(long, default_value_t = 1e-7)]
    pub lr_min: f64,
    #[arg(long, default_value_t = 1.0)]
    pub lr_max: f64,
    #[arg(long, default_value_t = 100)]
    pub steps: usize,
}

/// An error with the exit status it maps to.
#[derive(Debug)]
pub struct CliError {
    pub kind: ErrorKind,
    pub message: String,
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self.kind {
            ErrorKind::Config => 1,
            ErrorKind::Data => 2,
            ErrorKind::Numeric => 3,
        }
    }

    pub fn usage(message: impl Into<String>) -> Self {
        CliError { kind: ErrorKind::Config, message: message.into() }
    }
}

impl fmt::Display for CliError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.message)
    }
}

impl std::error::Error for CliError {}

impl From<Error> for CliError {
    fn from(e: Error) -> Self {
        CliError { kind: e.kind(), message: e.to_string() }
    }
}

/// Attaches a tile id to an error message, keeping its kind.
pub(crate) fn for_tile(tile_id: &str, e: Error) -> CliError {
    CliError { kind: e.kind(), message: format!("tile {tile_id}: {e}") }
}

/// Runs one already-parsed command, writing human-readable output to `out`.
pub fn run(cli: Cli, out: &mut dyn Write) -> Result<(), CliError> {
    match cli.command {
        Command::Ingest(a) => commands::ingest(&a, out),
        Command::Synth(a) => commands::synth(&a, out),
        Command::Train(a) => commands::train(&a, out),
        Command::Eval(a) => commands::eval(&a, out),
        Command::Predict(a) => commands::predict(&a, out),
        Command::LrFind(a) => commands::lr_find(&a, out),
    }
}

/// Parses `args` (program name first) and runs the command. Returns the
/// process exit status; help and version requests exit 0.
pub fn main_with_args<I, T>(args: I, out: &mut dyn Write, err: &mut dyn Write) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let text = e.render().to_string();
            let _ = if code == 0 { write!(out, "{text}") } else { write!(err, "{text}") };
            return code;
        }
    };
    match run(cli, out) {
        Ok(()) => 0,
        Err(e) => {
            let _ = writeln!(err, "error: {e}");
            e.exit_code()
        }
    }
}
