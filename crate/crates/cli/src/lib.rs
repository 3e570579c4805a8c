//! `mmcr` command line. Every subcommand prints one JSON summary line on
//! stdout when it succeeds; errors go to stderr and select the exit code.

mod commands;
pub mod config;

use std::ffi::OsString;
use std::io::Write;
use std::path::PathBuf;

use clap::{Args, Parser, Subcommand};
use mmcr::ErrorKind;
use mmcr_service::ServiceError;
use thiserror::Error;

pub const EXIT_OK: i32 = 0;
pub const EXIT_USAGE: i32 = 1;
pub const EXIT_DATA: i32 = 2;
pub const EXIT_INTERNAL: i32 = 3;

#[derive(Error, Debug)]
pub enum CliError {
    #[error("usage: {0}")]
    Usage(String),
    #[error("{0}")]
    Data(String),
    #[error("internal error: {0}")]
    Internal(String),
    #[error(transparent)]
    Core(#[from] mmcr::Error),
    #[error(transparent)]
    Service(#[from] ServiceError),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        let by_kind = |k: ErrorKind| match k {
            ErrorKind::Usage => EXIT_USAGE,
            ErrorKind::Data => EXIT_DATA,
            ErrorKind::Internal => EXIT_INTERNAL,
        };
        match self {
            CliError::Usage(_) => EXIT_USAGE,
            CliError::Data(_) => EXIT_DATA,
            CliError::Internal(_) => EXIT_INTERNAL,
            CliError::Core(e) => by_kind(e.kind()),
            CliError::Service(ServiceError::Core(e)) => by_kind(e.kind()),
            CliError::Service(ServiceError::WrongGranularity { .. }) => EXIT_USAGE,
            CliError::Service(_) => EXIT_INTERNAL,
        }
    }
}

#[derive(Parser, Debug)]
#[command(name = "mmcr", version, about = "Vehicle make, model and color recognition toolkit")]
struct Cli {
    /// TOML settings file shared by all subcommands
    #[arg(long, global = true, env = "MMCR_CONFIG")]
    config: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Debug, Default)]
pub struct PrepFlags {
    /// Margin added around the vehicle box, as a fraction of its size
    #[arg(long)]
    margin: Option<f64>,
    /// Side of the square network input in pixels
    #[arg(long)]
    size: Option<u32>,
    /// Blank everything outside the inscribed ellipse
    #[arg(long)]
    mask: bool,
    /// Fill for masked pixels: black or mean
    #[arg(long)]
    fill: Option<String>,
}

#[derive(Args, Debug, Default)]
pub struct TrainFlags {
    #[arg(long)]
    epochs: Option<i64>,
    #[arg(long)]
    batch_size: Option<i64>,
    #[arg(long)]
    learning_rate: Option<f64>,
    #[arg(long)]
    momentum: Option<f64>,
    #[arg(long)]
    weight_decay: Option<f64>,
    #[arg(long)]
    lr_step: Option<i64>,
    #[arg(long)]
    lr_decay: Option<f64>,
    #[arg(long)]
    seed: Option<i64>,
    /// tiny, small or base
    #[arg(long)]
    preset: Option<String>,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Convert a Stanford Cars or CompCars release into a manifest
    Ingest {
        /// stanford or compcars
        #[arg(long)]
        format: String,
        /// cars_annos.mat or devkit directory (stanford); the release's data/ directory (compcars)
        #[arg(long)]
        annotations: PathBuf,
        /// Image root
        #[arg(long)]
        images: PathBuf,
        /// classification or verification (compcars only)
        #[arg(long, default_value = "classification")]
        task: String,
        /// Seed for generated calibration pairs
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Render a seeded synthetic dataset
    Synth {
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        classes: Option<i64>,
        #[arg(long)]
        per_class: Option<i64>,
        /// One class per fill color instead of per shape family
        #[arg(long)]
        color: bool,
        #[arg(long)]
        seed: Option<i64>,
    },
    /// Crop, resize and optionally mask every record
    Preprocess {
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[command(flatten)]
        prep: PrepFlags,
    },
    /// Train a classifier from scratch
    Train {
        #[arg(long)]
        manifest: PathBuf,
        /// Output model file
        #[arg(long)]
        out: PathBuf,
        /// make, make_model, make_model_year or color
        #[arg(long, default_value = "make_model")]
        task: String,
        /// Training log (JSON lines); defaults to OUT.log.jsonl
        #[arg(long)]
        log: Option<PathBuf>,
        #[command(flatten)]
        prep: PrepFlags,
        #[command(flatten)]
        train: TrainFlags,
    },
    /// Continue training an existing model on a new manifest
    Finetune {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        log: Option<PathBuf>,
        #[command(flatten)]
        train: TrainFlags,
    },
    /// Ranked predictions for every record of a manifest, or for one image
    Predict {
        #[arg(long)]
        model: PathBuf,
        #[arg(long, required_unless_present = "image")]
        manifest: Option<PathBuf>,
        /// Predict a single image file instead of a manifest
        #[arg(long, conflicts_with = "manifest")]
        image: Option<PathBuf>,
        #[arg(long, default_value_t = 5)]
        top_k: usize,
        /// JSON lines output; stdout summary only when absent
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Benchmark report for a protocol
    Eval {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        manifest: PathBuf,
        /// stanford, compcars_cls, compcars_verif or generic
        #[arg(long)]
        protocol: String,
        /// Report path prefix; writes PREFIX.json and PREFIX.txt
        #[arg(long, default_value = "report")]
        out: PathBuf,
        /// Directory with calibration.tsv and pairs_{easy,medium,hard}.tsv (compcars_verif)
        #[arg(long)]
        pairs_dir: Option<PathBuf>,
        /// Model before fine-tuning, reported as an extra row (compcars_verif)
        #[arg(long)]
        frozen: Option<PathBuf>,
    },
    /// Pair verification with embedding distances
    #[command(subcommand)]
    Verify(VerifyCommand),
    /// Outlier review queue
    #[command(subcommand)]
    Prune(PruneCommand),
    /// Run the HTTP service
    Serve {
        #[arg(long)]
        listen: Option<String>,
        #[arg(long)]
        make_model_model: Option<PathBuf>,
        #[arg(long)]
        color_model: Option<PathBuf>,
        #[arg(long)]
        queue: Option<PathBuf>,
        #[arg(long)]
        lease_seconds: Option<i64>,
    },
}

#[derive(Subcommand, Debug)]
enum VerifyCommand {
    /// Fit the same/different threshold on labeled pairs
    Calibrate {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long)]
        pairs: PathBuf,
        /// Threshold file (JSON)
        #[arg(long)]
        out: PathBuf,
    },
    /// Accuracy of a calibrated threshold on labeled pairs
    Evaluate {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long)]
        pairs: PathBuf,
        /// Threshold file written by `verify calibrate`
        #[arg(long)]
        threshold: PathBuf,
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

#[derive(Subcommand, Debug)]
enum PruneCommand {
    /// Score records and queue the most atypical ones for review
    Build {
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        fraction: Option<f64>,
        /// Queue file
        #[arg(long)]
        out: PathBuf,
    },
    /// Apply reviewed verdicts to a manifest
    Apply {
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long)]
        queue: PathBuf,
        /// Model whose vocabulary validates relabels
        #[arg(long)]
        model: PathBuf,
        /// Cleaned manifest
        #[arg(long)]
        out: PathBuf,
        /// Audit log (JSON lines); defaults to OUT.audit.jsonl
        #[arg(long)]
        audit: Option<PathBuf>,
    },
}

fn init_logging(serve: bool) {
    let default = if serve { "info" } else { "warn" };
    let filter = tracing_subscriber::EnvFilter::try_from_default_env()
        .unwrap_or_else(|_| tracing_subscriber::EnvFilter::new(default));
    let _ = tracing_subscriber::fmt()
        .json()
        .with_env_filter(filter)
        .with_writer(std::io::stderr)
        .try_init();
}

/// Parses `args` (program name first), runs the subcommand and returns the
/// process exit code.
pub fn dispatch<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { EXIT_USAGE } else { EXIT_OK };
        }
    };
    init_logging(matches!(cli.command, Command::Serve { .. }));
    let result = config::Layers::load(cli.config.as_deref(), std::env::vars())
        .and_then(|layers| commands::run(cli.command, &layers));
    match result {
        Ok(summary) => {
            let mut out = std::io::stdout().lock();
            let _ = writeln!(out, "{summary}");
            let _ = out.flush();
            EXIT_OK
        }
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}
