//! `dmsp`: generate data, train, predict, evaluate and plot.

mod commands;
mod svg;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use dmsp_core::training::TrainMode;
use dmsp_core::{DmspError, ErrorKind};
use thiserror::Error;

#[derive(Debug, Parser)]
#[command(name = "dmsp", version, about = "Multi-source spatial prediction with learned source fidelity")]
struct Cli {
    /// Print errors as JSON on stderr.
    #[arg(long, global = true)]
    json_errors: bool,

    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Generate the synthetic two-source SCR dataset and its truth grid.
    GenScr(GenScrArgs),
    /// Train a model; writes model.ckpt and report.json.
    Train(TrainArgs),
    /// Predict at locations from a CSV, or leave-one-out at dataset samples.
    Predict(PredictArgs),
    /// Score test-split predictions against a reference.
    Eval(EvalArgs),
    /// Print learned fidelity logits and scores as JSON.
    InspectFidelity(InspectArgs),
    /// Write SVG charts of fidelity scores and test predictions.
    Plot(PlotArgs),
    /// Time one training epoch on SCR at growing sample counts.
    Bench(BenchArgs),
}

#[derive(Debug, Args)]
pub struct GenScrArgs {
    #[arg(long)]
    pub seed: u64,
    #[arg(long)]
    pub out_dir: PathBuf,
    #[arg(long, default_value_t = 200)]
    pub n_high: usize,
    #[arg(long, default_value_t = 2000)]
    pub n_low: usize,
    #[arg(long, default_value_t = 0.5)]
    pub noise_sigma: f64,
    #[arg(long, default_value_t = 64)]
    pub grid_size: usize,
    #[arg(long, default_value_t = 8.0)]
    pub length_scale: f64,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    /// Dataset CSV.
    #[arg(long)]
    pub data: PathBuf,
    /// Output directory for model.ckpt and report.json.
    #[arg(long)]
    pub out_dir: PathBuf,
    /// Seed for initialization and sample order (required unless resuming).
    #[arg(long)]
    pub seed: Option<u64>,
    /// Seed of the train/validation/test split; defaults to --seed.
    #[arg(long)]
    pub split_seed: Option<u64>,
    /// full | single-source=<i> | frozen-fidelity
    #[arg(long, default_value = "full", value_parser = parse_mode)]
    pub mode: TrainMode,
    /// Visit sources then samples in stored order instead of shuffling.
    #[arg(long)]
    pub strict_order: bool,
    #[arg(long, default_value_t = 0.001)]
    pub learning_rate: f64,
    /// Epoch limit [default: 500]. When resuming, raises the stored limit.
    #[arg(long)]
    pub max_epochs: Option<usize>,
    #[arg(long, default_value_t = 20)]
    pub patience: usize,
    #[arg(long, default_value_t = 3)]
    pub k: usize,
    #[arg(long, default_value_t = 16)]
    pub hidden_dim: usize,
    #[arg(long, default_value_t = 2)]
    pub layers: usize,
    #[arg(long, default_value_t = 1)]
    pub batch_size: usize,
    /// Continue from a checkpoint written by `train`. Its stored
    /// configuration is used; only --max-epochs may be raised.
    #[arg(long)]
    pub resume: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct PredictArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long)]
    pub data: PathBuf,
    /// CSV with columns x,y[,timestamp].
    #[arg(long, conflicts_with = "masked_samples")]
    pub locations: Option<PathBuf>,
    /// CSV with columns source_id,index: predict these dataset samples
    /// with their own targets hidden.
    #[arg(long)]
    pub masked_samples: Option<PathBuf>,
    /// Observations used as context: all, or only the training split.
    #[arg(long, default_value = "all", value_parser = ["all", "train"])]
    pub context: String,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long)]
    pub data: PathBuf,
    /// Truth grid CSV (x,y,truth).
    #[arg(long, conflicts_with = "reference_source")]
    pub truth: Option<PathBuf>,
    /// Score against this source's observed test targets.
    #[arg(long)]
    pub reference_source: Option<usize>,
    /// Split seed; defaults to the one stored in the checkpoint.
    #[arg(long)]
    pub split_seed: Option<u64>,
    /// Per-sample residual CSV.
    #[arg(long)]
    pub residuals: Option<PathBuf>,
    /// Write the report here as well as to stdout.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct InspectArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
}

#[derive(Debug, Args)]
pub struct PlotArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long, conflicts_with = "reference_source")]
    pub truth: Option<PathBuf>,
    #[arg(long)]
    pub reference_source: Option<usize>,
    #[arg(long)]
    pub split_seed: Option<u64>,
    #[arg(long)]
    pub out_dir: PathBuf,
}

#[derive(Debug, Args)]
pub struct BenchArgs {
    #[arg(long)]
    pub seed: u64,
    /// Sample-count multipliers applied to the default SCR sizes.
    #[arg(long, value_delimiter = ',', default_value = "1,4,16")]
    pub scales: Vec<usize>,
    /// Epochs timed per scale; the median is reported.
    #[arg(long, default_value_t = 1)]
    pub epochs: usize,
}

fn parse_mode(s: &str) -> Result<TrainMode, String> {
    match s {
        "full" => Ok(TrainMode::Full),
        "frozen-fidelity" => Ok(TrainMode::FrozenUniformFidelity),
        _ => s
            .strip_prefix("single-source=")
            .and_then(|i| i.parse().ok())
            .map(TrainMode::SingleSource)
            .ok_or_else(|| format!("unknown mode `{s}`; expected full, single-source=<i> or frozen-fidelity")),
    }
}

#[derive(Debug, Error)]
pub enum CliError {
    #[error(transparent)]
    Core(#[from] DmspError),
    #[error("{0}")]
    Usage(String),
    #[error("{0}")]
    Data(String),
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl CliError {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        CliError::Io {
            path: path.into(),
            source,
        }
    }

    fn kind(&self) -> (&'static str, u8) {
        match self {
            CliError::Core(e) => match e.kind() {
                ErrorKind::Usage => ("usage", 2),
                ErrorKind::Data => ("data", 3),
                ErrorKind::Numeric => ("numeric", 4),
            },
            CliError::Usage(_) => ("usage", 2),
            CliError::Data(_) | CliError::Io { .. } => ("data", 3),
        }
    }
}

fn report_error(kind: &str, code: u8, message: &str, json: bool) -> ExitCode {
    if json {
        let v = serde_json::json!({"error": kind, "exit_code": code, "message": message});
        eprintln!("{v}");
    } else {
        eprintln!("error: {message}");
    }
    ExitCode::from(code)
}

fn main() -> ExitCode {
    let json_errors = std::env::args().any(|a| a == "--json-errors");
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) if !e.use_stderr() => {
            let _ = e.print();
            return ExitCode::SUCCESS;
        }
        Err(e) if json_errors => {
            return report_error("usage", 2, e.to_string().trim(), true);
        }
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(2);
        }
    };
    let result = match cli.command {
        Command::GenScr(a) => commands::gen_scr(a),
        Command::Train(a) => commands::train(a),
        Command::Predict(a) => commands::predict(a),
        Command::Eval(a) => commands::eval(a),
        Command::InspectFidelity(a) => commands::inspect_fidelity(a),
        Command::Plot(a) => commands::plot(a),
        Command::Bench(a) => commands::bench(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            let (kind, code) = e.kind();
            report_error(kind, code, &e.to_string(), cli.json_errors)
        }
    }
}
