use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};
use pcrnn::recon::Method;
use pcrnn_cli::commands;
use pcrnn_cli::config::{RunConfig, Split};
use pcrnn_cli::error::{CliError, CliResult};
use serde_json::json;

#[derive(Parser)]
#[command(name = "pcrnn", version, about = "Undersampled MRI reconstruction with a pyramid convolutional RNN")]
struct Cli {
    #[command(subcommand)]
    command: Command,
    /// TOML run configuration.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    #[arg(long, global = true)]
    seed: Option<u64>,
    #[arg(long, global = true, value_enum)]
    method: Option<MethodArg>,
    #[arg(long, global = true, value_parser = ["4", "8"])]
    accel: Option<String>,
    /// Output directory.
    #[arg(long, global = true, default_value = "out")]
    out: PathBuf,
}

#[derive(Clone, Copy, ValueEnum)]
enum MethodArg {
    Pcrnn,
    Cs,
    ZeroFilled,
}

#[derive(Clone, Copy, ValueEnum)]
enum SplitArg {
    Train,
    Val,
    Test,
}

#[derive(Subcommand)]
enum Command {
    /// Simulate train/val/test datasets.
    Simulate,
    /// Train a PC-RNN.
    Train {
        /// Directory written by `simulate`.
        #[arg(long)]
        data: Option<PathBuf>,
    },
    /// Reconstruct a split and write images.
    Reconstruct {
        #[arg(long)]
        data: Option<PathBuf>,
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[arg(long, value_enum, default_value = "test")]
        split: SplitArg,
    },
    /// Compare predicted images with ground truth.
    Evaluate {
        #[arg(long)]
        pred: PathBuf,
        #[arg(long)]
        gt: PathBuf,
    },
    /// Panels, stage strips and tables from reconstruction directories.
    Report {
        #[arg(long = "input", required = true)]
        inputs: Vec<PathBuf>,
        /// Zoom window as row,col,height,width.
        #[arg(long, value_delimiter = ',')]
        zoom: Option<Vec<usize>>,
    },
}

fn load_config(cli: &Cli) -> CliResult<RunConfig> {
    let mut cfg = match &cli.config {
        Some(path) => RunConfig::load(path)?,
        None => RunConfig::default(),
    };
    if let Some(seed) = cli.seed {
        cfg.seed = seed;
    }
    if let Some(m) = cli.method {
        cfg.method = match m {
            MethodArg::Pcrnn => Method::Pcrnn,
            MethodArg::Cs => Method::Cs,
            MethodArg::ZeroFilled => Method::ZeroFilled,
        };
    }
    if let Some(a) = &cli.accel {
        cfg.acceleration = a.parse().map_err(|_| CliError::Config(format!("bad acceleration {a}")))?;
    }
    Ok(cfg)
}

fn run(cli: &Cli) -> CliResult<serde_json::Value> {
    let cfg = load_config(cli)?;
    let out: &Path = &cli.out;
    Ok(match &cli.command {
        Command::Simulate => json!(commands::simulate(&cfg, out)?.summary),
        Command::Train { data } => {
            let s = commands::train(&cfg, out, data.as_deref())?;
            json!({ "steps": s.steps, "best_epoch": s.best_epoch, "best": s.best })
        }
        Command::Reconstruct { data, checkpoint, split } => {
            let split = match split {
                SplitArg::Train => Split::Train,
                SplitArg::Val => Split::Val,
                SplitArg::Test => Split::Test,
            };
            let rows = commands::reconstruct(&cfg, out, data.as_deref(), split, checkpoint.as_deref())?;
            json!({ "slices": rows.len(), "method": cfg.method.name() })
        }
        Command::Evaluate { pred, gt } => json!(commands::evaluate(pred, gt, Some(out))?.mean),
        Command::Report { inputs, zoom } => {
            let zoom = match zoom.as_deref() {
                Some(&[r, c, h, w]) => Some([r, c, h, w]),
                Some(z) => return Err(CliError::Config(format!("--zoom needs 4 values, got {}", z.len()))),
                None => cfg.report.zoom,
            };
            let s = commands::report(inputs, out, zoom)?;
            json!({ "panels": s.panels.len(), "strips": s.strips.len(), "coarse_to_fine_fraction": s.coarse_to_fine_fraction })
        }
    })
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) if !e.use_stderr() => e.exit(),
        Err(e) => {
            let message = e.render().to_string();
            eprintln!("{}", json!({ "error": { "kind": "usage", "message": message.trim() } }));
            return ExitCode::FAILURE;
        }
    };
    match run(&cli) {
        Ok(summary) => {
            println!("{summary}");
            ExitCode::SUCCESS
        }
        Err(e) => {
            eprintln!("{}", e.to_json());
            ExitCode::FAILURE
        }
    }
}
