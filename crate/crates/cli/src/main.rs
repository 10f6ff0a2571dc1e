//! `sfsc`: train, slice, and score width-switchable retrieval models.

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

mod commands;
mod config;

#[derive(Parser)]
#[command(
    name = "sfsc",
    version,
    about = "Width-switchable embedding models with cross-width retrieval"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic dataset and write per-split CSVs
    GenData {
        /// JSON generator settings; omitted fields use defaults
        #[arg(long)]
        spec: PathBuf,
        /// Output directory for train.csv, query.csv, gallery.csv, spec.json
        #[arg(long)]
        out: PathBuf,
    },
    /// Train a switchable model and write checkpoint, manifest, and scores
    Train {
        /// JSON run configuration (model, train, data, eval sections)
        #[arg(long)]
        config: PathBuf,
        /// Output directory for checkpoint.sfsc, manifest.jsonl, compat.json
        #[arg(long)]
        out: PathBuf,
    },
    /// Score checkpoint slices against each other on a dataset
    Eval {
        /// Checkpoint written by train
        #[arg(long)]
        checkpoint: PathBuf,
        /// Directory holding train.csv, query.csv, gallery.csv
        #[arg(long)]
        data: PathBuf,
        /// Crop ratios to cross-score, e.g. 0.25,0.5,1.0
        #[arg(long, value_delimiter = ',', required = true)]
        ratios: Vec<f64>,
        /// Where to write compat.json
        #[arg(long, default_value = ".")]
        out: PathBuf,
    },
    /// Check tape gradients against central finite differences
    Gradcheck {
        /// Optional run configuration; contributes loss settings and ratios,
        /// the model shape stays small and fixed
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long, hide = true)]
        inject_gradient_fault: bool,
    },
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::GenData { spec, out } => commands::gen_data(&spec, &out),
        Command::Train { config, out } => commands::train(&config, &out),
        Command::Eval {
            checkpoint,
            data,
            ratios,
            out,
        } => commands::eval(&checkpoint, &data, &ratios, &out),
        Command::Gradcheck {
            config,
            inject_gradient_fault,
        } => commands::gradcheck(config.as_deref(), inject_gradient_fault),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}
