mod commands;
mod config;
mod provenance;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

/// Cross-modality distillation pipeline on synthetic CBCT/MRI phantoms.
#[derive(Parser)]
#[command(name = "cmedl", version)]
pub struct Cli {
    /// Directory that relative paths resolve against.
    #[arg(long, global = true)]
    pub workdir: Option<PathBuf>,
    /// JSON run configuration; built-in defaults when omitted.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Also print suggested gnuplot commands for the CSVs written.
    #[arg(long, global = true)]
    pub gnuplot_hints: bool,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Args, Clone)]
pub struct Inputs {
    /// Corpus manifest; defaults to `<paths.data_dir>/manifest.json`.
    #[arg(long)]
    pub data: Option<PathBuf>,
    #[arg(long, default_value = "test")]
    pub split: String,
}

#[derive(Subcommand)]
pub enum Command {
    /// Print the default configuration.
    DefaultConfig,
    /// Generate the phantom corpus.
    GenerateData {
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Train CMEDL or a baseline.
    Train {
        /// cmedl, cbct_only, pmri_seg or cbct_plus_pmri.
        #[arg(long)]
        mode: Option<String>,
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long)]
        data: Option<PathBuf>,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        max_epochs: Option<usize>,
        #[arg(long)]
        max_steps_per_epoch: Option<usize>,
        /// Checkpoint whose generators the pmri_seg and cbct_plus_pmri modes reuse.
        #[arg(long)]
        translation_checkpoint: Option<PathBuf>,
        /// Continue from `<out>/last`.
        #[arg(long)]
        resume: bool,
    },
    /// Write pseudo-MRI images for the CBCT cases of a split.
    Translate {
        #[arg(long)]
        checkpoint: PathBuf,
        #[command(flatten)]
        inputs: Inputs,
        #[arg(long)]
        out: PathBuf,
    },
    /// Write predicted masks for the CBCT cases of a split.
    Segment {
        #[arg(long)]
        checkpoint: PathBuf,
        #[command(flatten)]
        inputs: Inputs,
        /// student, teacher_on_pmri or student_with_pmri; the checkpoint's own by default.
        #[arg(long)]
        segment_mode: Option<String>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Score one or more checkpoints and compare them pairwise.
    Evaluate {
        /// `name=checkpoint_dir`, repeatable.
        #[arg(long = "method", required = true)]
        methods: Vec<String>,
        #[command(flatten)]
        inputs: Inputs,
        #[arg(long)]
        tau: Option<f64>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Spread of DSC when the last layers' weights are randomly zeroed.
    Sensitivity {
        #[arg(long)]
        checkpoint: PathBuf,
        #[command(flatten)]
        inputs: Inputs,
        #[arg(long)]
        segment_mode: Option<String>,
        #[arg(long)]
        runs: Option<usize>,
        #[arg(long)]
        rate: Option<f64>,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Sample tap features around each tumour, score their separability and write them out.
    ExportFeatures {
        #[arg(long)]
        checkpoint: PathBuf,
        #[command(flatten)]
        inputs: Inputs,
        /// student (also for cbct_only checkpoints) or teacher.
        #[arg(long, default_value = "student")]
        source: String,
        #[arg(long)]
        per_class: Option<usize>,
        #[arg(long)]
        out: PathBuf,
    },
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    match commands::run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(commands::exit_code(&e))
        }
    }
}
