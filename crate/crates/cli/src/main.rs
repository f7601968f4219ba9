//! Pipeline orchestration CLI: prepare, fit-backbone, refine, search,
//! sweep, report. Exit codes: 0 success, 2 config validation, 3 missing
//! artifact, 4 numeric failure.

mod commands;
mod config;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use bcr_core::error::BcrError;
use commands::CommonArgs;
use config::RunConfig;

#[derive(Parser)]
#[command(name = "bcr", about = "Inference-time refinement for tabular diffusion")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(clap::Args)]
struct RunArgs {
    /// Run configuration (TOML).
    #[arg(long)]
    config: PathBuf,
    /// Master seed override.
    #[arg(long)]
    seed: Option<u64>,
    /// Worker thread count (0 = default).
    #[arg(long, default_value_t = 0)]
    threads: usize,
    /// Output directory override.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Overwrite existing artifacts.
    #[arg(long)]
    force: bool,
}

#[derive(Subcommand)]
enum Command {
    /// Ingest, split, impute, and encode the dataset.
    Prepare(RunArgs),
    /// Fit the frozen analytic backbone on the encoded training split.
    FitBackbone(RunArgs),
    /// Run the single-configuration pipeline and emit metrics + D_syn.
    Refine(RunArgs),
    /// Run the outer TPE search with the inner Stage III grid.
    Search(RunArgs),
    /// Sweep the cardinality multiplier K and emit curve data.
    Sweep(RunArgs),
    /// Aggregate refine reports across run directories.
    Report {
        /// Run directories (each containing refine/metrics.json).
        dirs: Vec<PathBuf>,
        /// Output report path.
        #[arg(long, default_value = "report.json")]
        out: PathBuf,
        /// Overwrite an existing report.
        #[arg(long)]
        force: bool,
    },
}

fn init_threads(threads: usize) {
    if threads > 0 {
        // A failure here means the global pool is already set; fine in tests.
        let _ = rayon::ThreadPoolBuilder::new().num_threads(threads).build_global();
    }
}

fn run_with_config(
    args: &RunArgs,
    f: impl Fn(&RunConfig, &str, &CommonArgs) -> bcr_core::error::Result<()>,
) -> bcr_core::error::Result<()> {
    init_threads(args.threads);
    let (cfg, text) = RunConfig::load(&args.config)?;
    let common = CommonArgs {
        out: args.out.clone().unwrap_or_else(|| cfg.output.dir.clone()),
        seed: args.seed,
        force: args.force,
    };
    f(&cfg, &text, &common)
}

fn exit_code_for(e: &BcrError) -> u8 {
    match e {
        BcrError::Io(_) | BcrError::Csv(_) | BcrError::Format(_) => 3,
        BcrError::Numeric(_) => 4,
        _ => 2,
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match &cli.command {
        Command::Prepare(a) => run_with_config(a, commands::cmd_prepare),
        Command::FitBackbone(a) => run_with_config(a, commands::cmd_fit_backbone),
        Command::Refine(a) => run_with_config(a, commands::cmd_refine),
        Command::Search(a) => run_with_config(a, commands::cmd_search),
        Command::Sweep(a) => run_with_config(a, commands::cmd_sweep),
        Command::Report { dirs, out, force } => commands::cmd_report(dirs, out, *force),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code_for(&e))
        }
    }
}
