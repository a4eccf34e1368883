//! `lidarpan`: projection, fusion, evaluation, pseudo-labeling and toy
//! training over a shared JSON run configuration.

mod commands;
mod config;
mod error;
mod eval;
mod files;
mod pseudo;

use std::io::Write;
use std::path::PathBuf;
use std::process::ExitCode;

use clap::error::ErrorKind;
use clap::{Parser, Subcommand};

use crate::config::RunConfig;
use crate::error::{CliError, CliResult};

#[derive(Debug, Parser)]
#[command(
    name = "lidarpan",
    version,
    about = "Range-image LiDAR panoptic segmentation toolkit"
)]
pub struct Cli {
    /// JSON run configuration (class map, projection, fusion, metrics, seed).
    #[arg(long, global = true, value_name = "FILE")]
    pub config: Option<PathBuf>,

    /// Seed for every randomized initialization; overrides the config.
    #[arg(long, global = true)]
    pub seed: Option<u64>,

    /// Worker threads for per-scan work (default: all cores).
    #[arg(long, global = true, value_name = "N")]
    pub jobs: Option<usize>,

    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Project a scan into a 5-channel range image.
    Project(commands::ProjectArgs),
    /// Transfer 2D panoptic labels back to the points of a scan.
    Backproject(commands::BackprojectArgs),
    /// Fuse semantic logits and instance predictions into a panoptic map.
    Fuse(commands::FuseArgs),
    /// Score predicted labels against ground truth (PQ, SQ, RQ, mIoU).
    Eval(eval::EvalArgs),
    /// Search control parameters and write filtered pseudo labels.
    PseudoLabel(pseudo::PseudoArgs),
    /// Train the semantic network on synthetic scenes; loss CSV on stdout.
    TrainToy(commands::TrainArgs),
    /// Finite-difference checks of every differentiable operator.
    Gradcheck(commands::GradcheckArgs),
}

fn run(cli: Cli) -> CliResult<()> {
    let mut cfg = match &cli.config {
        Some(path) => RunConfig::load(path)?,
        None => RunConfig::default(),
    };
    if let Some(seed) = cli.seed {
        cfg.seed = seed;
    }
    if let Some(jobs) = cli.jobs {
        rayon::ThreadPoolBuilder::new()
            .num_threads(jobs)
            .build_global()
            .map_err(|e| CliError::validation(format!("--jobs: {e}")))?;
    }
    let mut out = std::io::stdout().lock();
    match cli.command {
        Command::Project(a) => commands::project(&a, &cfg, &mut out),
        Command::Backproject(a) => commands::backproject(&a, &cfg, &mut out),
        Command::Fuse(a) => commands::fuse(&a, &cfg, &mut out),
        Command::Eval(a) => eval::run(&a, &cfg, &mut out),
        Command::PseudoLabel(a) => pseudo::run(&a, &cfg, &mut out),
        Command::TrainToy(a) => commands::train_toy(&a, &cfg, &mut out),
        Command::Gradcheck(a) => commands::gradcheck(&a, &mut out),
    }?;
    out.flush()
        .map_err(|e| CliError::validation(format!("stdout: {e}")))
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) if matches!(e.kind(), ErrorKind::DisplayHelp | ErrorKind::DisplayVersion) => {
            let _ = e.print();
            return ExitCode::SUCCESS;
        }
        Err(e) => {
            let _ = e.print();
            let err = CliError::usage(e.kind().to_string());
            eprintln!("{}", err.to_json());
            return ExitCode::from(err.exit_code() as u8);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("{}", e.to_json());
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
