//! `gapcraft`: generate synthetic cross-modal tasks, train the two-stage
//! pipeline, and report on the bound decomposition.

mod args;
mod commands;
mod config;

use std::process::ExitCode;

use clap::{CommandFactory, FromArgMatches, Parser, Subcommand};

use crate::args::*;

#[derive(Parser, Debug)]
#[command(name = "gapcraft", version, about = "Feature-alignment and label-distortion experiments on synthetic tasks")]
#[command(arg_required_else_help = true)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate a synthetic task bundle.
    Gen(GenArgs),
    /// Pretrain the source embedder and head.
    Pretrain(TrainArgs),
    /// Lipschitz-recalibrate a pretrained head on the proxy set.
    Recalibrate(TrainArgs),
    /// Learn the target feature map (alignment then distortion epochs).
    Stage1(TrainArgs),
    /// Train the transport head on a frozen feature map.
    Stage2(TrainArgs),
    /// Evaluate the bound decomposition on exact discrete tasks.
    BoundReport(BoundReportArgs),
    /// Check the bound and its proof terms on random discrete instances.
    VerifyTheorem(VerifyArgs),
    /// Recalibrate over a grid of Lipschitz targets.
    SweepOmega(SweepArgs),
    /// Compare nft, fa_only and recraft over seed replicas.
    Baseline(BaselineArgs),
    /// Correlate semantic gap with target error in a run log.
    Correlate(CorrelateArgs),
}

/// Error raised for bad invocations detected after parsing.
#[derive(Debug)]
pub struct UsageError(pub String);

impl std::fmt::Display for UsageError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for UsageError {}

fn init_logging() {
    let level = match std::env::var("GAPCRAFT_LOG").as_deref() {
        Ok("quiet") => log::LevelFilter::Off,
        Ok("debug") => log::LevelFilter::Debug,
        Ok("info") | Err(_) => log::LevelFilter::Info,
        Ok(other) => {
            eprintln!("warning: GAPCRAFT_LOG={other} is not one of quiet, info, debug; using info");
            log::LevelFilter::Info
        }
    };
    env_logger::Builder::new().filter_level(level).format_timestamp(None).init();
}

fn main() -> ExitCode {
    let matches = match Cli::command().try_get_matches() {
        Ok(m) => m,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(u8::try_from(e.exit_code()).unwrap_or(2));
        }
    };
    let cli = match Cli::from_arg_matches(&matches) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(2);
        }
    };
    init_logging();
    let (_, sub) = matches.subcommand().expect("subcommand is required");
    match commands::run(cli.command, sub) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) if e.downcast_ref::<UsageError>().is_some() => {
            eprintln!("error: {e:#}");
            eprintln!("\n{}", Cli::command().render_usage());
            ExitCode::from(2)
        }
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(1)
        }
    }
}
