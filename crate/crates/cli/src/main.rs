mod commands;

use std::process::ExitCode;

use clap::{Parser, Subcommand};
use lit_core::LitError;

use commands::{AuditArgs, BuildArgs, InspectArgs, ToleranceFailure, TrainArgs, VerifyArgs};

#[derive(Parser)]
#[command(name = "lit", version, about = "Desk-scale LIT: cost audit, equivalence checks, training and inspection")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Itemized parameter/FLOP report, compared against the published figures for presets.
    Audit(AuditArgs),
    /// FC / convolution / attention equivalences and receptive-field probes.
    Verify(VerifyArgs),
    /// Train on the synthetic shapes dataset (or a dataset checkpoint).
    Train(TrainArgs),
    /// Export attention maps or offset traces from a model.
    Inspect(InspectArgs),
    /// Initialize a model and write its parameters.
    Build(BuildArgs),
}

pub const EXIT_OTHER: u8 = 1;
pub const EXIT_CONFIG: u8 = 3;
pub const EXIT_NUMERIC: u8 = 4;
pub const EXIT_TOLERANCE: u8 = 5;

fn exit_code(err: &anyhow::Error) -> u8 {
    if err.downcast_ref::<ToleranceFailure>().is_some() {
        return EXIT_TOLERANCE;
    }
    match err.downcast_ref::<LitError>() {
        Some(LitError::Config(_) | LitError::Validation(_) | LitError::Shape { .. } | LitError::Json(_)) => EXIT_CONFIG,
        Some(LitError::NonFinite { .. }) => EXIT_NUMERIC,
        _ => EXIT_OTHER,
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Audit(a) => commands::audit(a),
        Command::Verify(a) => commands::verify(a),
        Command::Train(a) => commands::train(a),
        Command::Inspect(a) => commands::inspect(a),
        Command::Build(a) => commands::build(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e))
        }
    }
}
