//! `lutmpc`: offline provisioning, two-party training over TCP or in
//! process, secure inference, lookup benchmarks and leakage audits.
//!
//! Every command prints a `key=value` report on stdout.

mod commands;
mod config;
mod model;
mod settings;

use clap::{Parser, Subcommand};

use commands::{AuditArgs, BenchArgs, InferArgs, OfflineArgs, OracleArgs, ServeArgs, TrainArgs};

#[derive(Parser)]
#[command(
    name = "lutmpc",
    version,
    about = "Two-party training with lookup-table activations"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run the CSP: share the data and write both parties' offline bundles.
    Offline(OfflineArgs),
    /// Play one party of a training run from its bundle, over TCP.
    Serve(ServeArgs),
    /// Train with both parties and the CSP in this process.
    Train(TrainArgs),
    /// Evaluate a model on secret-shared inputs.
    Infer(InferArgs),
    /// Time one batch of table lookups.
    Bench(BenchArgs),
    /// Measure key-frequency leakage of noisy multi-use lookups.
    Audit(AuditArgs),
    /// Train the plaintext fixed-point reference.
    Oracle(OracleArgs),
}

fn main() {
    let cli = Cli::parse();
    let result = match &cli.command {
        Command::Offline(a) => commands::offline(a),
        Command::Serve(a) => commands::serve(a),
        Command::Train(a) => commands::train(a),
        Command::Infer(a) => commands::infer(a),
        Command::Bench(a) => commands::bench(a),
        Command::Audit(a) => commands::audit(a),
        Command::Oracle(a) => commands::oracle_cmd(a),
    };
    match result {
        Ok(report) => print!("{report}"),
        Err(e) => {
            println!("status=error");
            println!("error={e}");
            std::process::exit(commands::exit_code(&e));
        }
    }
}
