use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use orbstab_cli::{run, Command};

#[derive(Parser)]
#[command(name = "orbstab", version, about = "Orbital stabilization via transverse linearization")]
struct Cli {
    #[command(subcommand)]
    command: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Orbit check, frame invariants, linearizations and undriven spectra.
    Analyze(Args),
    /// Periodic Riccati gain, closed-loop spectra and heuristics.
    Synthesize(Args),
    /// Nonlinear closed-loop simulation with convergence metrics.
    Simulate(Args),
    /// Collate artifacts of earlier runs.
    Report(Args),
}

#[derive(clap::Args)]
struct Args {
    #[arg(long)]
    config: PathBuf,
    #[arg(long)]
    out: Option<PathBuf>,
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 2 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    let (command, args) = match cli.command {
        Cmd::Analyze(a) => (Command::Analyze, a),
        Cmd::Synthesize(a) => (Command::Synthesize, a),
        Cmd::Simulate(a) => (Command::Simulate, a),
        Cmd::Report(a) => (Command::Report, a),
    };
    match run(command, &args.config, args.out.as_deref()) {
        Ok(_) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("{}", e.to_json());
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
