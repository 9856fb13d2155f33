mod commands;
mod schema;

use clap::{Parser, Subcommand};

/// Certify, compare and stress-test local Lipschitz bounds for dot-product
/// self-attention.
///
/// Exit codes: 0 success, 1 I/O failure, 2 invalid input, 3 instance too
/// large for the exact oracle (bounds still reported), 4 training diverged.
#[derive(Parser)]
#[command(name = "attn-lipcert", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Certify one attention block at a concrete input sequence
    Certify(commands::CertifyArgs),
    /// Audit the softmax-Jacobian interlacing chain on random simplex points
    SimplexCheck(commands::SimplexArgs),
    /// Compare every bound against the exact norm over random instances
    BoundsSweep(commands::SweepArgs),
    /// Train the toy attention classifier, optionally regularized
    TrainDemo(commands::TrainArgs),
}

fn main() {
    let cli = Cli::parse();
    if let Err(e) = apply_thread_cap() {
        eprintln!("error: {}", e.message);
        std::process::exit(e.code);
    }
    let result = match &cli.command {
        Command::Certify(args) => commands::run_certify(args),
        Command::SimplexCheck(args) => commands::run_simplex_check(args),
        Command::BoundsSweep(args) => commands::run_bounds_sweep_cmd(args),
        Command::TrainDemo(args) => commands::run_train_demo(args),
    };
    match result {
        Ok(code) => std::process::exit(code),
        Err(e) => {
            eprintln!("error: {}", e.message);
            std::process::exit(e.code);
        }
    }
}

/// `ATTN_LIPCERT_THREADS` caps the worker pool; unset means the rayon
/// default, and sequential builds ignore it.
fn apply_thread_cap() -> Result<(), commands::CliError> {
    let Ok(raw) = std::env::var("ATTN_LIPCERT_THREADS") else {
        return Ok(());
    };
    let threads: usize = raw.parse().map_err(|_| commands::CliError {
        code: 2,
        message: format!("ATTN_LIPCERT_THREADS must be a positive integer, got {raw:?}"),
    })?;
    if threads == 0 {
        return Err(commands::CliError {
            code: 2,
            message: "ATTN_LIPCERT_THREADS must be at least 1".to_string(),
        });
    }
    attn_lipcert::configure_threads(threads).map_err(|e| commands::CliError {
        code: 2,
        message: format!("cannot configure thread pool: {e}"),
    })
}
