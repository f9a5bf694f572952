mod args;
mod commands;
mod error;
mod manifest;
mod plot;

use clap::Parser;

use crate::args::{Cli, Command};
use crate::error::CliError;

/// Honour `BRNLAB_THREADS` as a cap on the worker pool.
fn configure_threads() -> Result<(), CliError> {
    let Ok(raw) = std::env::var("BRNLAB_THREADS") else {
        return Ok(());
    };
    let n: usize = raw
        .trim()
        .parse()
        .ok()
        .filter(|&n| n > 0)
        .ok_or_else(|| CliError::Invalid(format!("BRNLAB_THREADS must be a positive integer, got `{raw}`")))?;
    rayon::ThreadPoolBuilder::new()
        .num_threads(n)
        .build_global()
        .map_err(|e| CliError::Runtime(e.to_string()))
}

fn run(cli: Cli) -> Result<(), CliError> {
    configure_threads()?;
    match cli.command {
        Command::Gen(a) => commands::gen(&a),
        Command::Train(a) => commands::train_cmd(&a),
        Command::Detect(a) => commands::detect(&a),
        Command::Eval(a) => commands::eval(&a),
        Command::DiagnoseVbp(a) => commands::diagnose_vbp(&a),
        Command::Plot(a) => commands::plot_cmd(&a),
    }
}

fn main() {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            std::process::exit(code);
        }
    };
    if let Err(e) = run(cli) {
        eprintln!("error: {e}");
        std::process::exit(e.exit_code());
    }
}
