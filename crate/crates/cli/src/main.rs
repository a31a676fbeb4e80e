mod args;
mod commands;

use std::process::ExitCode;

use clap::error::ErrorKind;
use clap::Parser;

use args::{Cli, Command, SCHEMA_HELP};

fn configure_threads() -> Result<(), String> {
    let Ok(raw) = std::env::var("FAR_THREADS") else {
        return Ok(());
    };
    let n: usize = raw
        .trim()
        .parse()
        .ok()
        .filter(|n| *n > 0)
        .ok_or_else(|| format!("FAR_THREADS must be a positive integer, got '{raw}'"))?;
    rayon::ThreadPoolBuilder::new().num_threads(n).build_global().map_err(|e| e.to_string())
}

fn dispatch(command: Command) -> fdar::Result<()> {
    match command {
        Command::Estimate(a) => commands::estimate(a),
        Command::Forecast(a) => commands::forecast_cmd(a),
        Command::Analyze { what } => commands::analyze(what),
        Command::Backtest(a) => commands::backtest(a),
        Command::Simulate(a) => commands::simulate(a),
        Command::Sample(a) => commands::sample(a),
        Command::Run(a) => commands::run_pipeline(&a.config),
    }
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
            eprintln!("\n{SCHEMA_HELP}");
            return ExitCode::from(1);
        }
    };
    if let Err(msg) = configure_threads() {
        eprintln!("error: {msg}");
        return ExitCode::from(1);
    }
    match dispatch(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(if e.is_validation() { 1 } else { 2 })
        }
    }
}
