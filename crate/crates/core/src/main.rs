use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use tvp_sird::run::{execute, Command, ModelKind, Overrides};

#[derive(Parser)]
#[command(
    name = "tvp-sird",
    version,
    about = "Score-driven SIRD models: simulate, fit, forecast, backtest"
)]
struct Cli {
    #[command(subcommand)]
    command: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Simulate a synthetic dataset from the `simulate` section.
    Simulate(Flags),
    /// Fit a model and write params.csv, posterior.csv, summary.json.
    Fit(Flags),
    /// Fit, then write forecast.csv.
    Forecast(Flags),
    /// Recursive forecasts over a directory of vintages.
    Backtest(Flags),
    /// RMSFE table and Diebold-Mariano tests of a forecast panel.
    Evaluate(Flags),
}

#[derive(Args)]
struct Flags {
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long, value_parser = ["fp", "tvp", "tvp-beta", "mf", "factor"])]
    model: Option<String>,
    #[arg(long)]
    out: Option<PathBuf>,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let (command, flags) = match cli.command {
        Cmd::Simulate(f) => (Command::Simulate, f),
        Cmd::Fit(f) => (Command::Fit, f),
        Cmd::Forecast(f) => (Command::Forecast, f),
        Cmd::Backtest(f) => (Command::Backtest, f),
        Cmd::Evaluate(f) => (Command::Evaluate, f),
    };
    let overrides = Overrides {
        seed: flags.seed,
        model: flags
            .model
            .map(|m| m.parse::<ModelKind>().expect("restricted by clap")),
        out: flags.out,
    };
    ExitCode::from(execute(command, flags.config.as_deref(), &overrides) as u8)
}
