//! `coherit` command-line driver.

mod commands;
mod config;
mod error;
mod manifest;

use clap::{Parser, Subcommand};

use config::CommonArgs;
use error::{CliError, CliResult};
use manifest::Outputs;

#[derive(Debug, Parser)]
#[command(
    name = "coherit",
    version,
    about = "Heritability and coheritability estimation for nuclear-family cohorts"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Simulate cohorts and write them as CSV with the generating parameters.
    Simulate(CommonArgs),
    /// Fit a cohort and write the estimate JSON.
    Fit(CommonArgs),
    /// Fit a cohort and compute parametric bootstrap intervals.
    Bootstrap(CommonArgs),
    /// Bootstrap interval coverage over simulated cohorts.
    Coverage(CommonArgs),
    /// RMSE change under misreported relationships.
    Sensitivity(CommonArgs),
    /// Simulation summary tables across cohort sizes and fit modes.
    Report(CommonArgs),
    /// Fit a missingness model and assign inverse-probability family weights.
    Weights(CommonArgs),
}

impl Command {
    fn parts(&self) -> (&'static str, &CommonArgs) {
        match self {
            Command::Simulate(a) => ("simulate", a),
            Command::Fit(a) => ("fit", a),
            Command::Bootstrap(a) => ("bootstrap", a),
            Command::Coverage(a) => ("coverage", a),
            Command::Sensitivity(a) => ("sensitivity", a),
            Command::Report(a) => ("report", a),
            Command::Weights(a) => ("weights", a),
        }
    }
}

fn run(cli: &Cli) -> CliResult<()> {
    let (name, args) = cli.command.parts();
    let cfg = args.resolve()?;
    if let Some(n) = args.threads {
        rayon::ThreadPoolBuilder::new()
            .num_threads(n.max(1))
            .build_global()
            .map_err(|e| CliError::Config(format!("thread pool: {e}")))?;
    }
    let mut out = Outputs::new(&args.out)?;
    let result = match name {
        "simulate" => commands::simulate(&cfg, &mut out),
        "fit" => commands::fit_cmd(&cfg, &mut out),
        "bootstrap" => commands::bootstrap(&cfg, &mut out),
        "coverage" => commands::coverage(&cfg, &mut out),
        "sensitivity" => commands::sensitivity_cmd(&cfg, &mut out),
        "report" => commands::report(&cfg, &mut out),
        _ => commands::weights(&cfg, &mut out),
    };
    out.finish(name, &cfg)?;
    result
}

fn main() {
    env_logger::Builder::from_env(env_logger::Env::new().filter_or("COHERIT_LOG", "warn")).init();
    let cli = Cli::parse();
    if let Err(e) = run(&cli) {
        eprintln!("{}", e.to_json());
        std::process::exit(e.exit_code());
    }
}
