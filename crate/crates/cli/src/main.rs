use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use nsdde::stability::StepVariant;

mod commands;
mod config;
mod error;
mod output;

use commands::Overrides;
use config::ExperimentConfig;
use error::CliError;

#[derive(Parser)]
#[command(
    name = "nsdde",
    version,
    about = "Stability certificates and Euler-Maruyama Monte Carlo for switched neutral delay SDEs"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Check the certificate, solve for the decay rate and the step-size bound.
    Analyze(Common),
    /// Write one CSV per simulated path.
    Simulate(Common),
    /// Estimate E|Y_n|^2 and fit its decay rate.
    Estimate(Common),
    /// Regenerate the worked example's moment and log-rate series.
    ReproduceExample(Common),
}

#[derive(Args)]
struct Common {
    /// JSON experiment config.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Output directory, overriding `output.directory`.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Seed, overriding the configured one.
    #[arg(long)]
    seed: Option<u64>,
    /// Worker threads for Monte Carlo runs.
    #[arg(long)]
    threads: Option<usize>,
    /// Step-size variant to recommend.
    #[arg(long, value_enum)]
    variant: Option<VariantArg>,
}

#[derive(Clone, Copy, ValueEnum)]
enum VariantArg {
    Verbatim,
    Conservative,
}

impl Common {
    fn overrides(&self) -> Overrides {
        Overrides {
            out: self.out.clone(),
            seed: self.seed,
            threads: self.threads,
            variant: self.variant.map(|v| match v {
                VariantArg::Verbatim => StepVariant::Verbatim,
                VariantArg::Conservative => StepVariant::Conservative,
            }),
        }
    }

    fn load(&self) -> Result<ExperimentConfig, CliError> {
        let path = self
            .config
            .as_ref()
            .ok_or_else(|| CliError::Config("--config is required for this command".into()))?;
        ExperimentConfig::load(path)
    }
}

fn run(cli: Cli) -> Result<(), CliError> {
    match cli.command {
        Command::Analyze(c) => commands::analyze(&c.load()?, &c.overrides()).map(drop),
        Command::Simulate(c) => commands::simulate(&c.load()?, &c.overrides()).map(drop),
        Command::Estimate(c) => commands::estimate(&c.load()?, &c.overrides()).map(drop),
        Command::ReproduceExample(c) => {
            let dir = c.out.clone().unwrap_or_else(|| PathBuf::from("example"));
            commands::reproduce_example(&dir, &c.overrides())
        }
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}
