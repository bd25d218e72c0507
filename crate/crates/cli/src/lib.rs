//! Command-line driver: argument parsing, subcommands and exit codes.

pub mod args;
pub mod commands;
pub mod error;

use args::{Cli, Command};
use error::CliError;

/// Runs one parsed invocation, printing a short summary to stdout.
pub fn run(cli: &Cli) -> Result<(), CliError> {
    match &cli.command {
        Command::Generate(a) => {
            let run = commands::generate(a)?;
            println!(
                "generated {} scenes in {}",
                run.outputs.len() - 1,
                run.config.output.display()
            );
        }
        Command::Train(a) => {
            let run = commands::train(a)?;
            println!("checkpoint written to {}", run.config.output.display());
        }
        Command::Decode(a) => {
            let run = commands::decode(a)?;
            println!(
                "decoded {} scenes into {}",
                run.outputs.len() - 1,
                run.config.output.display()
            );
        }
        Command::Evaluate(a) => {
            let report = commands::evaluate(a)?;
            print!("{}", report.to_text());
        }
        Command::GradStudy(a) => {
            let report = commands::grad_study(a)?;
            for (strategy, partition, slope) in &report.slopes {
                println!("{:<16} {partition:<9} slope {slope:+.3}", strategy.to_string());
            }
            println!(
                "fork bound held on {}/{} probed examples",
                report.bound_checks - report.bound_violations,
                report.bound_checks
            );
        }
        Command::ShowConfig(common) => {
            let config = commands::resolve(common)?;
            config.validate()?;
            print!("{}", config.to_toml()?);
        }
    }
    Ok(())
}
