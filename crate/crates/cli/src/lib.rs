//! Command-line front end: configuration handling and the `gen-data`,
//! `meta-train`, `eval` and `explain` commands.

pub mod cli;
pub mod commands;
pub mod config;
pub mod dot;
pub mod error;

pub use cli::{Cli, Command};
pub use config::RunConfig;
pub use error::CliError;

/// Runs one parsed invocation.
pub fn run(cli: &Cli) -> Result<(), CliError> {
    match &cli.command {
        Command::GenData(args) => commands::gen_data(&cli.global, args).map(|_| ()),
        Command::MetaTrain(args) => commands::train(&cli.global, args),
        Command::Eval(args) => commands::eval(&cli.global, args),
        Command::Explain(args) => commands::explain(&cli.global, args),
    }
}
