use std::process::ExitCode;

use clap::Parser;

fn main() -> ExitCode {
    pgcert_cli::execute(&pgcert_cli::Cli::parse())
}
