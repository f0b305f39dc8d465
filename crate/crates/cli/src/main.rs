use std::process::ExitCode;

use clap::Parser;
use racetrace_cli::{run, Cli};

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("racetrace: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}
