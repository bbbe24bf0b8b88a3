use std::process::ExitCode;

use clap::Parser;
use confood_cli::{run, Cli};

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli, std::env::vars()) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("confood: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}
