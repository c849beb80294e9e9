use std::process::ExitCode;

use clap::Parser;

fn main() -> ExitCode {
    let cli = cyclevqa::cli::Cli::parse();
    match cyclevqa::cli::run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}
