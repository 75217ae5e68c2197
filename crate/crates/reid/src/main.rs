use std::process::ExitCode;

use clap::Parser;
use plr_reid::cli::{run, Cli};

fn main() -> ExitCode {
    // clap exits with 2 on malformed arguments
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("{e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
