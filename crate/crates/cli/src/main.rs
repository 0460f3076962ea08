use std::process::ExitCode;

use clap::Parser;
use egoprompt_cli::{configure_threads, exit_code, run, Cli};

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = configure_threads().and_then(|_| run(cli));
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e) as u8)
        }
    }
}
