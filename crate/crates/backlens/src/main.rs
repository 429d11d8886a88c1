use std::process::ExitCode;

use clap::Parser;

use backlens::cli::Cli;

fn main() -> ExitCode {
    let cli = Cli::parse();
    match backlens::commands::run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
