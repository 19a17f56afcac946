use std::process::ExitCode;

use clap::Parser;
use ebsg::cli::Cli;
use ebsg::commands::{env_seed, execute};

fn main() -> ExitCode {
    let argv: Vec<String> = std::env::args().skip(1).collect();
    let cli = Cli::parse();
    let result = env_seed().and_then(|seed| execute(cli, &argv, seed));
    match result {
        Ok(_) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
