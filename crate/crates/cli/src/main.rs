use std::process::ExitCode;

use clap::Parser;
use frm_cli::{run, Cli};

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("frmseg: {f}");
            ExitCode::from(f.exit_code())
        }
    }
}
