use std::process::ExitCode;

use bonik_bench::{run, Args};
use clap::Parser;

fn main() -> ExitCode {
    let args = Args::parse();
    match run(&args, &mut std::io::stdout(), &mut std::io::stderr()) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::from(2),
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}
