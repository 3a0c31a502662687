use std::process::ExitCode;

use clap::Parser;
use segplay::cli::{self, Cli};

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) if !e.use_stderr() => {
            // --help and --version
            let _ = e.print();
            return ExitCode::SUCCESS;
        }
        Err(e) => {
            eprintln!("{}", cli::error_json("usage", e.render().to_string().trim()));
            return ExitCode::from(2);
        }
    };
    match cli::run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("{}", cli::error_json(e.kind(), &e.to_string()));
            ExitCode::FAILURE
        }
    }
}
