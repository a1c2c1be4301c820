use std::process::ExitCode;

use clap::error::ErrorKind;
use clap::Parser;
use hymesh::commands::{run, Cli};
use hymesh::CliError;

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) if matches!(e.kind(), ErrorKind::DisplayHelp | ErrorKind::DisplayVersion) => {
            print!("{e}");
            return ExitCode::SUCCESS;
        }
        Err(e) => return fail(CliError::Usage(e.to_string())),
    };
    match run(cli.command) {
        Ok(text) => {
            println!("{text}");
            ExitCode::SUCCESS
        }
        Err(e) => fail(e),
    }
}

fn fail(e: CliError) -> ExitCode {
    if let CliError::Check { output, .. } = &e {
        println!("{output}");
    }
    eprintln!("{}", e.to_json());
    ExitCode::from(e.exit_code() as u8)
}
