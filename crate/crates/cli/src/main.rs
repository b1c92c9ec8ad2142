use std::process::ExitCode;

use clap::error::ErrorKind;
use clap::Parser;

use seqseg_cli::{run, Cli, CliError};

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) if matches!(e.kind(), ErrorKind::DisplayHelp | ErrorKind::DisplayVersion) => e.exit(),
        Err(e) => {
            let message = e.render().to_string();
            let first = message.lines().next().unwrap_or("").trim_start_matches("error: ");
            eprintln!("{}", CliError::config(first).to_json());
            return ExitCode::from(2);
        }
    };
    if let Some(n) = std::env::var("SEQSEG_NUM_THREADS").ok().and_then(|v| v.parse::<usize>().ok()) {
        seqseg::parallel::init_thread_pool(n);
    }
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("{}", e.to_json());
            ExitCode::from(e.code as u8)
        }
    }
}
