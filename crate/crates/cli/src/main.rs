use std::process::ExitCode;

use automlm_cli::{error_line, run, Cli, Failure};
use clap::error::ErrorKind;
use clap::Parser;

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) if matches!(e.kind(), ErrorKind::DisplayHelp | ErrorKind::DisplayVersion) => {
            let _ = e.print();
            return ExitCode::SUCCESS;
        }
        Err(e) => {
            let message = e.to_string().lines().next().unwrap_or_default().trim_start_matches("error: ").to_string();
            eprintln!("{}", error_line(&Failure::usage(message).into()));
            return ExitCode::from(2);
        }
    };
    let env_seed = std::env::var(automlm_cli::config::SEED_ENV).ok();
    let mut stdout = std::io::stdout().lock();
    match run(cli, env_seed.as_deref(), &mut stdout) {
        Ok(()) => ExitCode::SUCCESS,
        Err(err) => {
            eprintln!("{}", error_line(&err));
            ExitCode::FAILURE
        }
    }
}
