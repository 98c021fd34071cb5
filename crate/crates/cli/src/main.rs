//! `kubench`: KU coverage analysis, gap reporting, task synthesis and
//! re-evaluation of code-generation benchmarks.

mod args;
mod commands;
mod config;
mod run;

use std::process::ExitCode;

use crate::run::CliError;

fn main() -> ExitCode {
    let argv: Vec<String> = std::env::args().collect();
    let cli = match config::parse_with_config(&argv) {
        Ok(cli) => cli,
        Err(config::ParseFailure::Clap(e)) => {
            // Help and version requests exit 0; everything else is a usage error.
            let code = if e.use_stderr() { 2 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
        Err(config::ParseFailure::Config(msg)) => {
            eprintln!("error: {msg}");
            return ExitCode::from(2);
        }
    };
    run::init_logging(cli.global.verbose);
    match commands::dispatch(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(CliError::Usage(msg)) => {
            eprintln!("error: {msg}");
            eprintln!("See `kubench {} --help`.", cli.command.name());
            ExitCode::from(2)
        }
        Err(CliError::Domain(e)) => {
            eprintln!("error: {e:#}");
            ExitCode::from(1)
        }
    }
}

#[cfg(test)]
mod tests {
    use clap::Parser;

    use crate::args::Cli;

    #[test]
    fn help_parses() {
        assert!(Cli::try_parse_from(["kubench", "--help"]).is_err());
        let cli = Cli::try_parse_from(["kubench", "coverage", "--dataset", "a.jsonl"]).unwrap();
        assert_eq!(cli.command.name(), "coverage");
    }
}
