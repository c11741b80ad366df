use clap::Parser;
use eyas_cli::{format_error, run, Cli, CliError};

fn main() {
    let json_errors = std::env::args().any(|a| a == "--json-errors");
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) if !e.use_stderr() => e.exit(),
        Err(e) if json_errors => {
            eprintln!("{}", format_error(&CliError::Usage(e.kind().to_string()), true));
            std::process::exit(2);
        }
        Err(e) => e.exit(),
    };
    if let Err(e) = run(cli) {
        eprintln!("{}", format_error(&e, json_errors));
        std::process::exit(e.exit_code());
    }
}
