use std::process::ExitCode;

use clap::Parser;
use udm_cli::ErrorKind;

fn main() -> ExitCode {
    let cli = match udm_cli::Cli::try_parse() {
        Ok(cli) => cli,
        // help and version are reported through the error path too
        Err(e) if !e.use_stderr() => {
            let _ = e.print();
            return ExitCode::SUCCESS;
        }
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(ErrorKind::Usage.exit_code());
        }
    };
    match udm_cli::run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("udm: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}
