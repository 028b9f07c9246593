use clap::Parser;
use ehdl_cli::{run, Cli};
use std::io::Write;
use std::process::ExitCode;

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(&cli) {
        Ok(out) => {
            let _ = std::io::stdout().write_all(out.as_bytes());
            ExitCode::SUCCESS
        }
        Err(e) => {
            if let ehdl_cli::CliError::DidNotFinish { summary, .. } = &e {
                let _ = std::io::stdout().write_all(summary.as_bytes());
            }
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}
