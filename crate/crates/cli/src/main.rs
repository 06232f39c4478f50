use std::process::ExitCode;

use clap::Parser;
use mkv_lan_cli::{run, Cli};

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(&cli) {
        Ok(dir) => {
            eprintln!("wrote {}", dir.display());
            ExitCode::SUCCESS
        }
        Err(e) => {
            eprintln!("mkv-lan: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
