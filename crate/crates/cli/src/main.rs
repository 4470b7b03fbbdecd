use std::process::ExitCode;

use clap::Parser;
use ionfiber_cli::{run, Cli};

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(&cli) {
        Ok(outcome) => {
            if outcome.stdout.is_empty() {
                println!("{}", serde_json::to_string_pretty(&outcome.summary).expect("JSON values always serialize"));
            } else {
                print!("{}", outcome.stdout);
            }
            for f in &outcome.files {
                eprintln!("wrote {}", f.display());
            }
            ExitCode::SUCCESS
        }
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}
