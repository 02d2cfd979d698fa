use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use couplab::cli::{exit_code, list_suites, run, summary, usage_error, ExperimentConfig};

#[derive(Parser)]
#[command(name = "couplab", version, about = "Coupling and Harnack-inequality check runner")]
struct Args {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run the suite named in a `key = value` config.
    Run {
        #[arg(long)]
        config: PathBuf,
    },
    /// Print every check with its suite and target display.
    ListSuites,
}

fn main() -> ExitCode {
    let args = Args::parse();
    match args.command {
        Command::ListSuites => {
            print!("{}", list_suites());
            ExitCode::SUCCESS
        }
        Command::Run { config } => {
            let cfg = match ExperimentConfig::load(&config) {
                Ok(c) => c,
                Err(e) => {
                    eprintln!("usage error: {e}");
                    return ExitCode::from(2);
                }
            };
            match run(&cfg) {
                Ok(m) => {
                    print!("{}", summary(&m));
                    ExitCode::from(exit_code(&m) as u8)
                }
                Err(e) => {
                    eprintln!("error: {e}");
                    ExitCode::from(if usage_error(&e) { 2 } else { 3 })
                }
            }
        }
    }
}
