use std::process::ExitCode;

use partrep::runner::{parse_cli, run_experiment, CliError};

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let config = match parse_cli(std::env::args_os()) {
        Ok(c) => c,
        Err(CliError::Help(text)) => {
            print!("{text}");
            return ExitCode::SUCCESS;
        }
        Err(CliError::Usage(text)) => {
            eprintln!("{text}");
            return ExitCode::from(1);
        }
    };
    match config.to_json() {
        Ok(json) => println!("{json}"),
        Err(e) => {
            eprintln!("{e}");
            return ExitCode::from(2);
        }
    }
    match run_experiment(&config) {
        Ok(record) => {
            log::info!("run {} finished in {}", record.run_id, record.run_dir.display());
            for (k, v) in &record.metrics {
                println!("{k}\t{v}");
            }
            ExitCode::SUCCESS
        }
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(2)
        }
    }
}
