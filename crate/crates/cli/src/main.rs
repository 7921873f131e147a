use std::process::ExitCode;

use clap::Parser;
use log::warn;
use modref_cli::{run, Cli};

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    if let Ok(v) = std::env::var("MODREF_THREADS") {
        match v.parse::<usize>() {
            Ok(n) if n > 0 => {
                if let Err(e) = rayon::ThreadPoolBuilder::new()
                    .num_threads(n)
                    .build_global()
                {
                    warn!("could not size the thread pool: {e}");
                }
            }
            _ => warn!("ignoring MODREF_THREADS={v:?}; expected a positive integer"),
        }
    }
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("modref: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
