use std::process::ExitCode;

use clap::Parser;
use dllm_cache_cli::{config::SEED_ENV, execute, Cli};

fn main() -> ExitCode {
    let cli = Cli::parse();
    let seed = std::env::var(SEED_ENV).ok();
    match execute(cli, seed.as_deref()) {
        Ok(text) => {
            print!("{text}");
            ExitCode::SUCCESS
        }
        Err(e) => {
            eprintln!("dcache: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}
