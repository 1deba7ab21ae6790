mod args;
mod commands;
mod config;
mod error;
mod output;
mod sweep;

use clap::Parser;

use args::{Cli, Command};
use commands::Globals;
use error::{CliError, Result};

fn run(cli: Cli) -> Result<()> {
    if let Some(n) = cli.threads {
        if n == 0 {
            return Err(CliError::invalid("threads: must be at least 1"));
        }
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .map_err(|e| CliError::invalid(format!("threads: {e}")))?;
    }
    let globals = Globals {
        seed: cli.seed,
        format: cli.format,
        output_dir: cli.output_dir,
    };
    match &cli.command {
        Command::Simulate(a) => commands::simulate(a, &globals),
        Command::Detect(a) => commands::detect_cmd(a, &globals),
        Command::Split(a) => commands::split_cmd(a, &globals),
        Command::Calibrate(a) => commands::calibrate_cmd(a, &globals),
        Command::Correlate(a) => commands::correlate_cmd(a, &globals),
        Command::Predict(a) => commands::predict_cmd(a, &globals),
        Command::Sweep(a) => sweep::sweep_cmd(a, &globals),
    }
}

fn main() {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    if let Err(e) = run(Cli::parse()) {
        eprintln!("error: {e}");
        std::process::exit(e.exit_code());
    }
}
