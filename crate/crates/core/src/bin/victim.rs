//! Victim process. Runs one resource-bound kernel to completion and prints
//! the elapsed wall-clock nanoseconds as a decimal integer. Any startup
//! problem exits nonzero before a number is printed.

use std::process::exit;
use std::str::FromStr;

use clap::Parser;
use contend::kernels::{run_victim, ResourceKind, VictimConfig};
use contend::Error;

#[derive(Parser)]
#[command(version, about = "Time one victim kernel and print nanoseconds")]
struct Args {
    /// Resource the kernel is bound on: cache, bus or memory.
    #[arg(long, value_parser = ResourceKind::from_str)]
    resource: ResourceKind,
    /// Victim configuration as a JSON object.
    #[arg(long)]
    config: String,
}

fn run(args: &Args) -> contend::Result<u64> {
    let config: VictimConfig = serde_json::from_str(&args.config)
        .map_err(|e| Error::Config(format!("bad victim configuration: {e}")))?;
    if config.resource != args.resource {
        return Err(Error::Config(format!(
            "--resource {} does not match the configuration's {}",
            args.resource, config.resource
        )));
    }
    run_victim(&config)
}

fn main() {
    env_logger::init();
    let args = Args::parse();
    match run(&args) {
        Ok(ns) => println!("{ns}"),
        Err(e) => {
            eprintln!("victim: {e}");
            exit(e.exit_code());
        }
    }
}
