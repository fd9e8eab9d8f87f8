//! Stressor process. Allocates its working set, prints READY, then hammers
//! the configured resource until it receives SIGTERM or SIGINT, at which
//! point it exits cleanly.

use std::io::Write;
use std::process::exit;
use std::str::FromStr;
use std::sync::atomic::{AtomicBool, Ordering};

use clap::Parser;
use contend::kernels::{run_enemy, EnemyParams, ResourceKind};
use contend::Error;

#[derive(Parser)]
#[command(version, about = "Stress one shared resource until terminated")]
struct Args {
    /// Resource to stress: cache, bus or memory.
    #[arg(long, value_parser = ResourceKind::from_str)]
    resource: ResourceKind,
    /// Kernel parameters as a JSON object.
    #[arg(long)]
    params: String,
}

static STOP: AtomicBool = AtomicBool::new(false);

extern "C" fn request_stop(_: libc::c_int) {
    STOP.store(true, Ordering::Release);
}

fn parse_params(resource: ResourceKind, json: &str) -> contend::Result<EnemyParams> {
    let bad = |e: serde_json::Error| Error::Config(format!("bad {resource} parameters: {e}"));
    Ok(match resource {
        ResourceKind::Cache => EnemyParams::Cache(serde_json::from_str(json).map_err(bad)?),
        ResourceKind::Bus => EnemyParams::Bus(serde_json::from_str(json).map_err(bad)?),
        ResourceKind::Memory => EnemyParams::Memory(serde_json::from_str(json).map_err(bad)?),
    })
}

fn run(args: &Args) -> contend::Result<()> {
    let params = parse_params(args.resource, &args.params)?;
    unsafe {
        libc::signal(libc::SIGTERM, request_stop as *const () as libc::sighandler_t);
        libc::signal(libc::SIGINT, request_stop as *const () as libc::sighandler_t);
    }
    run_enemy(&params, &STOP, || {
        println!("READY");
        let _ = std::io::stdout().flush();
    })
}

fn main() {
    env_logger::init();
    let args = Args::parse();
    if let Err(e) = run(&args) {
        eprintln!("enemy: {e}");
        exit(e.exit_code());
    }
}
