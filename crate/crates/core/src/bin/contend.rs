//! Command-line front end for the tuning and measurement pipeline.
//!
//! Exit codes: 0 success, 2 configuration problem, 3 environment or hardware
//! problem, 4 completed with non-converged measurements.

use std::path::{Path, PathBuf};
use std::process::exit;
use std::str::FromStr;

use clap::{Parser, Subcommand};
use contend::campaign::{
    run_benchmarks, run_environment_selection, run_full_campaign, run_strategy_comparison,
    CampaignConfig, CampaignReport,
};
use contend::harness::{BackendKind, PlatformDescriptor, SlowdownMetric};
use contend::kernels::ResourceKind;
use contend::search::{tune_enemy, Budget, Strategy, TuneOptions};
use contend::Error;

#[derive(Parser)]
#[command(
    name = "contend",
    version,
    about = "Tune hostile multi-core environments and measure interference"
)]
struct Cli {
    /// Platform descriptor file. Overrides the one named in --config.
    #[arg(long, global = true)]
    platform: Option<PathBuf>,
    /// Override the platform's execution backend.
    #[arg(long, global = true, value_parser = BackendKind::from_str)]
    backend: Option<BackendKind>,
    /// Base seed for all randomized work.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Search budget, e.g. "90s", "2h" or "500evals".
    #[arg(long, global = true, value_parser = Budget::from_str)]
    budget: Option<Budget>,
    /// Directory for results, checkpoints and reports.
    #[arg(long, global = true, default_value = "out")]
    out: PathBuf,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Tune one enemy kernel against its matched victim.
    Tune {
        /// Resource to tune: cache, bus or memory.
        #[arg(long, value_parser = ResourceKind::from_str)]
        resource: ResourceKind,
        /// Search strategy: ran, sa or bo.
        #[arg(long, default_value = "bo", value_parser = Strategy::from_str)]
        strategy: Strategy,
        /// Slowdown metric: median, max or q<fraction>.
        #[arg(long, default_value = "q0.9", value_parser = SlowdownMetric::from_str)]
        metric: SlowdownMetric,
        /// Victim passes per measurement.
        #[arg(long, default_value_t = 1)]
        work_units: u64,
    },
    /// Compare search strategies on every resource of a campaign config.
    CompareStrategies {
        /// Campaign configuration file.
        #[arg(long)]
        config: PathBuf,
    },
    /// Rank every candidate environment per resource.
    RankEnv {
        #[arg(long)]
        config: PathBuf,
    },
    /// Pick the Pareto-optimal environment across the per-resource rankings.
    SelectEnv {
        #[arg(long)]
        config: PathBuf,
    },
    /// Benchmark the configured commands inside the selected environment.
    Bench {
        #[arg(long)]
        config: PathBuf,
    },
    /// Re-emit the report files for a completed campaign.
    Report {
        #[arg(long)]
        config: PathBuf,
    },
    /// Campaign operations.
    Campaign {
        #[command(subcommand)]
        action: CampaignAction,
    },
}

#[derive(Subcommand)]
enum CampaignAction {
    /// Run all phases: comparison, tuning, selection, benchmarks, report.
    Run {
        #[arg(long)]
        config: PathBuf,
    },
}

/// Load the campaign config and platform with command-line overrides applied.
fn load_campaign(cli: &Cli, path: &Path) -> contend::Result<(CampaignConfig, PlatformDescriptor)> {
    let mut config = CampaignConfig::load(path)?;
    if let Some(platform) = &cli.platform {
        config.platform = platform.clone();
    }
    if let Some(seed) = cli.seed {
        config.seed = seed;
    }
    if let Some(budget) = cli.budget {
        config.comparison_budget = budget;
    }
    let mut platform = config.load_platform()?;
    if let Some(backend) = cli.backend {
        platform.backend = backend;
    }
    Ok((config, platform))
}

fn load_platform(cli: &Cli) -> contend::Result<PlatformDescriptor> {
    let path = cli
        .platform
        .as_ref()
        .ok_or_else(|| Error::Config("this command needs --platform <file>".into()))?;
    let mut platform = PlatformDescriptor::load(path)?;
    if let Some(backend) = cli.backend {
        platform.backend = backend;
    }
    Ok(platform)
}

fn run_tune(
    cli: &Cli,
    resource: ResourceKind,
    strategy: Strategy,
    metric: SlowdownMetric,
    work_units: u64,
) -> contend::Result<i32> {
    let platform = load_platform(cli)?;
    let seed = cli.seed.unwrap_or(0);
    let budget = cli.budget.unwrap_or(Budget::Evals(100));
    let mut opts = TuneOptions::new(resource, strategy, budget, seed);
    opts.metric = metric;
    opts.work_units = work_units;
    opts.out = Some(cli.out.clone());
    let mut backend = contend::backends::backend_for(&platform, cli.seed)?;
    let result = tune_enemy(&opts, &platform, backend.as_mut())?;
    println!(
        "{resource} {} best slowdown {:.4} after {} evaluations",
        strategy.tag(),
        result.best_value,
        result.history.len()
    );
    let params = serde_json::to_string(&result.best_params)
        .map_err(|e| Error::InvalidInput(format!("unprintable parameters: {e}")))?;
    println!("params: {params}");
    let path = contend::search::default_results_path(
        &cli.out,
        &platform.name,
        resource,
        strategy,
        seed,
    );
    println!("saved: {}", path.display());
    Ok(0)
}

fn run(cli: &Cli) -> contend::Result<i32> {
    match &cli.command {
        Command::Tune { resource, strategy, metric, work_units } => {
            run_tune(cli, *resource, *strategy, *metric, *work_units)
        }
        Command::CompareStrategies { config } => {
            let (config, platform) = load_campaign(cli, config)?;
            let outcomes = run_strategy_comparison(&config, &platform, &cli.out)?;
            for (resource, outcome) in &outcomes {
                println!("{resource}: {} (winner {})", outcome.verdict.render(), outcome.winner.tag());
                for (i, p) in outcome.verdict.p_values.iter().enumerate() {
                    println!(
                        "  p({}, {}) = {:.4}",
                        outcome.verdict.ordering[i],
                        outcome.verdict.ordering[i + 1],
                        p
                    );
                }
            }
            Ok(0)
        }
        Command::RankEnv { config } => {
            let (config, platform) = load_campaign(cli, config)?;
            let phase = run_environment_selection(&config, &platform, &cli.out)?;
            for ranking in &phase.rankings {
                println!("{} ranking:", ranking.resource);
                for (i, entry) in ranking.entries.iter().enumerate() {
                    println!("  {:>3}. {}  {:.4}", i + 1, entry.environment.label, entry.score);
                }
            }
            for (resource, path) in &phase.ranking_files {
                println!("saved: {} ({resource})", cli.out.join(path).display());
            }
            Ok(0)
        }
        Command::SelectEnv { config } => {
            let (config, platform) = load_campaign(cli, config)?;
            let phase = run_environment_selection(&config, &platform, &cli.out)?;
            println!("selected environment: {}", phase.selected.label);
            for (core, resource) in &phase.selected.assignment {
                println!("  core {core}: {resource} enemy");
            }
            for (resource, rank) in &phase.selected.per_resource_ranks {
                println!("  rank in {resource} table: {rank}");
            }
            Ok(0)
        }
        Command::Bench { config } => {
            let (config, platform) = load_campaign(cli, config)?;
            let rows = run_benchmarks(&config, &platform, &cli.out)?;
            let mut warn = false;
            for row in &rows {
                println!(
                    "{}: slowdown {:.4} ({} ns -> {} ns){}{}",
                    row.alias,
                    row.slowdown,
                    row.isolated_ns,
                    row.contended_ns,
                    if row.significant { ", significant" } else { "" },
                    if row.converged { "" } else { ", NOT CONVERGED" },
                );
                warn |= !row.converged;
            }
            Ok(if warn { 4 } else { 0 })
        }
        Command::Report { config } => {
            let (config, platform) = load_campaign(cli, config)?;
            let report = run_full_campaign(&config, &platform, &cli.out)?;
            contend::campaign::emit_report(&report, &cli.out)?;
            print_summary(&report, &cli.out);
            Ok(if report.has_nonconverged_runs() { 4 } else { 0 })
        }
        Command::Campaign { action } => {
            let CampaignAction::Run { config } = action;
            let (config, platform) = load_campaign(cli, config)?;
            let report = run_full_campaign(&config, &platform, &cli.out)?;
            print_summary(&report, &cli.out);
            Ok(if report.has_nonconverged_runs() { 4 } else { 0 })
        }
    }
}

fn print_summary(report: &CampaignReport, out: &Path) {
    println!("platform: {} ({} backend)", report.platform, report.backend);
    for (resource, outcome) in &report.comparisons {
        println!("{resource}: {} (winner {})", outcome.verdict.render(), outcome.winner.tag());
    }
    for (resource, outcome) in &report.tuning {
        println!("{resource} tuned slowdown: {:.4} ({})", outcome.best_slowdown, outcome.strategy.tag());
    }
    println!("selected environment: {}", report.selected.label);
    for row in &report.benchmarks {
        println!(
            "{}: slowdown {:.4}{}{}",
            row.alias,
            row.slowdown,
            if row.significant { ", significant" } else { "" },
            if row.converged { "" } else { ", NOT CONVERGED" },
        );
    }
    println!("geometric mean slowdown: {:.4}", report.score);
    println!("report: {}", out.join("report").join("report.json").display());
}

fn main() {
    env_logger::init();
    let cli = Cli::parse();
    match run(&cli) {
        Ok(code) => exit(code),
        Err(e) => {
            eprintln!("contend: {e}");
            exit(e.exit_code());
        }
    }
}
