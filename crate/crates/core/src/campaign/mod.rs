//! The end-to-end workflow: compare search strategies per resource, tune each
//! enemy with the winning strategy for longer, rank the assembled
//! environments, benchmark the systems under test inside the selected one,
//! and emit a report.
//!
//! Each phase writes a checkpoint keyed by a hash of everything that feeds
//! it. Re-running a campaign skips phases whose inputs are unchanged, so a
//! run killed between phases resumes where it stopped, and editing the config
//! invalidates only the phases downstream of the edit.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::backends::{backend_for, Backend};
use crate::environment::{
    enumerate_environments, rank_environments, RankedEnvironments, SelectedEnvironment,
};
use crate::harness::{
    slowdown_runs, BackendKind, MeasurementRun, PlatformDescriptor, Program, SlowdownMetric,
};
use crate::kernels::{EnemyParams, ResourceKind};
use crate::search::{default_results_path, tune_enemy, Budget, Strategy, TuneOptions};
use crate::stats::{geometric_mean, intervals_disjoint, quantile_ci, ComparisonVerdict};
use crate::{Error, Result};

/// An external benchmark command, labelled with a short alias. The synthetic
/// backend resolves the alias against its profile; the real backend executes
/// the argv.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SutSpec {
    pub alias: String,
    pub argv: Vec<String>,
}

fn default_strategies() -> Vec<Strategy> {
    Strategy::ALL.to_vec()
}

fn default_resources() -> Vec<ResourceKind> {
    ResourceKind::ALL.to_vec()
}

fn default_repetitions() -> u64 {
    3
}

fn default_work_units() -> u64 {
    1
}

fn default_threshold() -> f64 {
    0.05
}

/// Everything a campaign needs beyond the platform descriptor it references.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CampaignConfig {
    /// Platform descriptor file; relative to the config file when loaded
    /// from disk.
    pub platform: PathBuf,
    #[serde(default)]
    pub metric: SlowdownMetric,
    /// Strategies entering the comparison phase.
    #[serde(default = "default_strategies")]
    pub strategies: Vec<Strategy>,
    /// Resources to tune and rank.
    #[serde(default = "default_resources")]
    pub resources: Vec<ResourceKind>,
    /// Budget for each comparison tuning run.
    pub comparison_budget: Budget,
    /// Budget for the one long tuning run per resource with the winning
    /// strategy.
    pub tune_budget: Budget,
    /// Seeded tuning runs per (resource, strategy) cell in the comparison.
    #[serde(default = "default_repetitions")]
    pub repetitions: u64,
    #[serde(default)]
    pub seed: u64,
    /// Victim passes per measurement.
    #[serde(default = "default_work_units")]
    pub work_units: u64,
    /// Commands to benchmark inside the selected environment.
    pub suts: Vec<SutSpec>,
    /// p-value below which adjacent strategies in a verdict are separated.
    #[serde(default = "default_threshold")]
    pub significance_threshold: f64,
}

impl CampaignConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut config: CampaignConfig =
            serde_json::from_str(&text).map_err(|e| Error::json(path, e))?;
        if let Some(dir) = path.parent() {
            if config.platform.is_relative() {
                config.platform = dir.join(&config.platform);
            }
        }
        config.validate()?;
        Ok(config)
    }

    pub fn validate(&self) -> Result<()> {
        self.comparison_budget.validate()?;
        self.tune_budget.validate()?;
        if self.strategies.is_empty() {
            return Err(Error::Config("campaign compares no strategies".into()));
        }
        for (i, s) in self.strategies.iter().enumerate() {
            if self.strategies[..i].contains(s) {
                return Err(Error::Config(format!("strategy {} listed twice", s.tag())));
            }
        }
        if self.resources.is_empty() {
            return Err(Error::Config("campaign covers no resources".into()));
        }
        for (i, r) in self.resources.iter().enumerate() {
            if self.resources[..i].contains(r) {
                return Err(Error::Config(format!("resource {r} listed twice")));
            }
        }
        if self.repetitions == 0 {
            return Err(Error::Config("repetitions must be positive".into()));
        }
        if self.work_units == 0 {
            return Err(Error::Config("work_units must be positive".into()));
        }
        if self.suts.is_empty() {
            return Err(Error::Config("campaign benchmarks no systems under test".into()));
        }
        for (i, sut) in self.suts.iter().enumerate() {
            if sut.alias.is_empty() {
                return Err(Error::Config("benchmark alias must not be empty".into()));
            }
            if self.suts[..i].iter().any(|s| s.alias == sut.alias) {
                return Err(Error::Config(format!("benchmark alias {} reused", sut.alias)));
            }
        }
        if !(self.significance_threshold > 0.0 && self.significance_threshold <= 1.0) {
            return Err(Error::Config(format!(
                "significance threshold {} outside (0, 1]",
                self.significance_threshold
            )));
        }
        Ok(())
    }

    pub fn load_platform(&self) -> Result<PlatformDescriptor> {
        PlatformDescriptor::load(&self.platform)
    }
}

/// Comparison outcome for one resource: verdict over all strategies plus the
/// tuning-run files each score came from.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ComparisonOutcome {
    pub verdict: ComparisonVerdict,
    pub winner: Strategy,
    /// Tuning-result files behind the verdict, relative to the output root.
    pub sources: Vec<PathBuf>,
}

/// Long-tune outcome for one resource.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TuneOutcome {
    pub strategy: Strategy,
    pub best_params: EnemyParams,
    pub best_slowdown: f64,
    /// Tuning-result file, relative to the output root.
    pub source: PathBuf,
}

/// Environment enumeration, ranking and selection results.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EnvironmentPhase {
    pub rankings: Vec<RankedEnvironments>,
    /// Ranking CSV per resource, relative to the output root.
    pub ranking_files: BTreeMap<ResourceKind, PathBuf>,
    pub selected: SelectedEnvironment,
}

/// One benchmark measured in isolation and inside the selected environment.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BenchRow {
    pub alias: String,
    pub slowdown: f64,
    pub isolated_ns: u64,
    pub contended_ns: u64,
    pub isolated_ci: [u64; 2],
    pub contended_ci: [u64; 2],
    /// True when the two confidence intervals do not overlap.
    pub significant: bool,
    /// False when either measurement hit the sample cap before its interval
    /// tightened.
    pub converged: bool,
    /// Persisted measurement runs, relative to the output root.
    pub isolated_run: PathBuf,
    pub contended_run: PathBuf,
}

/// The assembled campaign results. Every number in here traces back to a
/// persisted artifact via the relative paths carried alongside it.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CampaignReport {
    pub platform: String,
    pub backend: BackendKind,
    pub metric: SlowdownMetric,
    pub comparisons: BTreeMap<ResourceKind, ComparisonOutcome>,
    pub tuning: BTreeMap<ResourceKind, TuneOutcome>,
    pub rankings: Vec<RankedEnvironments>,
    pub ranking_files: BTreeMap<ResourceKind, PathBuf>,
    pub selected: SelectedEnvironment,
    pub benchmarks: Vec<BenchRow>,
    /// Geometric mean of the benchmark slowdowns.
    pub score: f64,
}

impl CampaignReport {
    pub fn save(&self, path: &Path) -> Result<()> {
        if let Some(parent) = path.parent() {
            fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
        }
        let text = serde_json::to_string_pretty(self).map_err(|e| Error::json(path, e))?;
        fs::write(path, text).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        serde_json::from_str(&text).map_err(|e| Error::json(path, e))
    }

    /// True when any underlying measurement failed to converge; callers
    /// surface this as a warning exit.
    pub fn has_nonconverged_runs(&self) -> bool {
        self.benchmarks.iter().any(|b| !b.converged)
    }
}

/// Backend supply for campaign work units. The real backend holds the host
/// lock, so it is created once and shared; the synthetic backend is rebuilt
/// per unit with a seed derived from the unit's identity, which makes every
/// unit's sample stream independent of execution order.
enum CampaignBackend {
    Real(Box<dyn Backend>),
    Synthetic { platform: PlatformDescriptor, slot: Option<Box<dyn Backend>> },
}

impl CampaignBackend {
    fn new(platform: &PlatformDescriptor) -> Result<Self> {
        match platform.backend {
            BackendKind::Real => Ok(CampaignBackend::Real(backend_for(platform, None)?)),
            BackendKind::Synthetic => {
                Ok(CampaignBackend::Synthetic { platform: platform.clone(), slot: None })
            }
        }
    }

    fn unit(&mut self, seed: u64) -> Result<&mut dyn Backend> {
        match self {
            CampaignBackend::Real(b) => Ok(b.as_mut()),
            CampaignBackend::Synthetic { platform, slot } => {
                *slot = Some(backend_for(platform, Some(seed))?);
                Ok(slot.as_mut().unwrap().as_mut())
            }
        }
    }
}

/// Seed for one work unit: the low bytes of a digest over the campaign seed
/// and the unit's identity string, so units never share sample streams and
/// renaming or reordering phases cannot silently reuse one.
fn derive_seed(base: u64, unit: &str) -> u64 {
    let mut hasher = Sha256::new();
    hasher.update(base.to_le_bytes());
    hasher.update(unit.as_bytes());
    let digest = hasher.finalize();
    u64::from_le_bytes(digest[..8].try_into().unwrap())
}

/// Hex digest over a serializable value plus raw byte blocks.
fn content_hash<T: Serialize>(value: &T, extra: &[&[u8]]) -> Result<String> {
    let mut hasher = Sha256::new();
    let bytes = serde_json::to_vec(value)
        .map_err(|e| Error::InvalidInput(format!("unhashable phase input: {e}")))?;
    hasher.update(&bytes);
    for block in extra {
        hasher.update(block);
    }
    let digest = hasher.finalize();
    let mut out = String::with_capacity(digest.len() * 2);
    for byte in digest {
        out.push_str(&format!("{byte:02x}"));
    }
    Ok(out)
}

#[derive(Serialize, Deserialize)]
struct Checkpoint<T> {
    input_hash: String,
    output: T,
}

/// Run one phase with caching. When `dir/checkpoint.json` exists and its
/// recorded input hash matches, the stored output is returned; otherwise the
/// phase runs and its output is written atomically.
fn run_phase<T>(dir: &Path, input_hash: &str, compute: impl FnOnce() -> Result<T>) -> Result<T>
where
    T: Serialize + DeserializeOwned,
{
    let path = dir.join("checkpoint.json");
    if path.exists() {
        let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
        match serde_json::from_str::<Checkpoint<T>>(&text) {
            Ok(cp) if cp.input_hash == input_hash => {
                log::info!("resuming from {}", path.display());
                return Ok(cp.output);
            }
            Ok(_) => log::info!("inputs changed, recomputing {}", path.display()),
            Err(e) => log::warn!("unreadable checkpoint {}: {e}", path.display()),
        }
    }
    let output = compute()?;
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let cp = Checkpoint { input_hash: input_hash.to_string(), output };
    let text = serde_json::to_string_pretty(&cp).map_err(|e| Error::json(&path, e))?;
    let tmp = dir.join("checkpoint.json.tmp");
    fs::write(&tmp, text).map_err(|e| Error::io(&tmp, e))?;
    fs::rename(&tmp, &path).map_err(|e| Error::io(&path, e))?;
    Ok(cp.output)
}

/// A path relative to the output root, for artifacts referenced in reports.
fn relative_to(path: &Path, root: &Path) -> PathBuf {
    path.strip_prefix(root).map(Path::to_path_buf).unwrap_or_else(|_| path.to_path_buf())
}

/// Inputs shared by every phase hash: the effective config and the raw bytes
/// of the platform descriptor and synthetic profile files.
struct Hasher {
    platform_bytes: Vec<u8>,
    profile_bytes: Vec<u8>,
}

impl Hasher {
    fn new(platform: &PlatformDescriptor) -> Result<Self> {
        let platform_bytes = serde_json::to_vec(platform)
            .map_err(|e| Error::InvalidInput(format!("unhashable platform: {e}")))?;
        let profile_bytes = match &platform.synthetic_profile {
            Some(path) => fs::read(path).map_err(|e| Error::io(path, e))?,
            None => Vec::new(),
        };
        Ok(Hasher { platform_bytes, profile_bytes })
    }

    fn phase_hash<T: Serialize>(&self, scope: &T, upstream: &str) -> Result<String> {
        content_hash(
            scope,
            &[&self.platform_bytes, &self.profile_bytes, upstream.as_bytes()],
        )
    }
}

fn comparison_scope(config: &CampaignConfig) -> impl Serialize + '_ {
    (
        &config.strategies,
        &config.resources,
        config.comparison_budget,
        config.repetitions,
        config.seed,
        config.metric,
        config.work_units,
        config.significance_threshold,
    )
}

/// The five phases with their checkpoint chaining. Each phase method returns
/// its input hash alongside the output so downstream hashes can incorporate
/// it, and transparently reuses a valid checkpoint.
struct Pipeline<'a> {
    config: &'a CampaignConfig,
    platform: &'a PlatformDescriptor,
    out: &'a Path,
    hasher: Hasher,
    backend: CampaignBackend,
}

impl<'a> Pipeline<'a> {
    fn new(
        config: &'a CampaignConfig,
        platform: &'a PlatformDescriptor,
        out: &'a Path,
    ) -> Result<Self> {
        config.validate()?;
        Ok(Pipeline {
            config,
            platform,
            out,
            hasher: Hasher::new(platform)?,
            backend: CampaignBackend::new(platform)?,
        })
    }

    fn dir(&self, phase: &str) -> PathBuf {
        self.out.join("campaign").join(phase)
    }

    fn comparison(&mut self) -> Result<(String, BTreeMap<ResourceKind, ComparisonOutcome>)> {
        let hash = self.hasher.phase_hash(&comparison_scope(self.config), "")?;
        let dir = self.dir("01-comparison");
        let backend = &mut self.backend;
        let (config, platform, out) = (self.config, self.platform, self.out);
        let outcome =
            run_phase(&dir, &hash, || compute_comparison(config, platform, out, backend))?;
        Ok((hash, outcome))
    }

    fn tuning(&mut self) -> Result<(String, BTreeMap<ResourceKind, TuneOutcome>)> {
        let (h1, comparisons) = self.comparison()?;
        let scope = (
            &comparisons,
            self.config.tune_budget,
            self.config.seed,
            self.config.metric,
            self.config.work_units,
        );
        let hash = self.hasher.phase_hash(&scope, &h1)?;
        let dir = self.dir("02-tuning");
        let backend = &mut self.backend;
        let (config, platform, out) = (self.config, self.platform, self.out);
        let outcome = run_phase(&dir, &hash, || {
            compute_long_tune(config, platform, out, &comparisons, backend)
        })?;
        Ok((hash, outcome))
    }

    fn environment(&mut self) -> Result<(String, EnvironmentPhase)> {
        let (h2, tuning) = self.tuning()?;
        let tuned = tuned_params(&tuning);
        let scope = (&tuned, &self.config.resources, self.config.seed);
        let hash = self.hasher.phase_hash(&scope, &h2)?;
        let dir = self.dir("03-environment");
        let backend = &mut self.backend;
        let (config, platform, out) = (self.config, self.platform, self.out);
        let outcome = run_phase(&dir, &hash, || {
            compute_environment(config, platform, out, &tuned, backend)
        })?;
        Ok((hash, outcome))
    }

    fn benchmarks(&mut self) -> Result<(String, Vec<BenchRow>)> {
        let (_, tuning) = self.tuning()?;
        let (h3, environment) = self.environment()?;
        let tuned = tuned_params(&tuning);
        let scope = (&environment.selected, &tuned, &self.config.suts, self.config.seed);
        let hash = self.hasher.phase_hash(&scope, &h3)?;
        let dir = self.dir("04-benchmarks");
        let backend = &mut self.backend;
        let (config, platform, out) = (self.config, self.platform, self.out);
        let outcome = run_phase(&dir, &hash, || {
            compute_benchmarks(config, platform, out, &tuned, &environment.selected, backend)
        })?;
        Ok((hash, outcome))
    }

    fn report(&mut self) -> Result<CampaignReport> {
        let (_, comparisons) = self.comparison()?;
        let (_, tuning) = self.tuning()?;
        let (_, environment) = self.environment()?;
        let (h4, benchmarks) = self.benchmarks()?;
        let scope = (&comparisons, &tuning, &environment, &benchmarks);
        let hash = self.hasher.phase_hash(&scope, &h4)?;
        let out = self.out;
        let platform = self.platform;
        let metric = self.config.metric;
        run_phase(&self.dir("05-report"), &hash, || {
            let slowdowns: Vec<f64> = benchmarks.iter().map(|b| b.slowdown).collect();
            let report = CampaignReport {
                platform: platform.name.clone(),
                backend: platform.backend,
                metric,
                comparisons,
                tuning,
                rankings: environment.rankings,
                ranking_files: environment.ranking_files,
                selected: environment.selected,
                benchmarks,
                score: geometric_mean(&slowdowns)?,
            };
            emit_report(&report, out)?;
            Ok(report)
        })
    }
}

fn tuned_params(
    tuning: &BTreeMap<ResourceKind, TuneOutcome>,
) -> BTreeMap<ResourceKind, EnemyParams> {
    tuning.iter().map(|(&r, t)| (r, t.best_params.clone())).collect()
}

/// Phase 1: run every strategy against every resource `repetitions` times at
/// the comparison budget and order them by the best slowdowns they reach.
pub fn run_strategy_comparison(
    config: &CampaignConfig,
    platform: &PlatformDescriptor,
    out: &Path,
) -> Result<BTreeMap<ResourceKind, ComparisonOutcome>> {
    Ok(Pipeline::new(config, platform, out)?.comparison()?.1)
}

/// Phases 1-3: comparison, long tune, then environment enumeration, ranking
/// and Pareto selection. Completed phases are reused.
pub fn run_environment_selection(
    config: &CampaignConfig,
    platform: &PlatformDescriptor,
    out: &Path,
) -> Result<EnvironmentPhase> {
    Ok(Pipeline::new(config, platform, out)?.environment()?.1)
}

/// Phases 1-4: everything up to and including benchmark measurement inside
/// the selected environment.
pub fn run_benchmarks(
    config: &CampaignConfig,
    platform: &PlatformDescriptor,
    out: &Path,
) -> Result<Vec<BenchRow>> {
    Ok(Pipeline::new(config, platform, out)?.benchmarks()?.1)
}

fn compute_comparison(
    config: &CampaignConfig,
    platform: &PlatformDescriptor,
    out: &Path,
    backend: &mut CampaignBackend,
) -> Result<BTreeMap<ResourceKind, ComparisonOutcome>> {
    let mut outcomes = BTreeMap::new();
    for &resource in &config.resources {
        let mut groups: Vec<(String, Vec<f64>)> = Vec::new();
        let mut sources = Vec::new();
        for &strategy in &config.strategies {
            let mut scores = Vec::new();
            for rep in 0..config.repetitions {
                let unit = format!("comparison/{resource}/{}/{rep}", strategy.tag());
                let seed = derive_seed(config.seed, &unit);
                let mut opts =
                    TuneOptions::new(resource, strategy, config.comparison_budget, seed);
                opts.metric = config.metric;
                opts.work_units = config.work_units;
                opts.out = Some(out.to_path_buf());
                let result = tune_enemy(&opts, platform, backend.unit(seed)?)?;
                scores.push(result.best_value);
                let path = default_results_path(out, &platform.name, resource, strategy, seed);
                sources.push(relative_to(&path, out));
            }
            groups.push((strategy.tag().to_string(), scores));
        }
        let verdict = ComparisonVerdict::from_scores(&groups, config.significance_threshold)?;
        let winner = Strategy::ALL
            .iter()
            .copied()
            .find(|s| s.tag() == verdict.winner())
            .ok_or_else(|| Error::InvalidInput(format!("unknown winner {}", verdict.winner())))?;
        outcomes.insert(resource, ComparisonOutcome { verdict, winner, sources });
    }
    Ok(outcomes)
}

/// Phase 2: one long tuning run per resource with the strategy that won the
/// comparison.
fn compute_long_tune(
    config: &CampaignConfig,
    platform: &PlatformDescriptor,
    out: &Path,
    comparisons: &BTreeMap<ResourceKind, ComparisonOutcome>,
    backend: &mut CampaignBackend,
) -> Result<BTreeMap<ResourceKind, TuneOutcome>> {
    let mut outcomes = BTreeMap::new();
    for &resource in &config.resources {
        let strategy = comparisons[&resource].winner;
        let unit = format!("tune/{resource}/{}", strategy.tag());
        let seed = derive_seed(config.seed, &unit);
        let mut opts = TuneOptions::new(resource, strategy, config.tune_budget, seed);
        opts.metric = config.metric;
        opts.work_units = config.work_units;
        opts.out = Some(out.to_path_buf());
        let result = tune_enemy(&opts, platform, backend.unit(seed)?)?;
        let path = default_results_path(out, &platform.name, resource, strategy, seed);
        outcomes.insert(
            resource,
            TuneOutcome {
                strategy,
                best_params: result.best_params.clone(),
                best_slowdown: result.best_value,
                source: relative_to(&path, out),
            },
        );
    }
    Ok(outcomes)
}

/// Phase 3: enumerate every per-core resource assignment, rank them per
/// resource by inflicted slowdown, and pick the Pareto winner.
fn compute_environment(
    config: &CampaignConfig,
    platform: &PlatformDescriptor,
    out: &Path,
    tuned: &BTreeMap<ResourceKind, EnemyParams>,
    backend: &mut CampaignBackend,
) -> Result<EnvironmentPhase> {
    let environments = enumerate_environments(platform, &config.resources)?;
    let mut rankings = Vec::new();
    let mut ranking_files = BTreeMap::new();
    for &resource in &config.resources {
        let seed = derive_seed(config.seed, &format!("rank/{resource}"));
        let csv_path = out.join("rankings").join(format!("{resource}.csv"));
        if let Some(parent) = csv_path.parent() {
            fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
        }
        let ranking = rank_environments(
            resource,
            &environments,
            tuned,
            platform,
            config.metric,
            config.work_units,
            backend.unit(seed)?,
            Some(&csv_path),
        )?;
        ranking.write_csv(&csv_path)?;
        ranking_files.insert(resource, relative_to(&csv_path, out));
        rankings.push(ranking);
    }
    let selected = SelectedEnvironment::from_rankings(&rankings)?;
    Ok(EnvironmentPhase { rankings, ranking_files, selected })
}

/// Phase 4: measure every benchmark in isolation and inside the selected
/// environment, flagging slowdowns whose confidence intervals separate.
fn compute_benchmarks(
    config: &CampaignConfig,
    platform: &PlatformDescriptor,
    out: &Path,
    tuned: &BTreeMap<ResourceKind, EnemyParams>,
    selected: &SelectedEnvironment,
    backend: &mut CampaignBackend,
) -> Result<Vec<BenchRow>> {
    let environment = selected.environment().materialize(tuned)?;
    let mut rows = Vec::new();
    for sut in &config.suts {
        let seed = derive_seed(config.seed, &format!("bench/{}", sut.alias));
        let program =
            Program::Command { alias: sut.alias.clone(), argv: sut.argv.clone() };
        let outcome = slowdown_runs(
            &program,
            &environment,
            platform,
            config.metric,
            backend.unit(seed)?,
        )?;
        let dir = out.join("bench").join(&sut.alias);
        fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
        let isolated_path = dir.join("isolated.json");
        let contended_path = dir.join("contended.json");
        outcome.isolated.save(&isolated_path)?;
        outcome.contended.save(&contended_path)?;
        rows.push(BenchRow {
            alias: sut.alias.clone(),
            slowdown: outcome.ratio,
            isolated_ns: outcome.isolated.metric_value_ns,
            contended_ns: outcome.contended.metric_value_ns,
            isolated_ci: outcome.isolated.ci,
            contended_ci: outcome.contended.ci,
            significant: intervals_disjoint(
                (outcome.isolated.ci[0], outcome.isolated.ci[1]),
                (outcome.contended.ci[0], outcome.contended.ci[1]),
            ),
            converged: outcome.isolated.converged && outcome.contended.converged,
            isolated_run: relative_to(&isolated_path, out),
            contended_run: relative_to(&contended_path, out),
        });
    }
    Ok(rows)
}

/// Run all five phases and return the final report. Completed phases found
/// under `out/campaign/` are reused when their inputs match.
pub fn run_full_campaign(
    config: &CampaignConfig,
    platform: &PlatformDescriptor,
    out: &Path,
) -> Result<CampaignReport> {
    Pipeline::new(config, platform, out)?.report()
}

/// Write the report JSON plus the CSV tables and plot-data files under
/// `out/report/`.
pub fn emit_report(report: &CampaignReport, out: &Path) -> Result<()> {
    let dir = out.join("report");
    fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
    report.save(&dir.join("report.json"))?;

    let mut comparison = String::from("resource,verdict,winner,sources\n");
    for (resource, outcome) in &report.comparisons {
        let sources: Vec<String> =
            outcome.sources.iter().map(|p| p.display().to_string()).collect();
        comparison.push_str(&format!(
            "{resource},{},{},{}\n",
            outcome.verdict.render(),
            outcome.winner.tag(),
            sources.join(";"),
        ));
    }
    write_text(&dir.join("comparison.csv"), &comparison)?;

    let mut tuning = String::from("resource,strategy,best_slowdown,source\n");
    for (resource, outcome) in &report.tuning {
        tuning.push_str(&format!(
            "{resource},{},{:.6},{}\n",
            outcome.strategy.tag(),
            outcome.best_slowdown,
            outcome.source.display(),
        ));
    }
    write_text(&dir.join("tuning.csv"), &tuning)?;

    let mut rankings = String::from("resource,rank,label,score\n");
    for ranking in &report.rankings {
        for (i, entry) in ranking.entries.iter().enumerate() {
            rankings.push_str(&format!(
                "{},{},{},{:.6}\n",
                ranking.resource,
                i + 1,
                entry.environment.label,
                entry.score,
            ));
        }
    }
    write_text(&dir.join("rankings.csv"), &rankings)?;

    let mut bench = String::from(
        "alias,slowdown,isolated_ns,contended_ns,isolated_ci_low,isolated_ci_high,\
         contended_ci_low,contended_ci_high,significant,converged\n",
    );
    for row in &report.benchmarks {
        bench.push_str(&format!(
            "{},{:.6},{},{},{},{},{},{},{},{}\n",
            row.alias,
            row.slowdown,
            row.isolated_ns,
            row.contended_ns,
            row.isolated_ci[0],
            row.isolated_ci[1],
            row.contended_ci[0],
            row.contended_ci[1],
            row.significant,
            row.converged,
        ));
    }
    write_text(&dir.join("benchmarks.csv"), &bench)?;

    // Bar-chart data: one slowdown bar per benchmark with the contended
    // interval rescaled by the isolated value.
    let mut bars = String::from("alias,slowdown,bar_low,bar_high,significant\n");
    for row in &report.benchmarks {
        let base = row.isolated_ns.max(1) as f64;
        bars.push_str(&format!(
            "{},{:.6},{:.6},{:.6},{}\n",
            row.alias,
            row.slowdown,
            row.contended_ci[0] as f64 / base,
            row.contended_ci[1] as f64 / base,
            row.significant,
        ));
    }
    write_text(&dir.join("slowdown_bars.csv"), &bars)?;

    // Quantile-choice data: how the interval around each candidate quantile
    // widens as the quantile grows, from the persisted contended samples.
    let mut spread = String::from("alias,quantile,value_ns,ci_low_ns,ci_high_ns\n");
    for row in &report.benchmarks {
        let run = MeasurementRun::load(&out.join(&row.contended_run))?;
        let durations = run.valid_durations();
        for q in [0.5, 0.75, 0.9, 0.95, 0.99] {
            let ci = quantile_ci(&durations, q, 0.9)?;
            let value = crate::stats::quantile(&durations, q)?;
            spread.push_str(&format!(
                "{},{q},{value},{},{}\n",
                row.alias, ci.low, ci.high,
            ));
        }
    }
    write_text(&dir.join("variance_vs_quantile.csv"), &spread)?;
    Ok(())
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    fs::write(path, text).map_err(|e| Error::io(path, e))
}
