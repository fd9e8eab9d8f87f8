//! Measurement harness: runs a program inside a hostile environment with the
//! validity controls that make interference measurements trustworthy (cache
//! flushes, enemy readiness, temperature guards) and grows the sample count
//! until the metric's confidence interval is tight.

use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::backends::Backend;
use crate::environment::ConcreteEnvironment;
use crate::error::{Error, Result};
use crate::kernels::VictimConfig;
use crate::stats;

/// Valid samples collected before the first convergence check.
pub const INITIAL_SAMPLES: usize = 20;
/// Valid samples added per round while the interval is too wide.
pub const SAMPLE_BATCH: usize = 20;
/// Hard cap on valid samples.
pub const MAX_VALID_SAMPLES: usize = 200;
/// Hard cap on sample attempts, including discarded ones.
pub const MAX_SAMPLE_ATTEMPTS: usize = 400;
/// Confidence level of the convergence interval.
pub const CI_CONFIDENCE: f64 = 0.9;
/// Both interval endpoints must sit within this fraction of the metric.
pub const CONVERGENCE_TOLERANCE: f64 = 0.05;
/// Consecutive enemy start failures tolerated before the run aborts.
pub const MAX_CONSECUTIVE_ENEMY_FAILURES: usize = 5;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum BackendKind {
    Real,
    Synthetic,
}

impl FromStr for BackendKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "real" => Ok(BackendKind::Real),
            "synthetic" => Ok(BackendKind::Synthetic),
            other => Err(Error::Config(format!("unknown backend {other:?}"))),
        }
    }
}

impl std::fmt::Display for BackendKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            BackendKind::Real => "real",
            BackendKind::Synthetic => "synthetic",
        })
    }
}

/// Static description of the machine (or modelled machine) measurements run
/// on, loaded from a JSON platform file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PlatformDescriptor {
    pub name: String,
    pub core_count: usize,
    /// Core the measured program runs on; all other cores host enemies.
    #[serde(default)]
    pub sut_core: usize,
    pub llc_size: u64,
    pub line_size: u64,
    pub associativity: u64,
    pub ram_bytes: u64,
    #[serde(default = "default_temp_limit")]
    pub temp_limit_celsius: f64,
    /// Shell command printing the current temperature in degrees Celsius.
    #[serde(default)]
    pub temp_probe: Option<String>,
    pub backend: BackendKind,
    /// Synthetic model definition, relative to the platform file.
    #[serde(default)]
    pub synthetic_profile: Option<PathBuf>,
    #[serde(default)]
    pub enemy_bin: Option<PathBuf>,
    #[serde(default)]
    pub victim_bin: Option<PathBuf>,
    #[serde(default)]
    pub lock_file: Option<PathBuf>,
}

fn default_temp_limit() -> f64 {
    80.0
}

impl PlatformDescriptor {
    /// A synthetic four-core platform with Pi-like geometry, handy for tests
    /// and documentation.
    pub fn example() -> Self {
        PlatformDescriptor {
            name: "example".into(),
            core_count: 4,
            sut_core: 0,
            llc_size: 512 * 1024,
            line_size: 64,
            associativity: 16,
            ram_bytes: 1 << 30,
            temp_limit_celsius: default_temp_limit(),
            temp_probe: None,
            backend: BackendKind::Synthetic,
            synthetic_profile: None,
            enemy_bin: None,
            victim_bin: None,
            lock_file: None,
        }
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut platform: PlatformDescriptor =
            serde_json::from_str(&text).map_err(|e| Error::json(path, e))?;
        // Paths inside the platform file are relative to it.
        if let Some(dir) = path.parent() {
            for p in [&mut platform.synthetic_profile, &mut platform.enemy_bin, &mut platform.victim_bin] {
                if let Some(rel) = p.as_mut() {
                    if rel.is_relative() {
                        *rel = dir.join(&rel);
                    }
                }
            }
        }
        platform.validate()?;
        Ok(platform)
    }

    pub fn validate(&self) -> Result<()> {
        if self.name.is_empty() {
            return Err(Error::Config("platform needs a name".into()));
        }
        if self.core_count < 2 {
            return Err(Error::Config(format!(
                "platform {} has {} cores; at least 2 are required",
                self.name, self.core_count
            )));
        }
        if self.sut_core >= self.core_count {
            return Err(Error::Config(format!(
                "SUT core {} out of range for {} cores",
                self.sut_core, self.core_count
            )));
        }
        if self.temp_limit_celsius <= 0.0 {
            return Err(Error::Config("temperature limit must be positive".into()));
        }
        Ok(())
    }

    /// All cores except the SUT core, ascending.
    pub fn enemy_cores(&self) -> Vec<usize> {
        (0..self.core_count).filter(|&c| c != self.sut_core).collect()
    }
}

/// What the harness runs and times on the SUT core.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum Program {
    /// A built-in victim kernel.
    Victim { config: VictimConfig },
    /// An arbitrary external command timed by wall clock.
    Command { alias: String, argv: Vec<String> },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DiscardReason {
    Overheat,
    EnemyStartFailure,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MeasurementSample {
    pub duration_ns: u64,
    #[serde(rename = "end_temp_c", default, skip_serializing_if = "Option::is_none")]
    pub end_temp_celsius: Option<f64>,
    pub discarded: bool,
    #[serde(rename = "reason", default, skip_serializing_if = "Option::is_none")]
    pub discard_reason: Option<DiscardReason>,
}

impl MeasurementSample {
    pub fn valid(duration_ns: u64, end_temp_celsius: Option<f64>) -> Self {
        MeasurementSample { duration_ns, end_temp_celsius, discarded: false, discard_reason: None }
    }

    fn discarded(duration_ns: u64, end_temp_celsius: Option<f64>, reason: DiscardReason) -> Self {
        MeasurementSample { duration_ns, end_temp_celsius, discarded: true, discard_reason: Some(reason) }
    }
}

/// How a set of durations collapses to one number.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SlowdownMetric {
    Median,
    Max,
    Quantile(f64),
}

impl Default for SlowdownMetric {
    fn default() -> Self {
        SlowdownMetric::Quantile(0.9)
    }
}

impl SlowdownMetric {
    pub fn validate(&self) -> Result<()> {
        if let SlowdownMetric::Quantile(q) = self {
            if !(*q > 0.0 && *q < 1.0) {
                return Err(Error::Config(format!("quantile metric level {q} outside (0, 1)")));
            }
        }
        Ok(())
    }

    pub fn value(&self, durations: &[u64]) -> Result<u64> {
        match self {
            SlowdownMetric::Median => stats::quantile(durations, 0.5),
            SlowdownMetric::Max => stats::quantile(durations, 1.0),
            SlowdownMetric::Quantile(q) => stats::quantile(durations, *q),
        }
    }

    /// Confidence interval used for convergence. Median and Quantile use the
    /// order-statistic interval; Max, which has no distribution-free
    /// interval, uses the spread of the two largest observations.
    pub fn interval(&self, durations: &[u64], confidence: f64) -> Result<(u64, u64)> {
        match self {
            SlowdownMetric::Median => {
                let ci = stats::quantile_ci(durations, 0.5, confidence)?;
                Ok((ci.low, ci.high))
            }
            SlowdownMetric::Quantile(q) => {
                let ci = stats::quantile_ci(durations, *q, confidence)?;
                Ok((ci.low, ci.high))
            }
            SlowdownMetric::Max => {
                let mut sorted = durations.to_vec();
                sorted.sort_unstable();
                let max = *sorted.last().ok_or_else(|| Error::InvalidInput("no samples".into()))?;
                let second = sorted[sorted.len().saturating_sub(2)];
                Ok((second, max))
            }
        }
    }
}

impl FromStr for SlowdownMetric {
    type Err = Error;

    /// Accepts "median", "max" or "q0.9".
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "median" => Ok(SlowdownMetric::Median),
            "max" => Ok(SlowdownMetric::Max),
            other => {
                let q = other
                    .strip_prefix('q')
                    .and_then(|v| v.parse::<f64>().ok())
                    .ok_or_else(|| Error::Config(format!("unknown metric {other:?} (try median, max or q0.9)")))?;
                let metric = SlowdownMetric::Quantile(q);
                metric.validate()?;
                Ok(metric)
            }
        }
    }
}

/// One adaptive measurement: all samples (valid and discarded), the metric
/// value over the valid ones, its confidence interval and whether the
/// interval converged before the sample caps.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MeasurementRun {
    pub samples: Vec<MeasurementSample>,
    pub metric: SlowdownMetric,
    pub metric_value_ns: u64,
    pub ci: [u64; 2],
    pub converged: bool,
}

impl MeasurementRun {
    pub fn valid_durations(&self) -> Vec<u64> {
        self.samples.iter().filter(|s| !s.discarded).map(|s| s.duration_ns).collect()
    }

    pub fn ci_low(&self) -> u64 {
        self.ci[0]
    }

    pub fn ci_high(&self) -> u64 {
        self.ci[1]
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let text = serde_json::to_string_pretty(self).map_err(|e| Error::json(path, e))?;
        std::fs::write(path, text).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        serde_json::from_str(&text).map_err(|e| Error::json(path, e))
    }
}

/// True when the two runs' confidence intervals do not overlap at all, the
/// significance rule for benchmark slowdowns.
pub fn ci_overlap_significant(a: &MeasurementRun, b: &MeasurementRun) -> bool {
    stats::intervals_disjoint((a.ci_low(), a.ci_high()), (b.ci_low(), b.ci_high()))
}

/// Measure `program` on the SUT core while `env`'s enemies run on theirs.
///
/// Every sample starts from flushed cache state and waits for all enemies to
/// confirm readiness (plus the settle delay, handled by the backend). After
/// 20 valid samples the metric and its 90% interval are computed; batches of
/// 20 follow until both endpoints are within 5% of the metric or 200 valid
/// samples accumulate. Overheated samples are kept but discarded from the
/// metric. More than 5 consecutive enemy start failures abort the run; so
/// does exceeding 400 total attempts.
pub fn measure(
    program: &Program,
    env: &ConcreteEnvironment,
    platform: &PlatformDescriptor,
    metric: SlowdownMetric,
    backend: &mut dyn Backend,
) -> Result<MeasurementRun> {
    platform.validate()?;
    metric.validate()?;
    for &core in env.assignment.keys() {
        if core == platform.sut_core {
            return Err(Error::Config(format!("enemy assigned to the SUT core {core}")));
        }
        if core >= platform.core_count {
            return Err(Error::Config(format!(
                "enemy assigned to core {core}, platform has {}",
                platform.core_count
            )));
        }
    }

    let mut samples: Vec<MeasurementSample> = Vec::new();
    let mut consecutive_failures = 0usize;
    let mut target = INITIAL_SAMPLES;
    loop {
        while valid_count(&samples) < target && samples.len() < MAX_SAMPLE_ATTEMPTS {
            backend.flush_cache(platform)?;
            match backend.execute(program, env, platform) {
                Ok(mut sample) => {
                    consecutive_failures = 0;
                    if sample.end_temp_celsius.is_none() {
                        sample.end_temp_celsius = read_temperature(platform);
                    }
                    let overheated = sample
                        .end_temp_celsius
                        .map(|t| t > platform.temp_limit_celsius)
                        .unwrap_or(false);
                    if overheated {
                        samples.push(MeasurementSample::discarded(
                            sample.duration_ns,
                            sample.end_temp_celsius,
                            DiscardReason::Overheat,
                        ));
                        backend.cooldown_after_overheat();
                    } else {
                        samples.push(sample);
                    }
                }
                Err(Error::EnemyStart(msg)) => {
                    consecutive_failures += 1;
                    log::warn!("enemy start failure ({consecutive_failures} consecutive): {msg}");
                    samples.push(MeasurementSample::discarded(0, None, DiscardReason::EnemyStartFailure));
                    if consecutive_failures > MAX_CONSECUTIVE_ENEMY_FAILURES {
                        return Err(Error::Environment(format!(
                            "{consecutive_failures} consecutive enemy start failures: {msg}"
                        )));
                    }
                }
                Err(other) => return Err(other),
            }
        }

        let durations: Vec<u64> =
            samples.iter().filter(|s| !s.discarded).map(|s| s.duration_ns).collect();
        if durations.len() < INITIAL_SAMPLES {
            return Err(Error::Environment(format!(
                "only {} valid samples in {} attempts",
                durations.len(),
                samples.len()
            )));
        }
        let metric_value = metric.value(&durations)?;
        let (lo, hi) = metric.interval(&durations, CI_CONFIDENCE)?;
        let converged = interval_within_tolerance(metric_value, lo, hi);
        if converged || durations.len() >= MAX_VALID_SAMPLES || samples.len() >= MAX_SAMPLE_ATTEMPTS {
            return Ok(MeasurementRun { samples, metric, metric_value_ns: metric_value, ci: [lo, hi], converged });
        }
        target += SAMPLE_BATCH;
    }
}

fn valid_count(samples: &[MeasurementSample]) -> usize {
    samples.iter().filter(|s| !s.discarded).count()
}

fn interval_within_tolerance(value: u64, lo: u64, hi: u64) -> bool {
    let value = value as f64;
    let margin = CONVERGENCE_TOLERANCE * value;
    (value - lo as f64) <= margin && (hi as f64 - value) <= margin
}

/// Contended-over-isolated ratio of the metric, measuring isolation first.
pub fn slowdown(
    program: &Program,
    env: &ConcreteEnvironment,
    platform: &PlatformDescriptor,
    metric: SlowdownMetric,
    backend: &mut dyn Backend,
) -> Result<f64> {
    slowdown_runs(program, env, platform, metric, backend).map(|outcome| outcome.ratio)
}

/// A slowdown with both underlying runs, for callers that persist them.
#[derive(Debug, Clone, PartialEq)]
pub struct SlowdownOutcome {
    pub isolated: MeasurementRun,
    pub contended: MeasurementRun,
    pub ratio: f64,
}

pub fn slowdown_runs(
    program: &Program,
    env: &ConcreteEnvironment,
    platform: &PlatformDescriptor,
    metric: SlowdownMetric,
    backend: &mut dyn Backend,
) -> Result<SlowdownOutcome> {
    let isolated = measure(program, &ConcreteEnvironment::empty(), platform, metric, backend)?;
    let contended = measure(program, env, platform, metric, backend)?;
    let ratio = if isolated.metric_value_ns == 0 {
        if contended.metric_value_ns == 0 {
            1.0
        } else {
            return Err(Error::InvalidInput("isolated baseline is zero but contention is not".into()));
        }
    } else {
        contended.metric_value_ns as f64 / isolated.metric_value_ns as f64
    };
    Ok(SlowdownOutcome { isolated, contended, ratio })
}

/// Evict cached state before a sample; delegates to the backend (a scratch
/// sweep on hardware, a no-op synthetically).
pub fn flush_cache_state(platform: &PlatformDescriptor, backend: &mut dyn Backend) -> Result<()> {
    backend.flush_cache(platform)
}

/// Run the platform's temperature probe. Returns the first numeric token of
/// its output, or None when no probe is configured or it fails; samples
/// without a reading are never discarded for heat.
pub fn read_temperature(platform: &PlatformDescriptor) -> Option<f64> {
    let probe = platform.temp_probe.as_deref()?;
    let output = std::process::Command::new("sh").arg("-c").arg(probe).output().ok()?;
    if !output.status.success() {
        log::debug!("temperature probe exited with {}", output.status);
        return None;
    }
    let text = String::from_utf8_lossy(&output.stdout);
    text.split_whitespace().find_map(|token| token.parse::<f64>().ok())
}
