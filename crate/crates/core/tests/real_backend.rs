//! Round-trips through the real process backend using the actual compiled
//! enemy and victim binaries. The CI host may have a single usable core, so
//! the success paths stick to empty environments on the SUT core and the
//! enemy paths assert the failure contract instead of real contention.

use contend::backends::{Backend, RealBackend};
use contend::environment::ConcreteEnvironment;
use contend::harness::{measure, BackendKind, PlatformDescriptor, Program, SlowdownMetric};
use contend::kernels::{CacheEnemyParams, EnemyParams, ResourceKind, VictimConfig};
use contend::Error;

fn real_platform(dir: &std::path::Path) -> PlatformDescriptor {
    PlatformDescriptor {
        name: "sandbox".into(),
        core_count: 2,
        sut_core: 0,
        llc_size: 256 * 1024,
        line_size: 64,
        associativity: 16,
        ram_bytes: 1 << 30,
        temp_limit_celsius: 95.0,
        temp_probe: None,
        backend: BackendKind::Real,
        synthetic_profile: None,
        enemy_bin: Some(env!("CARGO_BIN_EXE_enemy").into()),
        victim_bin: Some(env!("CARGO_BIN_EXE_victim").into()),
        lock_file: Some(dir.join("measure.lock")),
    }
}

fn cache_victim(platform: &PlatformDescriptor) -> Program {
    Program::Victim {
        config: VictimConfig::for_resource(
            ResourceKind::Cache,
            platform.llc_size,
            platform.line_size,
            platform.associativity,
            1,
        ),
    }
}

/// The full adaptive protocol against the real victim binary: spawn, pin,
/// time, repeat until the interval converges or the caps hit.
#[test]
fn measures_the_victim_binary_in_isolation() {
    let dir = tempfile::tempdir().unwrap();
    let platform = real_platform(dir.path());
    let mut backend = RealBackend::new(&platform).unwrap();
    let run = measure(
        &cache_victim(&platform),
        &ConcreteEnvironment::empty(),
        &platform,
        SlowdownMetric::Median,
        &mut backend,
    )
    .unwrap();
    let valid = run.valid_durations();
    assert!((20..=200).contains(&valid.len()), "{} valid samples", valid.len());
    assert!(run.metric_value_ns > 0);
    assert!(run.ci[0] <= run.metric_value_ns && run.metric_value_ns <= run.ci[1]);

    let path = dir.path().join("run.json");
    run.save(&path).unwrap();
    let reloaded = contend::harness::MeasurementRun::load(&path).unwrap();
    assert_eq!(run, reloaded);
}

/// A command program is timed by wall clock through the same interface.
#[test]
fn times_an_external_command() {
    let dir = tempfile::tempdir().unwrap();
    let platform = real_platform(dir.path());
    let mut backend = RealBackend::new(&platform).unwrap();
    let program = Program::Command {
        alias: "true".into(),
        argv: vec!["/bin/true".into()],
    };
    let sample = backend.execute(&program, &ConcreteEnvironment::empty(), &platform).unwrap();
    assert!(sample.duration_ns > 0);
    assert!(!sample.discarded);
}

/// An enemy assigned to a core the host does not have must surface as an
/// environment error after the consecutive start-failure cap, not hang or
/// crash the harness.
#[test]
fn impossible_enemy_pinning_fails_the_run_cleanly() {
    let host_cores = std::thread::available_parallelism().map(|n| n.get()).unwrap_or(1);
    let dir = tempfile::tempdir().unwrap();
    let mut platform = real_platform(dir.path());
    // One enemy core beyond whatever the host offers.
    platform.core_count = host_cores + 1;
    let params = EnemyParams::Cache(CacheEnemyParams {
        buffer_size: 64 * 1024,
        stride: 64,
        ops: "SSSSS".parse().unwrap(),
    });
    let env = ConcreteEnvironment {
        assignment: [(host_cores, params)].into_iter().collect(),
    };
    let mut backend = RealBackend::new(&platform).unwrap();
    let err = measure(
        &cache_victim(&platform),
        &env,
        &platform,
        SlowdownMetric::Median,
        &mut backend,
    )
    .unwrap_err();
    assert!(matches!(err, Error::Environment(_)), "unexpected error: {err}");
    assert_eq!(err.exit_code(), 3);
}

/// A victim binary path that does not exist is an environment problem.
#[test]
fn missing_victim_binary_is_an_environment_error() {
    let dir = tempfile::tempdir().unwrap();
    let mut platform = real_platform(dir.path());
    platform.victim_bin = Some("/nonexistent/victim".into());
    let mut backend = RealBackend::new(&platform).unwrap();
    let err = backend
        .execute(&cache_victim(&platform), &ConcreteEnvironment::empty(), &platform)
        .unwrap_err();
    assert_eq!(err.exit_code(), 3, "unexpected error: {err}");
}
