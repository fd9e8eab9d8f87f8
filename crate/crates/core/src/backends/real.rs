//! Real-hardware backend: spawns enemy processes pinned to their cores,
//! waits for each to confirm readiness, then runs the measured program on
//! the SUT core at elevated priority. A host-wide lock file keeps
//! measurements from different processes from overlapping.

use std::fs::{File, OpenOptions};
use std::io::{BufRead, BufReader};
use std::os::fd::AsRawFd;
use std::os::unix::process::{CommandExt, ExitStatusExt};
use std::path::{Path, PathBuf};
use std::process::{Child, Command, ExitStatus, Stdio};
use std::sync::mpsc::{self, Receiver, RecvTimeoutError};
use std::time::{Duration, Instant};

use super::Backend;
use crate::environment::ConcreteEnvironment;
use crate::error::{Error, Result};
use crate::harness::{self, BackendKind, MeasurementSample, PlatformDescriptor, Program};
use crate::kernels::EnemyParams;

/// Line an enemy prints once its buffers are allocated and the stress loop
/// is about to start.
pub const READY_TOKEN: &str = "READY";
/// How long to wait for each enemy's readiness line.
const READY_TIMEOUT: Duration = Duration::from_secs(5);
/// Settle time between the last readiness confirmation and the SUT start.
const ENEMY_SETTLE: Duration = Duration::from_millis(10);
/// Grace period between SIGTERM and SIGKILL when stopping enemies.
const TERM_GRACE: Duration = Duration::from_secs(2);
/// Pause after an overheated sample.
const OVERHEAT_COOLDOWN: Duration = Duration::from_secs(1);

/// Number of cache lines one flush sweep touches: a scratch buffer of twice
/// the LLC, one store per line.
pub fn flush_touch_count(llc_size: u64, line_size: u64) -> u64 {
    (2 * llc_size).div_ceil(line_size.max(1))
}

/// Inner parameter object an enemy binary receives via `--params`.
pub fn params_json(params: &EnemyParams) -> Result<String> {
    let value = match params {
        EnemyParams::Cache(p) => serde_json::to_value(p),
        EnemyParams::Bus(p) => serde_json::to_value(p),
        EnemyParams::Memory(p) => serde_json::to_value(p),
    }
    .map_err(|e| Error::Config(format!("could not encode enemy parameters: {e}")))?;
    Ok(value.to_string())
}

pub struct RealBackend {
    enemy_bin: Option<PathBuf>,
    victim_bin: Option<PathBuf>,
    scratch: Vec<u8>,
    _lock: File,
}

impl RealBackend {
    /// Acquires the host measurement lock (blocking if another process holds
    /// it) and keeps it for the backend's lifetime.
    pub fn new(platform: &PlatformDescriptor) -> Result<Self> {
        platform.validate()?;
        let lock_path = platform
            .lock_file
            .clone()
            .unwrap_or_else(|| std::env::temp_dir().join("contend-measure.lock"));
        let lock = acquire_lock(&lock_path)?;
        let host = host_core_count();
        if host < platform.core_count {
            log::warn!(
                "platform {} expects {} cores but the host has {host}; enemy pinning will fail",
                platform.name,
                platform.core_count
            );
        }
        Ok(RealBackend {
            enemy_bin: platform.enemy_bin.clone(),
            victim_bin: platform.victim_bin.clone(),
            scratch: Vec::new(),
            _lock: lock,
        })
    }

    fn enemy_bin(&self) -> Result<PathBuf> {
        resolve_bin(&self.enemy_bin, "enemy")
    }

    fn victim_bin(&self) -> Result<PathBuf> {
        resolve_bin(&self.victim_bin, "victim")
    }

    fn run_sut(&self, program: &Program, platform: &PlatformDescriptor) -> Result<u64> {
        match program {
            Program::Victim { config } => {
                let bin = self.victim_bin()?;
                let json = serde_json::to_string(config)
                    .map_err(|e| Error::Config(format!("could not encode victim config: {e}")))?;
                let mut cmd = Command::new(&bin);
                cmd.arg("--resource")
                    .arg(config.resource.to_string())
                    .arg("--config")
                    .arg(json)
                    .stdin(Stdio::null())
                    .stdout(Stdio::piped())
                    .stderr(Stdio::piped());
                pin_command(&mut cmd, platform.sut_core);
                let child = cmd.spawn().map_err(|e| {
                    Error::Environment(format!("could not start victim {}: {e}", bin.display()))
                })?;
                elevate_priority(child.id());
                let out = child.wait_with_output().map_err(|e| Error::io(&bin, e))?;
                if !out.status.success() {
                    let stderr = String::from_utf8_lossy(&out.stderr);
                    return Err(Error::Environment(format!(
                        "victim exited with {}: {}",
                        out.status,
                        stderr.trim()
                    )));
                }
                let stdout = String::from_utf8_lossy(&out.stdout);
                stdout
                    .split_whitespace()
                    .next()
                    .and_then(|tok| tok.parse::<u64>().ok())
                    .ok_or_else(|| {
                        Error::Environment(format!("victim printed no duration: {:?}", stdout.trim()))
                    })
            }
            Program::Command { alias, argv } => {
                let exe = argv
                    .first()
                    .ok_or_else(|| Error::Config(format!("SUT {alias} has an empty command line")))?;
                let mut cmd = Command::new(exe);
                cmd.args(&argv[1..]).stdin(Stdio::null()).stdout(Stdio::null()).stderr(Stdio::null());
                pin_command(&mut cmd, platform.sut_core);
                let start = Instant::now();
                let mut child = cmd.spawn().map_err(|e| {
                    Error::Environment(format!("could not start SUT {alias} ({exe}): {e}"))
                })?;
                elevate_priority(child.id());
                let status = child.wait().map_err(|e| Error::io(Path::new(exe), e))?;
                let elapsed = start.elapsed();
                if !status.success() {
                    return Err(Error::Environment(format!("SUT {alias} exited with {status}")));
                }
                Ok(u64::try_from(elapsed.as_nanos()).unwrap_or(u64::MAX))
            }
        }
    }
}

impl Backend for RealBackend {
    fn kind(&self) -> BackendKind {
        BackendKind::Real
    }

    fn execute(
        &mut self,
        program: &Program,
        env: &ConcreteEnvironment,
        platform: &PlatformDescriptor,
    ) -> Result<MeasurementSample> {
        let mut crew = EnemyCrew::default();
        if !env.is_empty() {
            let bin = self.enemy_bin()?;
            for (&core, params) in &env.assignment {
                crew.spawn(&bin, core, params)?;
            }
            crew.await_ready()?;
            std::thread::sleep(ENEMY_SETTLE);
        }

        let timed = self.run_sut(program, platform);
        let early_exit = crew.check_all_running();
        crew.shutdown();
        early_exit?;
        let duration_ns = timed?;
        let temperature = harness::read_temperature(platform);
        Ok(MeasurementSample::valid(duration_ns, temperature))
    }

    /// Sweep a scratch buffer of twice the LLC, one store per cache line,
    /// evicting state the previous sample may have left behind.
    fn flush_cache(&mut self, platform: &PlatformDescriptor) -> Result<()> {
        let len = (2 * platform.llc_size) as usize;
        if self.scratch.len() != len {
            self.scratch = Vec::new();
            self.scratch.try_reserve_exact(len).map_err(|_| {
                Error::Environment(format!("could not allocate {len} byte flush buffer"))
            })?;
            self.scratch.resize(len, 0);
        }
        let step = platform.line_size.max(1) as usize;
        let ptr = self.scratch.as_mut_ptr();
        let mut off = 0usize;
        while off < len {
            unsafe { std::ptr::write_volatile(ptr.add(off), off as u8) };
            off += step;
        }
        Ok(())
    }

    fn cooldown_after_overheat(&mut self) {
        std::thread::sleep(OVERHEAT_COOLDOWN);
    }
}

fn resolve_bin(configured: &Option<PathBuf>, name: &str) -> Result<PathBuf> {
    if let Some(path) = configured {
        return Ok(path.clone());
    }
    // Fall back to a binary shipped beside the running executable.
    if let Ok(exe) = std::env::current_exe() {
        for dir in exe.ancestors().skip(1).take(2) {
            let candidate = dir.join(name);
            if candidate.is_file() {
                return Ok(candidate);
            }
        }
    }
    Err(Error::Config(format!(
        "platform names no {name} binary and none was found beside the current executable"
    )))
}

fn host_core_count() -> usize {
    let n = unsafe { libc::sysconf(libc::_SC_NPROCESSORS_ONLN) };
    if n > 0 {
        n as usize
    } else {
        1
    }
}

fn acquire_lock(path: &Path) -> Result<File> {
    if let Some(parent) = path.parent() {
        if !parent.as_os_str().is_empty() {
            std::fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
        }
    }
    let file = OpenOptions::new()
        .create(true)
        .truncate(false)
        .read(true)
        .write(true)
        .open(path)
        .map_err(|e| Error::io(path, e))?;
    let fd = file.as_raw_fd();
    if unsafe { libc::flock(fd, libc::LOCK_EX | libc::LOCK_NB) } != 0 {
        let err = std::io::Error::last_os_error();
        if err.raw_os_error() != Some(libc::EWOULDBLOCK) {
            return Err(Error::Environment(format!("could not lock {}: {err}", path.display())));
        }
        log::info!("another measurement holds {}; waiting", path.display());
        if unsafe { libc::flock(fd, libc::LOCK_EX) } != 0 {
            return Err(Error::Environment(format!(
                "could not lock {}: {}",
                path.display(),
                std::io::Error::last_os_error()
            )));
        }
    }
    Ok(file)
}

fn pin_command(cmd: &mut Command, core: usize) {
    unsafe {
        cmd.pre_exec(move || pin_current_task(core));
    }
}

fn pin_current_task(core: usize) -> std::io::Result<()> {
    unsafe {
        let mut set: libc::cpu_set_t = std::mem::zeroed();
        libc::CPU_ZERO(&mut set);
        libc::CPU_SET(core, &mut set);
        if libc::sched_setaffinity(0, std::mem::size_of::<libc::cpu_set_t>(), &set) != 0 {
            return Err(std::io::Error::last_os_error());
        }
    }
    Ok(())
}

/// Raise a child to real-time priority, degrading to a high nice level and
/// then to a warning if the host refuses.
fn elevate_priority(pid: u32) {
    unsafe {
        let max = libc::sched_get_priority_max(libc::SCHED_FIFO);
        let param = libc::sched_param { sched_priority: max };
        if libc::sched_setscheduler(pid as libc::pid_t, libc::SCHED_FIFO, &param) == 0 {
            return;
        }
        if libc::setpriority(libc::PRIO_PROCESS as _, pid as libc::id_t, -20) == 0 {
            log::debug!("SCHED_FIFO unavailable for pid {pid}; using nice -20");
            return;
        }
    }
    log::warn!("could not raise priority of pid {pid}; measuring at normal priority");
}

struct EnemyProc {
    child: Child,
    core: usize,
    ready: Option<Receiver<()>>,
    exited: Option<ExitStatus>,
}

impl EnemyProc {
    fn poll(&mut self) -> Option<ExitStatus> {
        if self.exited.is_none() {
            if let Ok(Some(status)) = self.child.try_wait() {
                self.exited = Some(status);
            }
        }
        self.exited
    }
}

#[derive(Default)]
struct EnemyCrew {
    procs: Vec<EnemyProc>,
}

impl EnemyCrew {
    fn spawn(&mut self, bin: &Path, core: usize, params: &EnemyParams) -> Result<()> {
        let json = params_json(params)?;
        let mut cmd = Command::new(bin);
        cmd.arg("--resource")
            .arg(params.resource().to_string())
            .arg("--params")
            .arg(json)
            .stdin(Stdio::null())
            .stdout(Stdio::piped())
            .stderr(Stdio::null());
        pin_command(&mut cmd, core);
        let mut child = cmd.spawn().map_err(|e| {
            Error::EnemyStart(format!("enemy on core {core} failed to start: {e}"))
        })?;
        let stdout = child.stdout.take().expect("stdout was piped");
        let (tx, rx) = mpsc::channel();
        std::thread::spawn(move || {
            let reader = BufReader::new(stdout);
            for line in reader.lines() {
                match line {
                    Ok(l) if l.trim() == READY_TOKEN => {
                        let _ = tx.send(());
                    }
                    Ok(_) => {}
                    Err(_) => break,
                }
            }
        });
        self.procs.push(EnemyProc { child, core, ready: Some(rx), exited: None });
        Ok(())
    }

    fn await_ready(&mut self) -> Result<()> {
        for proc in &mut self.procs {
            let rx = proc.ready.take().expect("readiness awaited once");
            match rx.recv_timeout(READY_TIMEOUT) {
                Ok(()) => {}
                Err(RecvTimeoutError::Timeout) => {
                    return Err(Error::EnemyStart(format!(
                        "enemy on core {} sent no {READY_TOKEN} within {READY_TIMEOUT:?}",
                        proc.core
                    )));
                }
                Err(RecvTimeoutError::Disconnected) => {
                    let detail = match proc.poll() {
                        Some(status) => format!("exited with {status}"),
                        None => "closed stdout".to_string(),
                    };
                    return Err(Error::EnemyStart(format!(
                        "enemy on core {} {detail} before signalling {READY_TOKEN}",
                        proc.core
                    )));
                }
            }
        }
        Ok(())
    }

    /// After the SUT finishes, every enemy must still be running; one that
    /// died mid-sample invalidates the measurement.
    fn check_all_running(&mut self) -> Result<()> {
        for proc in &mut self.procs {
            if let Some(status) = proc.poll() {
                return Err(Error::EnemyStart(format!(
                    "enemy on core {} exited mid-measurement with {status}",
                    proc.core
                )));
            }
        }
        Ok(())
    }

    fn shutdown(mut self) {
        for proc in &mut self.procs {
            if proc.exited.is_none() {
                unsafe { libc::kill(proc.child.id() as libc::pid_t, libc::SIGTERM) };
            }
        }
        let deadline = Instant::now() + TERM_GRACE;
        while Instant::now() < deadline && self.procs.iter_mut().any(|p| p.poll().is_none()) {
            std::thread::sleep(Duration::from_millis(5));
        }
        for proc in &mut self.procs {
            if proc.poll().is_none() {
                log::warn!("enemy on core {} ignored SIGTERM; killing", proc.core);
                let _ = proc.child.kill();
                let _ = proc.child.wait();
                proc.exited = proc.child.try_wait().ok().flatten();
            } else if let Some(status) = proc.exited {
                let terminated = status.signal() == Some(libc::SIGTERM);
                if !status.success() && !terminated {
                    log::warn!("enemy on core {} stopped with {status}", proc.core);
                }
            }
        }
        self.procs.clear();
    }
}

impl Drop for EnemyCrew {
    fn drop(&mut self) {
        for proc in &mut self.procs {
            if proc.exited.is_none() {
                let _ = proc.child.kill();
                let _ = proc.child.wait();
            }
        }
    }
}
