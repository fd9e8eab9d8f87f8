//! Deterministic contention model. Durations follow a closed-form function
//! of the enemy parameters, so searches, rankings and reports can be
//! verified against hand-computed values without touching hardware.

use std::collections::BTreeMap;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, LogNormal};
use serde::{Deserialize, Serialize};

use super::Backend;
use crate::environment::ConcreteEnvironment;
use crate::error::{Error, Result};
use crate::harness::{BackendKind, MeasurementSample, PlatformDescriptor, Program};
use crate::kernels::{EnemyParams, ResourceKind};

/// Model of one external benchmark command: a base duration plus how
/// sensitive it is to each kind of pressure.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SutModel {
    pub baseline_ns: f64,
    /// Sensitivity weights over cache, bus and memory pressure, in that
    /// order. A one-hot mix behaves like the corresponding victim kernel.
    pub mix: [f64; 3],
}

/// Parameters of the synthetic model, loaded from JSON.
///
/// A sample for victim `v` under environment `env` has
/// `duration = baseline_ns[v] · work_units · (1 + Σ_core coupling[e][v] · intensity(params)) · noise`
/// where `e` is the enemy's resource and `noise` is lognormal(0, σ),
/// multiplied by `outlier_factor` with probability `outlier_prob`. Each
/// sample overheats with probability `overheat_prob`. With σ, the outlier
/// probability and the overheat probability all zero the model is exact.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SyntheticProfile {
    #[serde(default)]
    pub name: String,
    /// Base duration per work unit for each victim kernel.
    pub baseline_ns: BTreeMap<ResourceKind, f64>,
    /// `coupling[enemy][victim]`: how strongly an enemy stressing one
    /// resource slows a victim bound on another.
    pub coupling: BTreeMap<ResourceKind, BTreeMap<ResourceKind, f64>>,
    pub llc_size: u64,
    pub line_size: u64,
    #[serde(default)]
    pub noise_sigma: f64,
    #[serde(default)]
    pub outlier_prob: f64,
    #[serde(default = "default_outlier_factor")]
    pub outlier_factor: f64,
    #[serde(default)]
    pub overheat_prob: f64,
    #[serde(default)]
    pub seed: u64,
    /// Scripted non-overheat temperature readings, cycled per sample.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub temp_trace: Option<Vec<f64>>,
    /// Models for external benchmark commands, keyed by alias.
    #[serde(default, skip_serializing_if = "BTreeMap::is_empty")]
    pub suts: BTreeMap<String, SutModel>,
}

fn default_outlier_factor() -> f64 {
    10.0
}

impl SyntheticProfile {
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let profile: SyntheticProfile =
            serde_json::from_str(&text).map_err(|e| Error::json(path, e))?;
        profile.validate()?;
        Ok(profile)
    }

    pub fn validate(&self) -> Result<()> {
        for r in ResourceKind::ALL {
            let base = self
                .baseline_ns
                .get(&r)
                .ok_or_else(|| Error::Config(format!("profile has no baseline_ns for {r}")))?;
            if !(base.is_finite() && *base > 0.0) {
                return Err(Error::Config(format!("baseline_ns for {r} must be positive, got {base}")));
            }
            let row = self
                .coupling
                .get(&r)
                .ok_or_else(|| Error::Config(format!("profile has no coupling row for enemy {r}")))?;
            for v in ResourceKind::ALL {
                let c = row
                    .get(&v)
                    .ok_or_else(|| Error::Config(format!("coupling row {r} misses victim {v}")))?;
                if !(c.is_finite() && *c >= 0.0) {
                    return Err(Error::Config(format!("coupling[{r}][{v}] must be >= 0, got {c}")));
                }
            }
        }
        if self.llc_size == 0 || self.line_size == 0 || self.line_size > self.llc_size {
            return Err(Error::Config(format!(
                "profile cache geometry invalid: llc_size {} line_size {}",
                self.llc_size, self.line_size
            )));
        }
        if !(self.noise_sigma.is_finite() && self.noise_sigma >= 0.0) {
            return Err(Error::Config(format!("noise_sigma must be >= 0, got {}", self.noise_sigma)));
        }
        for (name, p) in [("outlier_prob", self.outlier_prob), ("overheat_prob", self.overheat_prob)] {
            if !(p.is_finite() && (0.0..=1.0).contains(&p)) {
                return Err(Error::Config(format!("{name} must lie in [0, 1], got {p}")));
            }
        }
        if !(self.outlier_factor.is_finite() && self.outlier_factor > 1.0) {
            return Err(Error::Config(format!("outlier_factor must exceed 1, got {}", self.outlier_factor)));
        }
        if let Some(trace) = &self.temp_trace {
            if trace.is_empty() {
                return Err(Error::Config("temp_trace, when present, must not be empty".into()));
            }
        }
        for (alias, sut) in &self.suts {
            if !(sut.baseline_ns.is_finite() && sut.baseline_ns > 0.0) {
                return Err(Error::Config(format!("SUT {alias}: baseline_ns must be positive")));
            }
            if sut.mix.iter().any(|w| !w.is_finite() || *w < 0.0) {
                return Err(Error::Config(format!("SUT {alias}: mix weights must be >= 0")));
            }
        }
        Ok(())
    }

    pub fn coupling(&self, enemy: ResourceKind, victim: ResourceKind) -> f64 {
        self.coupling
            .get(&enemy)
            .and_then(|row| row.get(&victim))
            .copied()
            .unwrap_or(0.0)
    }
}

/// How hard a single enemy presses on its resource, in [0, 1]. Saturating
/// and monotone in the size parameters so searches have structure to climb.
pub fn intensity(params: &EnemyParams, llc_size: u64, line_size: u64) -> f64 {
    let llc = llc_size as f64;
    match params {
        EnemyParams::Cache(p) => {
            let fill = (p.buffer_size as f64 / llc).min(1.0);
            let alignment = if p.stride % line_size.max(1) == 0 { 1.0 } else { 0.75 };
            let weight = (1.0 * p.ops.stores() as f64 + 0.6 * p.ops.loads() as f64) / 5.0;
            fill * alignment * weight
        }
        EnemyParams::Bus(p) => {
            let fill = (p.buffer_size as f64 / llc).min(1.0);
            let width = (2 - p.element_width.min(2)) as f64;
            let roles = if p.swap_roles { 1.0 } else { 0.9 };
            fill * width * roles / 2.0
        }
        EnemyParams::Memory(p) => {
            let fill = (p.buffer_size as f64 / (4.0 * llc)).min(1.0);
            let locality = 0.5 + 0.5 * p.subregion_size as f64 / p.buffer_size.max(1) as f64;
            fill * locality
        }
    }
}

/// Backend that samples the synthetic model. Fully determined by the
/// profile and the RNG seed.
pub struct SyntheticBackend {
    profile: SyntheticProfile,
    rng: ChaCha8Rng,
    sample_index: u64,
}

impl SyntheticBackend {
    pub fn new(profile: SyntheticProfile) -> Result<Self> {
        let seed = profile.seed;
        Self::with_seed(profile, seed)
    }

    /// Like [`SyntheticBackend::new`] but with the RNG seed overridden,
    /// leaving the profile untouched.
    pub fn with_seed(profile: SyntheticProfile, seed: u64) -> Result<Self> {
        profile.validate()?;
        Ok(SyntheticBackend { profile, rng: ChaCha8Rng::seed_from_u64(seed), sample_index: 0 })
    }

    pub fn profile(&self) -> &SyntheticProfile {
        &self.profile
    }

    /// Base duration and pressure-sensitivity mix for a program.
    fn model_for(&self, program: &Program) -> Result<(f64, [f64; 3])> {
        match program {
            Program::Victim { config } => {
                config.validate()?;
                let base = self.profile.baseline_ns[&config.resource] * config.work_units as f64;
                let mut mix = [0.0; 3];
                mix[resource_index(config.resource)] = 1.0;
                Ok((base, mix))
            }
            Program::Command { alias, .. } => {
                let sut = self.profile.suts.get(alias).ok_or_else(|| {
                    Error::Config(format!("synthetic profile {:?} has no SUT model for alias {alias:?}", self.profile.name))
                })?;
                Ok((sut.baseline_ns, sut.mix))
            }
        }
    }
}

fn resource_index(r: ResourceKind) -> usize {
    match r {
        ResourceKind::Cache => 0,
        ResourceKind::Bus => 1,
        ResourceKind::Memory => 2,
    }
}

impl Backend for SyntheticBackend {
    fn kind(&self) -> BackendKind {
        BackendKind::Synthetic
    }

    fn execute(
        &mut self,
        program: &Program,
        env: &ConcreteEnvironment,
        platform: &PlatformDescriptor,
    ) -> Result<MeasurementSample> {
        let (base, mix) = self.model_for(program)?;
        let mut pressure = [0.0; 3];
        for params in env.assignment.values() {
            let push = intensity(params, self.profile.llc_size, self.profile.line_size);
            for v in ResourceKind::ALL {
                pressure[resource_index(v)] += self.profile.coupling(params.resource(), v) * push;
            }
        }
        let felt: f64 = mix.iter().zip(pressure).map(|(w, p)| w * p).sum();

        // Draw order is part of the model's determinism contract:
        // noise (only when σ > 0), then outlier, then overheat.
        let mut noise = 1.0;
        if self.profile.noise_sigma > 0.0 {
            let lognormal = LogNormal::new(0.0, self.profile.noise_sigma)
                .map_err(|e| Error::Config(format!("noise distribution: {e}")))?;
            noise = lognormal.sample(&mut self.rng);
        }
        if self.rng.random::<f64>() < self.profile.outlier_prob {
            noise *= self.profile.outlier_factor;
        }
        let overheated = self.rng.random::<f64>() < self.profile.overheat_prob;

        let duration = base * (1.0 + felt) * noise;
        let temperature = if overheated {
            platform.temp_limit_celsius + 5.0
        } else {
            match &self.profile.temp_trace {
                Some(trace) => trace[(self.sample_index % trace.len() as u64) as usize],
                None => 45.0,
            }
        };
        self.sample_index += 1;
        Ok(MeasurementSample::valid(duration.round() as u64, Some(temperature)))
    }

    fn flush_cache(&mut self, _platform: &PlatformDescriptor) -> Result<()> {
        Ok(())
    }

    fn cooldown_after_overheat(&mut self) {}
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::harness::{measure, SlowdownMetric};
    use crate::kernels::{BusEnemyParams, CacheEnemyParams, MemoryEnemyParams, VictimConfig};

    fn profile() -> SyntheticProfile {
        let rows = [
            (ResourceKind::Cache, [0.9, 0.3, 0.2]),
            (ResourceKind::Bus, [0.25, 0.8, 0.3]),
            (ResourceKind::Memory, [0.15, 0.35, 0.7]),
        ];
        let coupling = rows
            .into_iter()
            .map(|(enemy, vals)| {
                let row = ResourceKind::ALL.into_iter().zip(vals).collect();
                (enemy, row)
            })
            .collect();
        SyntheticProfile {
            name: "test".into(),
            baseline_ns: ResourceKind::ALL.into_iter().zip([10_000.0, 20_000.0, 30_000.0]).collect(),
            coupling,
            llc_size: 512 * 1024,
            line_size: 64,
            noise_sigma: 0.0,
            outlier_prob: 0.0,
            outlier_factor: 10.0,
            overheat_prob: 0.0,
            seed: 7,
            temp_trace: None,
            suts: BTreeMap::new(),
        }
    }

    fn platform() -> PlatformDescriptor {
        PlatformDescriptor::example()
    }

    fn victim(resource: ResourceKind) -> Program {
        let p = platform();
        Program::Victim {
            config: VictimConfig::for_resource(resource, p.llc_size, p.line_size, p.associativity, 1),
        }
    }

    fn cache_enemy(buffer_size: u64, stride: u64, ops: &str) -> EnemyParams {
        EnemyParams::Cache(CacheEnemyParams { buffer_size, stride, ops: ops.parse().unwrap() })
    }

    fn env_on_core_1(params: EnemyParams) -> ConcreteEnvironment {
        let mut env = ConcreteEnvironment::empty();
        env.assignment.insert(1, params);
        env
    }

    #[test]
    fn quiet_profile_returns_exact_baseline() {
        let mut backend = SyntheticBackend::new(profile()).unwrap();
        for (resource, base) in ResourceKind::ALL.into_iter().zip([10_000u64, 20_000, 30_000]) {
            let sample = backend
                .execute(&victim(resource), &ConcreteEnvironment::empty(), &platform())
                .unwrap();
            assert_eq!(sample.duration_ns, base);
            assert!(!sample.discarded);
        }
    }

    #[test]
    fn saturating_cache_enemy_hits_full_coupling() {
        // buffer = llc, stride = line, five stores: every intensity factor
        // is exactly 1, so the slowdown equals the coupling entry.
        let mut backend = SyntheticBackend::new(profile()).unwrap();
        let env = env_on_core_1(cache_enemy(512 * 1024, 64, "SSSSS"));
        for (resource, expected) in ResourceKind::ALL.into_iter().zip([
            10_000.0 * 1.9f64,
            20_000.0 * 1.3,
            30_000.0 * 1.2,
        ]) {
            let sample = backend.execute(&victim(resource), &env, &platform()).unwrap();
            assert_eq!(sample.duration_ns, expected.round() as u64);
        }
    }

    #[test]
    fn zero_coupling_ignores_enemies() {
        let mut p = profile();
        for row in p.coupling.values_mut() {
            for c in row.values_mut() {
                *c = 0.0;
            }
        }
        let mut backend = SyntheticBackend::new(p).unwrap();
        let env = env_on_core_1(cache_enemy(512 * 1024, 64, "SSSSS"));
        let sample = backend.execute(&victim(ResourceKind::Cache), &env, &platform()).unwrap();
        assert_eq!(sample.duration_ns, 10_000);
    }

    #[test]
    fn enemy_contributions_add_across_cores() {
        let mut backend = SyntheticBackend::new(profile()).unwrap();
        let mut env = ConcreteEnvironment::empty();
        env.assignment.insert(1, cache_enemy(512 * 1024, 64, "SSSSS"));
        env.assignment.insert(2, cache_enemy(512 * 1024, 64, "SSSSS"));
        env.assignment.insert(3, EnemyParams::Memory(MemoryEnemyParams {
            buffer_size: 4 * 512 * 1024,
            subregion_size: 4 * 512 * 1024,
        }));
        // cache victim: 1 + 0.9 + 0.9 + 0.15·1.0 = 2.95
        let sample = backend.execute(&victim(ResourceKind::Cache), &env, &platform()).unwrap();
        assert_eq!(sample.duration_ns, 29_500);
    }

    #[test]
    fn intensity_closed_form_point_values() {
        let llc = 512 * 1024u64;
        let line = 64u64;
        // Half-filled buffer, misaligned stride, 2 stores + 3 loads:
        // 0.5 · 0.75 · (2.0 + 1.8)/5 = 0.285
        let i = intensity(&cache_enemy(llc / 2, 63, "SLSLL"), llc, line);
        assert!((i - 0.285).abs() < 1e-12, "{i}");

        // Bus: full buffer, width 1, roles kept: 1 · 1 · 0.9 / 2 = 0.45
        let b = intensity(
            &EnemyParams::Bus(BusEnemyParams { buffer_size: llc, element_width: 1, swap_roles: false }),
            llc,
            line,
        );
        assert!((b - 0.45).abs() < 1e-12, "{b}");
        // Width 2 zeroes the bus term.
        let b2 = intensity(
            &EnemyParams::Bus(BusEnemyParams { buffer_size: llc, element_width: 2, swap_roles: true }),
            llc,
            line,
        );
        assert_eq!(b2, 0.0);

        // Memory: buffer = 2·llc (half of saturation), subregion = buf/4:
        // 0.5 · (0.5 + 0.125) = 0.3125
        let m = intensity(
            &EnemyParams::Memory(MemoryEnemyParams { buffer_size: 2 * llc, subregion_size: llc / 2 }),
            llc,
            line,
        );
        assert!((m - 0.3125).abs() < 1e-12, "{m}");
    }

    #[test]
    fn cache_intensity_saturates_at_llc() {
        let llc = 512 * 1024u64;
        let mut last = 0.0;
        for buf in [4096, llc / 8, llc / 2, llc - 64, llc] {
            let i = intensity(&cache_enemy(buf, 64, "SSSSS"), llc, 64);
            assert!(i >= last, "intensity fell from {last} to {i} at buffer {buf}");
            last = i;
        }
        assert_eq!(last, 1.0);
        for buf in [llc + 64, 2 * llc, 64 * llc] {
            assert_eq!(intensity(&cache_enemy(buf, 64, "SSSSS"), llc, 64), 1.0);
        }
    }

    #[test]
    fn same_seed_same_stream() {
        let mut noisy = profile();
        noisy.noise_sigma = 0.3;
        noisy.outlier_prob = 0.05;
        noisy.overheat_prob = 0.1;
        let env = env_on_core_1(cache_enemy(4096, 64, "SL"));
        let run = |seed: u64| -> Vec<(u64, Option<f64>)> {
            let mut backend = SyntheticBackend::with_seed(noisy.clone(), seed).unwrap();
            (0..50)
                .map(|_| {
                    let s = backend.execute(&victim(ResourceKind::Bus), &env, &platform()).unwrap();
                    (s.duration_ns, s.end_temp_celsius)
                })
                .collect()
        };
        assert_eq!(run(11), run(11));
        assert_ne!(run(11), run(12));
    }

    #[test]
    fn overheat_probability_one_marks_every_sample() {
        let mut p = profile();
        p.overheat_prob = 1.0;
        let mut backend = SyntheticBackend::new(p).unwrap();
        let sample = backend
            .execute(&victim(ResourceKind::Cache), &ConcreteEnvironment::empty(), &platform())
            .unwrap();
        assert_eq!(sample.end_temp_celsius, Some(platform().temp_limit_celsius + 5.0));
    }

    #[test]
    fn temp_trace_cycles() {
        let mut p = profile();
        p.temp_trace = Some(vec![50.0, 90.0, 60.0]);
        let mut backend = SyntheticBackend::new(p).unwrap();
        let temps: Vec<f64> = (0..6)
            .map(|_| {
                backend
                    .execute(&victim(ResourceKind::Cache), &ConcreteEnvironment::empty(), &platform())
                    .unwrap()
                    .end_temp_celsius
                    .unwrap()
            })
            .collect();
        assert_eq!(temps, vec![50.0, 90.0, 60.0, 50.0, 90.0, 60.0]);
    }

    #[test]
    fn command_suts_use_their_mix() {
        let mut p = profile();
        p.suts.insert(
            "disparity".into(),
            SutModel { baseline_ns: 1_000_000.0, mix: [0.5, 0.2, 0.3] },
        );
        let mut backend = SyntheticBackend::new(p).unwrap();
        let program = Program::Command { alias: "disparity".into(), argv: vec!["true".into()] };

        let quiet = backend.execute(&program, &ConcreteEnvironment::empty(), &platform()).unwrap();
        assert_eq!(quiet.duration_ns, 1_000_000);

        // Saturating cache enemy: felt = 0.5·0.9 + 0.2·0.3 + 0.3·0.2 = 0.57
        let env = env_on_core_1(cache_enemy(512 * 1024, 64, "SSSSS"));
        let loud = backend.execute(&program, &env, &platform()).unwrap();
        assert_eq!(loud.duration_ns, 1_570_000);

        let unknown = Program::Command { alias: "mystery".into(), argv: vec![] };
        assert!(matches!(
            backend.execute(&unknown, &ConcreteEnvironment::empty(), &platform()),
            Err(Error::Config(_))
        ));
    }

    #[test]
    fn work_units_scale_linearly() {
        let mut backend = SyntheticBackend::new(profile()).unwrap();
        let p = platform();
        let program = Program::Victim {
            config: VictimConfig::for_resource(ResourceKind::Memory, p.llc_size, p.line_size, p.associativity, 7),
        };
        let sample = backend.execute(&program, &ConcreteEnvironment::empty(), &p).unwrap();
        assert_eq!(sample.duration_ns, 7 * 30_000);
    }

    #[test]
    fn lognormal_noise_has_roughly_right_shape() {
        let mut noisy = profile();
        noisy.noise_sigma = 0.2;
        let mut backend = SyntheticBackend::with_seed(noisy, 99).unwrap();
        let logs: Vec<f64> = (0..2000)
            .map(|_| {
                let s = backend
                    .execute(&victim(ResourceKind::Cache), &ConcreteEnvironment::empty(), &platform())
                    .unwrap();
                (s.duration_ns as f64 / 10_000.0).ln()
            })
            .collect();
        let mean = logs.iter().sum::<f64>() / logs.len() as f64;
        let var = logs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (logs.len() - 1) as f64;
        assert!(mean.abs() < 0.02, "log-mean {mean}");
        assert!((var.sqrt() - 0.2).abs() < 0.02, "log-sd {}", var.sqrt());
    }

    #[test]
    fn validation_rejects_malformed_profiles() {
        let mut p = profile();
        p.coupling.get_mut(&ResourceKind::Bus).unwrap().remove(&ResourceKind::Memory);
        assert!(p.validate().is_err());

        let mut p = profile();
        *p.coupling.get_mut(&ResourceKind::Cache).unwrap().get_mut(&ResourceKind::Cache).unwrap() = -0.1;
        assert!(p.validate().is_err());

        let mut p = profile();
        p.baseline_ns.insert(ResourceKind::Bus, 0.0);
        assert!(p.validate().is_err());

        let mut p = profile();
        p.outlier_prob = 1.5;
        assert!(p.validate().is_err());

        let mut p = profile();
        p.outlier_factor = 0.5;
        assert!(p.validate().is_err());

        let mut p = profile();
        p.temp_trace = Some(vec![]);
        assert!(p.validate().is_err());

        let mut p = profile();
        p.line_size = p.llc_size * 2;
        assert!(p.validate().is_err());

        profile().validate().unwrap();
    }

    #[test]
    fn profile_round_trips_through_json_file() {
        let mut p = profile();
        p.temp_trace = Some(vec![55.0]);
        p.suts.insert("mser".into(), SutModel { baseline_ns: 5e6, mix: [0.1, 0.1, 0.8] });
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("profile.json");
        std::fs::write(&path, serde_json::to_string_pretty(&p).unwrap()).unwrap();
        let loaded = SyntheticProfile::load(&path).unwrap();
        assert_eq!(loaded, p);
    }

    #[test]
    fn harness_measurement_is_exact_on_quiet_profile() {
        let mut backend = SyntheticBackend::new(profile()).unwrap();
        let env = env_on_core_1(cache_enemy(512 * 1024, 64, "SSSSS"));
        let run = measure(&victim(ResourceKind::Cache), &env, &platform(), SlowdownMetric::default(), &mut backend).unwrap();
        assert!(run.converged);
        assert_eq!(run.samples.len(), 20);
        assert_eq!(run.metric_value_ns, 19_000);
        assert_eq!(run.ci, [19_000, 19_000]);
    }
}
