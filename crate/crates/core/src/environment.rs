//! Hostile-environment assembly: enumerate per-core assignments of tuned
//! enemies, rank each assignment by how much it slows the per-resource
//! victims, and select a Pareto-optimal compromise environment.

use std::collections::{BTreeMap, BTreeSet};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::backends::Backend;
use crate::error::{Error, Result};
use crate::harness::{measure, PlatformDescriptor, Program, SlowdownMetric};
use crate::kernels::{EnemyParams, ResourceKind, VictimConfig};

/// Assignment of one enemy kind to every non-SUT core, identified by a label
/// of resource letters in core order ("MBM" puts a memory enemy on the first
/// and last enemy cores and a bus enemy in between).
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct HostileEnvironment {
    pub label: String,
    pub assignment: BTreeMap<usize, ResourceKind>,
}

impl HostileEnvironment {
    pub fn new(assignment: BTreeMap<usize, ResourceKind>) -> Self {
        let label = assignment.values().map(|r| r.letter()).collect();
        HostileEnvironment { label, assignment }
    }

    /// Check the label matches the assignment and the assignment covers
    /// exactly the non-SUT cores of `platform`.
    pub fn validate(&self, platform: &PlatformDescriptor) -> Result<()> {
        let expected: BTreeSet<usize> = platform.enemy_cores().into_iter().collect();
        let actual: BTreeSet<usize> = self.assignment.keys().copied().collect();
        if expected != actual {
            return Err(Error::Config(format!(
                "environment {} covers cores {actual:?}, platform needs {expected:?}",
                self.label
            )));
        }
        let derived: String = self.assignment.values().map(|r| r.letter()).collect();
        if derived != self.label {
            return Err(Error::Config(format!(
                "environment label {} does not match its assignment ({derived})",
                self.label
            )));
        }
        Ok(())
    }

    /// Instantiate the environment with concrete tuned parameters.
    pub fn materialize(&self, tuned: &BTreeMap<ResourceKind, EnemyParams>) -> Result<ConcreteEnvironment> {
        let mut assignment = BTreeMap::new();
        for (&core, &resource) in &self.assignment {
            let params = tuned
                .get(&resource)
                .ok_or_else(|| Error::Config(format!("no tuned enemy for {resource}")))?;
            if params.resource() != resource {
                return Err(Error::Config(format!(
                    "tuned table maps {resource} to {} parameters",
                    params.resource()
                )));
            }
            assignment.insert(core, params.clone());
        }
        Ok(ConcreteEnvironment { assignment })
    }
}

/// Concrete enemy parameters per core, ready to execute.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConcreteEnvironment {
    pub assignment: BTreeMap<usize, EnemyParams>,
}

impl ConcreteEnvironment {
    /// No enemies at all: the isolation baseline.
    pub fn empty() -> Self {
        ConcreteEnvironment::default()
    }

    /// The same enemy on every non-SUT core, as used while tuning a single
    /// enemy kind.
    pub fn uniform(params: &EnemyParams, platform: &PlatformDescriptor) -> Self {
        let assignment = platform.enemy_cores().into_iter().map(|core| (core, params.clone())).collect();
        ConcreteEnvironment { assignment }
    }

    pub fn is_empty(&self) -> bool {
        self.assignment.is_empty()
    }
}

/// Every assignment of `resources` to the non-SUT cores of `platform`, in
/// lexicographic label order. With r resources and n cores this yields
/// r^(n-1) environments.
pub fn enumerate_environments(platform: &PlatformDescriptor, resources: &[ResourceKind]) -> Result<Vec<HostileEnvironment>> {
    platform.validate()?;
    let mut letters: Vec<ResourceKind> = resources.to_vec();
    letters.sort_by_key(|r| r.letter());
    letters.dedup();
    if letters.is_empty() {
        return Err(Error::Config("environment enumeration needs at least one resource".into()));
    }
    let cores = platform.enemy_cores();
    let mut out = Vec::new();
    let mut odometer = vec![0usize; cores.len()];
    loop {
        let assignment: BTreeMap<usize, ResourceKind> =
            cores.iter().zip(&odometer).map(|(&core, &i)| (core, letters[i])).collect();
        out.push(HostileEnvironment::new(assignment));
        // Advance with the first core as the most significant digit so
        // labels come out in lexicographic order.
        let mut pos = cores.len();
        loop {
            if pos == 0 {
                return Ok(out);
            }
            pos -= 1;
            odometer[pos] += 1;
            if odometer[pos] < letters.len() {
                break;
            }
            odometer[pos] = 0;
        }
    }
}

/// Environments ordered by the slowdown they inflict on one resource's
/// victim; the rank of `entries[i]` is `i + 1`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RankedEnvironments {
    pub resource: ResourceKind,
    pub entries: Vec<RankedEntry>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RankedEntry {
    pub environment: HostileEnvironment,
    pub score: f64,
}

impl RankedEnvironments {
    /// 1-based rank of the labelled environment.
    pub fn rank_of(&self, label: &str) -> Option<usize> {
        self.entries.iter().position(|e| e.environment.label == label).map(|i| i + 1)
    }

    pub fn labels(&self) -> BTreeSet<&str> {
        self.entries.iter().map(|e| e.environment.label.as_str()).collect()
    }

    /// Table-shaped CSV: resource,rank,label,score.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("resource,rank,label,score\n");
        for (i, entry) in self.entries.iter().enumerate() {
            out.push_str(&format!("{},{},{},{:.6}\n", self.resource, i + 1, entry.environment.label, entry.score));
        }
        out
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_csv()).map_err(|e| Error::io(path, e))
    }
}

fn sort_entries(entries: &mut [RankedEntry]) {
    entries.sort_by(|a, b| {
        b.score
            .partial_cmp(&a.score)
            .unwrap()
            .then_with(|| a.environment.label.cmp(&b.environment.label))
    });
}

/// Score every environment by the slowdown of `resource`'s victim inside it.
///
/// The victim's isolated baseline is measured once; each environment then
/// needs a single contended measurement. Results are sorted by descending
/// score with ties in lexicographic label order. If a measurement fails the
/// environments ranked so far are written to `partial_out` (when given)
/// before the error propagates.
#[allow(clippy::too_many_arguments)]
pub fn rank_environments(
    resource: ResourceKind,
    environments: &[HostileEnvironment],
    tuned: &BTreeMap<ResourceKind, EnemyParams>,
    platform: &PlatformDescriptor,
    metric: SlowdownMetric,
    work_units: u64,
    backend: &mut dyn Backend,
    partial_out: Option<&Path>,
) -> Result<RankedEnvironments> {
    if environments.is_empty() {
        return Err(Error::Config("cannot rank an empty environment list".into()));
    }
    for env in environments {
        env.validate(platform)?;
    }
    let victim = VictimConfig::for_resource(
        resource,
        platform.llc_size,
        platform.line_size,
        platform.associativity,
        work_units,
    );
    let program = Program::Victim { config: victim };
    let mut entries: Vec<RankedEntry> = Vec::with_capacity(environments.len());

    let mut run = || -> Result<()> {
        let isolated = measure(&program, &ConcreteEnvironment::empty(), platform, metric, backend)?;
        if isolated.metric_value_ns == 0 {
            return Err(Error::InvalidInput(format!("{resource} victim baseline is zero")));
        }
        for env in environments {
            let concrete = env.materialize(tuned)?;
            let contended = measure(&program, &concrete, platform, metric, backend)?;
            entries.push(RankedEntry {
                environment: env.clone(),
                score: contended.metric_value_ns as f64 / isolated.metric_value_ns as f64,
            });
        }
        Ok(())
    };
    if let Err(e) = run() {
        sort_entries(&mut entries);
        if let Some(path) = partial_out {
            let partial = RankedEnvironments { resource, entries };
            if let Err(write_err) = partial.write_csv(path) {
                log::warn!("could not persist partial ranking: {write_err}");
            }
        }
        return Err(e);
    }
    sort_entries(&mut entries);
    Ok(RankedEnvironments { resource, entries })
}

/// Pick a Pareto-optimal environment across all per-resource rankings.
///
/// An environment is dominated when some other environment ranks strictly
/// better in every ranking. Among the non-dominated candidates the winner is
/// the one ranked better than every other candidate in all but at most one
/// ranking; if that rule selects none or several, the smallest rank sum and
/// finally the lexicographically smallest label decide.
pub fn pareto_select(rankings: &[RankedEnvironments]) -> Result<HostileEnvironment> {
    if rankings.is_empty() {
        return Err(Error::InvalidInput("pareto selection needs at least one ranking".into()));
    }
    let labels: Vec<&str> = rankings[0].entries.iter().map(|e| e.environment.label.as_str()).collect();
    for ranking in &rankings[1..] {
        if ranking.labels() != rankings[0].labels() {
            return Err(Error::InvalidInput(format!(
                "rankings for {} and {} cover different environment sets",
                rankings[0].resource, ranking.resource
            )));
        }
    }
    let rank = |label: &str, ranking: &RankedEnvironments| ranking.rank_of(label).unwrap();
    let dominated = |a: &str| {
        labels
            .iter()
            .any(|&b| b != a && rankings.iter().all(|r| rank(b, r) < rank(a, r)))
    };
    let candidates: Vec<&str> = labels.iter().copied().filter(|&l| !dominated(l)).collect();

    let beats_all_but_one = |a: &str| {
        candidates.iter().all(|&b| {
            b == a || rankings.iter().filter(|r| rank(a, r) < rank(b, r)).count() >= rankings.len() - 1
        })
    };
    let winners: Vec<&str> = candidates.iter().copied().filter(|&l| beats_all_but_one(l)).collect();
    let pool = if winners.is_empty() { &candidates } else { &winners };

    let rank_sum = |label: &str| rankings.iter().map(|r| rank(label, r)).sum::<usize>();
    let best = pool
        .iter()
        .copied()
        .min_by(|&a, &b| rank_sum(a).cmp(&rank_sum(b)).then_with(|| a.cmp(b)))
        .unwrap();
    let entry = rankings[0].entries.iter().find(|e| e.environment.label == best).unwrap();
    Ok(entry.environment.clone())
}

/// The Pareto choice together with its rank in every ranking, as persisted
/// to environment.json.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SelectedEnvironment {
    pub label: String,
    pub assignment: BTreeMap<usize, ResourceKind>,
    pub per_resource_ranks: BTreeMap<ResourceKind, usize>,
}

impl SelectedEnvironment {
    pub fn from_rankings(rankings: &[RankedEnvironments]) -> Result<Self> {
        let chosen = pareto_select(rankings)?;
        let per_resource_ranks = rankings
            .iter()
            .map(|r| (r.resource, r.rank_of(&chosen.label).unwrap()))
            .collect();
        Ok(SelectedEnvironment { label: chosen.label, assignment: chosen.assignment, per_resource_ranks })
    }

    pub fn environment(&self) -> HostileEnvironment {
        HostileEnvironment { label: self.label.clone(), assignment: self.assignment.clone() }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn platform(cores: usize) -> PlatformDescriptor {
        PlatformDescriptor { core_count: cores, ..PlatformDescriptor::example() }
    }

    fn ranking_from_labels(resource: ResourceKind, ordered: &[&str], cores: &[usize]) -> RankedEnvironments {
        let entries = ordered
            .iter()
            .enumerate()
            .map(|(i, label)| {
                let assignment = cores
                    .iter()
                    .zip(label.chars())
                    .map(|(&c, letter)| (c, ResourceKind::from_letter(letter).unwrap()))
                    .collect();
                RankedEntry {
                    environment: HostileEnvironment::new(assignment),
                    score: (ordered.len() - i) as f64,
                }
            })
            .collect();
        RankedEnvironments { resource, entries }
    }

    #[test]
    fn enumeration_counts_and_order() {
        let all = ResourceKind::ALL;
        let envs = enumerate_environments(&platform(4), &all).unwrap();
        assert_eq!(envs.len(), 27);
        let labels: Vec<&str> = envs.iter().map(|e| e.label.as_str()).collect();
        assert_eq!(labels[0], "BBB");
        assert_eq!(labels[26], "MMM");
        let mut sorted = labels.clone();
        sorted.sort();
        sorted.dedup();
        assert_eq!(sorted.len(), 27, "labels are distinct");
        assert_eq!(labels, sorted, "lexicographic order");

        assert_eq!(enumerate_environments(&platform(8), &all).unwrap().len(), 2187);
        let single = enumerate_environments(&platform(2), &[ResourceKind::Cache]).unwrap();
        assert_eq!(single.len(), 1);
        assert_eq!(single[0].label, "C");
        assert_eq!(single[0].assignment[&1], ResourceKind::Cache);
    }

    #[test]
    fn enumeration_respects_sut_core() {
        let mut p = platform(3);
        p.sut_core = 1;
        let envs = enumerate_environments(&p, &ResourceKind::ALL).unwrap();
        assert_eq!(envs.len(), 9);
        for env in &envs {
            assert!(env.assignment.contains_key(&0));
            assert!(env.assignment.contains_key(&2));
            assert!(!env.assignment.contains_key(&1));
        }
    }

    #[test]
    fn enumeration_duplicates_and_empty_resources() {
        let twice = [ResourceKind::Cache, ResourceKind::Cache];
        let envs = enumerate_environments(&platform(3), &twice).unwrap();
        assert_eq!(envs.len(), 1);
        assert!(enumerate_environments(&platform(3), &[]).is_err());
    }

    #[test]
    fn environment_validation_catches_mismatches() {
        let envs = enumerate_environments(&platform(4), &ResourceKind::ALL).unwrap();
        envs[0].validate(&platform(4)).unwrap();
        assert!(envs[0].validate(&platform(3)).is_err());

        let mut broken = envs[5].clone();
        broken.label = "XYZ".into();
        assert!(broken.validate(&platform(4)).is_err());
    }

    #[test]
    fn materialize_requires_all_tuned_resources() {
        let envs = enumerate_environments(&platform(3), &ResourceKind::ALL).unwrap();
        let mixed = envs.iter().find(|e| e.label == "CM").unwrap();
        let mut tuned = BTreeMap::new();
        tuned.insert(
            ResourceKind::Cache,
            EnemyParams::Cache(crate::kernels::CacheEnemyParams {
                buffer_size: 4096,
                stride: 64,
                ops: "S".parse().unwrap(),
            }),
        );
        assert!(mixed.materialize(&tuned).is_err());
        tuned.insert(
            ResourceKind::Memory,
            EnemyParams::Memory(crate::kernels::MemoryEnemyParams { buffer_size: 8192, subregion_size: 64 }),
        );
        let concrete = mixed.materialize(&tuned).unwrap();
        assert_eq!(concrete.assignment.len(), 2);
        assert_eq!(concrete.assignment[&1].resource(), ResourceKind::Cache);
        assert_eq!(concrete.assignment[&2].resource(), ResourceKind::Memory);
    }

    #[test]
    fn pareto_picks_unanimous_winner() {
        let cores = [1, 2];
        let rankings = vec![
            ranking_from_labels(ResourceKind::Cache, &["MM", "MB", "BM", "BB"], &cores),
            ranking_from_labels(ResourceKind::Bus, &["MM", "BB", "MB", "BM"], &cores),
            ranking_from_labels(ResourceKind::Memory, &["MM", "BM", "MB", "BB"], &cores),
        ];
        assert_eq!(pareto_select(&rankings).unwrap().label, "MM");
    }

    #[test]
    fn pareto_single_ranking_returns_top_entry() {
        let cores = [1, 2];
        let rankings = vec![ranking_from_labels(ResourceKind::Cache, &["CB", "BC", "CC", "BB"], &cores)];
        assert_eq!(pareto_select(&rankings).unwrap().label, "CB");
    }

    #[test]
    fn pareto_tie_break_prefers_mostly_better_candidate() {
        let cores = [1, 2];
        // CB and BC are both Pareto-optimal; CB beats BC in two of the
        // three rankings.
        let rankings = vec![
            ranking_from_labels(ResourceKind::Cache, &["CB", "BC", "BB", "CC"], &cores),
            ranking_from_labels(ResourceKind::Bus, &["BC", "CB", "BB", "CC"], &cores),
            ranking_from_labels(ResourceKind::Memory, &["CB", "BC", "CC", "BB"], &cores),
        ];
        assert_eq!(pareto_select(&rankings).unwrap().label, "CB");
    }

    #[test]
    fn pareto_falls_back_to_rank_sum_then_label() {
        let cores = [1, 2];
        // Two rankings, opposite orders: both candidates beat each other in
        // all-but-one ranking, and rank sums tie, so the label decides.
        let rankings = vec![
            ranking_from_labels(ResourceKind::Cache, &["MB", "BM"], &cores),
            ranking_from_labels(ResourceKind::Bus, &["BM", "MB"], &cores),
        ];
        assert_eq!(pareto_select(&rankings).unwrap().label, "BM");
    }

    #[test]
    fn pareto_rejects_mismatched_sets() {
        let cores = [1, 2];
        let rankings = vec![
            ranking_from_labels(ResourceKind::Cache, &["MB", "BM"], &cores),
            ranking_from_labels(ResourceKind::Bus, &["MM", "MB"], &cores),
        ];
        assert!(pareto_select(&rankings).is_err());
    }

    #[test]
    fn selected_environment_records_ranks() {
        let cores = [1, 2];
        let rankings = vec![
            ranking_from_labels(ResourceKind::Cache, &["MM", "MB", "BM", "BB"], &cores),
            ranking_from_labels(ResourceKind::Bus, &["MB", "MM", "BM", "BB"], &cores),
        ];
        // MM (ranks 1, 2) and MB (ranks 2, 1) are both Pareto-optimal and
        // both beat the other in one ranking; rank sums tie at 3, so the
        // lexicographically smaller label wins.
        let selected = SelectedEnvironment::from_rankings(&rankings).unwrap();
        assert_eq!(selected.label, "MB");
        assert_eq!(selected.per_resource_ranks[&ResourceKind::Cache], 2);
        assert_eq!(selected.per_resource_ranks[&ResourceKind::Bus], 1);
        let json = serde_json::to_string(&selected).unwrap();
        let back: SelectedEnvironment = serde_json::from_str(&json).unwrap();
        assert_eq!(back, selected);
    }

    #[test]
    fn rankings_csv_shape() {
        let cores = [1];
        let ranking = ranking_from_labels(ResourceKind::Cache, &["M", "B"], &cores);
        let csv = ranking.to_csv();
        let lines: Vec<&str> = csv.lines().collect();
        assert_eq!(lines[0], "resource,rank,label,score");
        assert!(lines[1].starts_with("cache,1,M,"));
        assert!(lines[2].starts_with("cache,2,B,"));
    }

    proptest! {
        #[test]
        fn pareto_output_is_never_dominated(seed in 0u64..300) {
            use rand::prelude::*;
            use rand_chacha::ChaCha8Rng;
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let cores = [1, 2];
            let mut labels = vec!["BB", "BC", "BM", "CB", "CC", "CM", "MB", "MC", "MM"];
            let mut rankings = Vec::new();
            for resource in ResourceKind::ALL {
                labels.shuffle(&mut rng);
                rankings.push(ranking_from_labels(resource, &labels, &cores));
            }
            let chosen = pareto_select(&rankings).unwrap();
            // Dominance oracle: every other environment is worse somewhere.
            for other in &labels {
                if *other == chosen.label {
                    continue;
                }
                let somewhere_better = rankings
                    .iter()
                    .any(|r| r.rank_of(&chosen.label).unwrap() <= r.rank_of(other).unwrap());
                prop_assert!(somewhere_better);
            }
            // Selection is deterministic.
            prop_assert_eq!(pareto_select(&rankings).unwrap().label, chosen.label);
        }
    }
}
