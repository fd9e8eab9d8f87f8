//! Bayesian optimization: random initialization, then repeated
//! fit-surrogate / maximize-acquisition / evaluate rounds.

use std::collections::HashSet;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::gp::Gp;
use super::{Budget, Evaluator, ObjectiveFn, Strategy, TuningResult};
use crate::error::{Error, Result};
use crate::kernels::{ParameterSpace, Point};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BoOptions {
    /// Uniform random evaluations before the first surrogate fit. These are
    /// drawn exactly like random search with the same seed.
    pub init_points: u64,
    /// Random candidates scored by the acquisition function per round.
    pub candidates: usize,
    /// Additional candidates drawn from the best point's neighborhood.
    pub neighbor_candidates: usize,
    /// Exploration margin of expected improvement, in standard deviations
    /// of the observed values.
    pub xi: f64,
    /// Surrogate training-set cap; beyond it the best and the most recent
    /// halves are kept. Bounds the cubic fit cost on long runs.
    pub max_train: usize,
}

impl Default for BoOptions {
    fn default() -> Self {
        BoOptions { init_points: 8, candidates: 512, neighbor_candidates: 16, xi: 0.01, max_train: 256 }
    }
}

impl BoOptions {
    fn validate(&self) -> Result<()> {
        if self.init_points < 2 {
            return Err(Error::Config(format!(
                "Bayesian optimization needs at least 2 initial points, got {}",
                self.init_points
            )));
        }
        if self.candidates == 0 {
            return Err(Error::Config("candidate count must be positive".into()));
        }
        if !(self.xi.is_finite() && self.xi >= 0.0) {
            return Err(Error::Config(format!("xi must be >= 0, got {}", self.xi)));
        }
        if self.max_train < 2 {
            return Err(Error::Config("max_train must be at least 2".into()));
        }
        Ok(())
    }
}

pub fn bayesian_opt(
    space: &ParameterSpace,
    objective: &mut ObjectiveFn,
    budget: Budget,
    seed: u64,
    opts: &BoOptions,
) -> Result<TuningResult> {
    budget.validate()?;
    opts.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut eval = Evaluator::new(space, objective, budget);
    let mut points: Vec<Point> = Vec::new();
    let mut values: Vec<f64> = Vec::new();
    let mut seen: HashSet<Point> = HashSet::new();

    // Initialization draws the same stream as random search would, so a
    // budget of exactly init_points reproduces it.
    let mut attempts = 0;
    while !eval.expired() && attempts < opts.init_points {
        attempts += 1;
        let point = space.sample(&mut rng);
        if let Some(v) = eval.evaluate(&point) {
            seen.insert(point.clone());
            points.push(point);
            values.push(v);
        }
    }

    while !eval.expired() {
        let next = propose(space, &points, &values, &seen, &mut rng, opts);
        if let Some(v) = eval.evaluate(&next) {
            seen.insert(next.clone());
            points.push(next);
            values.push(v);
        }
    }
    eval.finish(space.resource, Strategy::Bayes, seed)
}

/// Pick the next point: argmax of expected improvement over a random
/// candidate set plus neighbors of the incumbent, falling back to a uniform
/// sample when the surrogate is degenerate or nothing new can be proposed.
fn propose(
    space: &ParameterSpace,
    points: &[Point],
    values: &[f64],
    seen: &HashSet<Point>,
    rng: &mut ChaCha8Rng,
    opts: &BoOptions,
) -> Point {
    let Some((best_idx, best_value)) = values
        .iter()
        .enumerate()
        .max_by(|a, b| a.1.total_cmp(b.1))
        .map(|(i, v)| (i, *v))
    else {
        return space.sample(rng);
    };

    let (train_points, train_values) = training_subset(points, values, opts.max_train);
    let encoded: Vec<Vec<f64>> = train_points.iter().map(|p| space.encode(p)).collect();
    let Some(gp) = Gp::fit(encoded, &train_values) else {
        log::debug!("surrogate degenerate (constant or singular); sampling uniformly this round");
        return space.sample(rng);
    };

    let mut candidates: Vec<Point> = Vec::with_capacity(opts.candidates + opts.neighbor_candidates);
    let mut fresh: HashSet<Point> = HashSet::new();
    for _ in 0..opts.candidates {
        let p = space.sample(rng);
        if !seen.contains(&p) && fresh.insert(p.clone()) {
            candidates.push(p);
        }
    }
    for _ in 0..opts.neighbor_candidates {
        let p = space.neighbor(&points[best_idx], rng, 2);
        if !seen.contains(&p) && fresh.insert(p.clone()) {
            candidates.push(p);
        }
    }
    if candidates.is_empty() {
        log::debug!("no unvisited candidates; sampling uniformly this round");
        return space.sample(rng);
    }

    candidates
        .into_iter()
        .map(|p| {
            let ei = gp.expected_improvement(&space.encode(&p), best_value, opts.xi);
            (p, ei)
        })
        .max_by(|a, b| a.1.total_cmp(&b.1))
        .map(|(p, _)| p)
        .expect("candidate list is nonempty")
}

/// Bound the surrogate's training set: keep the better half by value and
/// the most recent half, preserving evaluation order.
fn training_subset(points: &[Point], values: &[f64], cap: usize) -> (Vec<Point>, Vec<f64>) {
    let n = points.len();
    if n <= cap {
        return (points.to_vec(), values.to_vec());
    }
    let mut by_value: Vec<usize> = (0..n).collect();
    by_value.sort_by(|&a, &b| values[b].total_cmp(&values[a]));
    let mut keep: Vec<bool> = vec![false; n];
    for &i in by_value.iter().take(cap / 2) {
        keep[i] = true;
    }
    let mut kept = keep.iter().filter(|k| **k).count();
    for i in (0..n).rev() {
        if kept >= cap {
            break;
        }
        if !keep[i] {
            keep[i] = true;
            kept += 1;
        }
    }
    let mut ps = Vec::with_capacity(kept);
    let mut vs = Vec::with_capacity(kept);
    for i in 0..n {
        if keep[i] {
            ps.push(points[i].clone());
            vs.push(values[i]);
        }
    }
    (ps, vs)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::backends::synthetic::intensity;
    use crate::harness::PlatformDescriptor;
    use crate::kernels::{enemy_parameter_space, EnemyParams, ResourceKind};
    use crate::search::random_search;

    fn memory_space() -> ParameterSpace {
        enemy_parameter_space(ResourceKind::Memory, &PlatformDescriptor::example()).unwrap()
    }

    fn memory_objective(params: &EnemyParams) -> Result<f64> {
        Ok(1.0 + 0.7 * intensity(params, 512 * 1024, 64))
    }

    #[test]
    fn init_only_budget_equals_random_search() {
        let space = memory_space();
        let opts = BoOptions { init_points: 12, ..BoOptions::default() };
        let mut obj_a = memory_objective;
        let mut obj_b = memory_objective;
        let bo = bayesian_opt(&space, &mut obj_a, Budget::Evals(12), 31, &opts).unwrap();
        let ran = random_search(&space, &mut obj_b, Budget::Evals(12), 31).unwrap();
        assert_eq!(bo.history.len(), 12);
        for (a, b) in bo.history.iter().zip(&ran.history) {
            assert_eq!(a.params, b.params);
            assert_eq!(a.value, b.value);
        }
    }

    #[test]
    fn constant_objective_terminates_and_returns_the_constant() {
        let space = memory_space();
        let mut objective = |_: &EnemyParams| Ok(2.5);
        let result = bayesian_opt(&space, &mut objective, Budget::Evals(25), 5, &BoOptions::default())
            .unwrap();
        assert_eq!(result.history.len(), 25);
        assert_eq!(result.best_value, 2.5);
        result.validate().unwrap();
    }

    #[test]
    fn rejects_fewer_than_two_init_points() {
        let space = memory_space();
        let mut objective = memory_objective;
        let opts = BoOptions { init_points: 1, ..BoOptions::default() };
        assert!(matches!(
            bayesian_opt(&space, &mut objective, Budget::Evals(10), 0, &opts),
            Err(Error::Config(_))
        ));
    }

    #[test]
    fn deterministic_per_seed() {
        let space = memory_space();
        let run = |seed| {
            let mut objective = memory_objective;
            bayesian_opt(&space, &mut objective, Budget::Evals(30), seed, &BoOptions::default()).unwrap()
        };
        assert_eq!(run(3), run(3));
        assert_ne!(run(3).history, run(4).history);
    }

    #[test]
    fn training_subset_keeps_best_and_recent() {
        let space = memory_space();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let points: Vec<Point> = (0..10).map(|_| space.sample(&mut rng)).collect();
        let values: Vec<f64> = vec![9.0, 1.0, 2.0, 3.0, 4.0, 5.0, 6.0, 7.0, 0.5, 0.25];
        let (ps, vs) = training_subset(&points, &values, 4);
        assert_eq!(ps.len(), 4);
        // Top two by value (9.0, 7.0) plus the most recent remaining two.
        assert!(vs.contains(&9.0));
        assert!(vs.contains(&7.0));
        assert!(vs.contains(&0.5));
        assert!(vs.contains(&0.25));
        // Order preserved.
        assert_eq!(vs, vec![9.0, 7.0, 0.5, 0.25]);

        let (ps, _) = training_subset(&points, &values, 20);
        assert_eq!(ps.len(), 10);
    }

    #[test]
    fn focuses_evaluations_better_than_random() {
        // On the smooth memory objective the surrogate rounds should reach
        // the optimum region more reliably than uniform sampling. Compare
        // per-seed bests over a modest budget; the margin below was chosen
        // from a wide pilot sweep and is far from the observed boundary.
        let space = memory_space();
        let budget = Budget::Evals(40);
        let mut bo_wins = 0;
        let trials = 15;
        for seed in 0..trials {
            let mut obj_a = memory_objective;
            let mut obj_b = memory_objective;
            let bo = bayesian_opt(&space, &mut obj_a, budget, seed, &BoOptions::default()).unwrap();
            let ran = random_search(&space, &mut obj_b, budget, seed + 1000).unwrap();
            if bo.best_value >= ran.best_value {
                bo_wins += 1;
            }
        }
        assert!(bo_wins * 100 >= trials * 60, "BO won only {bo_wins}/{trials}");
    }
}
