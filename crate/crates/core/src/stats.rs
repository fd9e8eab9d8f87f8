//! Statistics used by the harness and the campaign analysis: nearest-rank
//! quantiles, distribution-free quantile confidence intervals, the Wilcoxon
//! rank-sum test, geometric means and strategy-comparison verdicts.

use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, Normal};
use statrs::function::gamma::ln_gamma;

use crate::error::{Error, Result};

/// Nearest-rank quantile: the k-th smallest sample with k = ceil(q * n).
///
/// Always returns an element of `samples`. `q` must lie in (0, 1]; q = 1
/// yields the maximum.
pub fn quantile(samples: &[u64], q: f64) -> Result<u64> {
    if samples.is_empty() {
        return Err(Error::InvalidInput("quantile of an empty sample set".into()));
    }
    if !(q > 0.0 && q <= 1.0) {
        return Err(Error::InvalidInput(format!("quantile level {q} outside (0, 1]")));
    }
    let mut sorted = samples.to_vec();
    sorted.sort_unstable();
    Ok(sorted[nearest_rank(q, sorted.len()) - 1])
}

/// 1-based nearest rank for quantile level `q` among `n` samples.
pub fn nearest_rank(q: f64, n: usize) -> usize {
    ((q * n as f64).ceil() as usize).clamp(1, n)
}

/// Two-sided distribution-free confidence interval for a quantile, built from
/// order statistics via the binomial method.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct QuantileCi {
    pub low: u64,
    pub high: u64,
    /// 1-based order-statistic ranks of the endpoints.
    pub low_rank: usize,
    pub high_rank: usize,
    /// Exact coverage probability of [low, high] under a continuous sampling
    /// distribution.
    pub coverage: f64,
    /// False when the requested confidence is unattainable at this sample
    /// size and an endpoint had to be clamped to a sample extreme.
    pub informative: bool,
}

/// Confidence interval for the q-quantile from the order statistics of
/// `samples`.
///
/// Let B ~ Bin(n, q) count samples at or below the true quantile. The lower
/// endpoint is the largest rank l with P(B < l) <= (1-confidence)/2 and the
/// upper endpoint the smallest rank u with P(B >= u) <= (1-confidence)/2, so
/// the interval [x(l), x(u)] covers the true quantile with probability at
/// least `confidence` whenever both ranks exist. When a rank does not exist
/// the endpoint is clamped to rank 1 or n and the interval is flagged
/// non-informative.
pub fn quantile_ci(samples: &[u64], q: f64, confidence: f64) -> Result<QuantileCi> {
    if samples.is_empty() {
        return Err(Error::InvalidInput("confidence interval of an empty sample set".into()));
    }
    if !(q > 0.0 && q < 1.0) {
        return Err(Error::InvalidInput(format!("quantile level {q} outside (0, 1)")));
    }
    if !(confidence > 0.0 && confidence < 1.0) {
        return Err(Error::InvalidInput(format!("confidence {confidence} outside (0, 1)")));
    }
    let mut sorted = samples.to_vec();
    sorted.sort_unstable();
    let (low_rank, high_rank, coverage, informative) = quantile_ci_ranks(sorted.len(), q, confidence);
    Ok(QuantileCi {
        low: sorted[low_rank - 1],
        high: sorted[high_rank - 1],
        low_rank,
        high_rank,
        coverage,
        informative,
    })
}

/// Order-statistic ranks for [`quantile_ci`], independent of the sample
/// values. Returns (low_rank, high_rank, coverage, informative).
pub fn quantile_ci_ranks(n: usize, q: f64, confidence: f64) -> (usize, usize, f64, bool) {
    assert!(n > 0);
    const EPS: f64 = 1e-12;
    let tail = (1.0 - confidence) / 2.0;
    let pmf = binomial_pmf_table(n, q);
    let mut cdf = vec![0.0; n + 1];
    let mut acc = 0.0;
    for k in 0..=n {
        acc += pmf[k];
        cdf[k] = acc.min(1.0);
    }

    // Largest l with P(B <= l-1) <= tail; cdf is nondecreasing in l.
    let mut low_rank = None;
    for l in 1..=n {
        if cdf[l - 1] <= tail + EPS {
            low_rank = Some(l);
        } else {
            break;
        }
    }
    // Smallest u with P(B >= u) = 1 - P(B <= u-1) <= tail.
    let mut high_rank = None;
    for u in 1..=n {
        if 1.0 - cdf[u - 1] <= tail + EPS {
            high_rank = Some(u);
            break;
        }
    }

    let informative = low_rank.is_some() && high_rank.is_some();
    let l = low_rank.unwrap_or(1);
    let u = high_rank.unwrap_or(n).max(l);
    // P(l <= B <= u-1) = P(X(l) <= quantile <= X(u)) for continuous samples.
    let coverage = (cdf[u - 1] - cdf[l - 1]).clamp(0.0, 1.0);
    (l, u, coverage, informative)
}

fn binomial_pmf_table(n: usize, p: f64) -> Vec<f64> {
    let nf = n as f64;
    let ln_fact_n = ln_gamma(nf + 1.0);
    (0..=n)
        .map(|k| {
            let kf = k as f64;
            let ln_c = ln_fact_n - ln_gamma(kf + 1.0) - ln_gamma(nf - kf + 1.0);
            (ln_c + kf * p.ln() + (nf - kf) * (1.0 - p).ln()).exp()
        })
        .collect()
}

/// Two-sided Wilcoxon rank-sum p-value for samples `a` and `b`.
///
/// Ties receive midranks. When min(|a|, |b|) <= 12 the p-value is exact,
/// computed by counting rank-sum assignments; otherwise the tie-corrected
/// normal approximation with continuity correction is used.
pub fn wilcoxon_rank_sum(a: &[f64], b: &[f64]) -> Result<f64> {
    if a.is_empty() || b.is_empty() {
        return Err(Error::InvalidInput("rank-sum test needs two non-empty samples".into()));
    }
    if a.iter().chain(b).any(|v| !v.is_finite()) {
        return Err(Error::InvalidInput("rank-sum test input contains non-finite values".into()));
    }
    let n = a.len();
    let m = b.len();
    let mut all: Vec<(f64, bool)> = a
        .iter()
        .map(|&v| (v, true))
        .chain(b.iter().map(|&v| (v, false)))
        .collect();
    all.sort_by(|x, y| x.0.partial_cmp(&y.0).unwrap());

    // Doubled midranks stay integral even with ties: a tie group occupying
    // 1-based positions i..=j gets midrank (i+j)/2, doubled to i+j.
    let total = n + m;
    let mut doubled = vec![0u64; total];
    let mut tie_sizes = Vec::new();
    let mut i = 0;
    while i < total {
        let mut j = i;
        while j + 1 < total && all[j + 1].0 == all[i].0 {
            j += 1;
        }
        let d = (i + 1 + j + 1) as u64;
        for k in i..=j {
            doubled[k] = d;
        }
        tie_sizes.push(j - i + 1);
        i = j + 1;
    }
    let w2_obs: u64 = all
        .iter()
        .zip(&doubled)
        .filter(|((_, from_a), _)| *from_a)
        .map(|(_, &d)| d)
        .sum();

    if n.min(m) <= EXACT_RANK_SUM_LIMIT {
        Ok(exact_rank_sum_p(&doubled, n, w2_obs))
    } else {
        Ok(normal_rank_sum_p(n, m, &tie_sizes, w2_obs))
    }
}

/// Largest min(n, m) for which the rank-sum p-value is computed exactly.
pub const EXACT_RANK_SUM_LIMIT: usize = 12;

/// Exact two-sided p-value: over all C(n+m, n) assignments of the observed
/// (doubled) ranks to group a, the fraction whose rank sum deviates from the
/// mean by at least as much as the observed one.
fn exact_rank_sum_p(doubled: &[u64], n: usize, w2_obs: u64) -> f64 {
    let total = doubled.len();
    let pick = n.min(total - n);
    // Count subsets by size and doubled-rank sum. Complement symmetry lets us
    // enumerate the smaller group.
    let mut desc: Vec<u64> = doubled.to_vec();
    desc.sort_unstable_by(|a, b| b.cmp(a));
    let s_max: u64 = desc[..pick].iter().sum();
    let mut dp = vec![vec![0u128; s_max as usize + 1]; pick + 1];
    dp[0][0] = 1;
    for &r in doubled {
        for k in (0..pick).rev() {
            for s in 0..=(s_max - r) as usize {
                if dp[k][s] > 0 {
                    let add = dp[k][s];
                    dp[k + 1][s + r as usize] += add;
                }
            }
        }
    }
    // Deviation is measured on group a's sum. If we enumerated the
    // complement, a's sum is the grand total minus the subset sum; the
    // deviation |W - mu| is the same for a subset and its complement.
    let grand: u64 = doubled.iter().sum();
    let mu2_times2 = 2 * n as u64 * (total as u64 + 1);
    let dev = |w2: u64| (2 * w2 as i128 - mu2_times2 as i128).abs();
    let obs = dev(w2_obs);
    let mut count = 0u128;
    let mut all = 0u128;
    for (s, &c) in dp[pick].iter().enumerate() {
        if c == 0 {
            continue;
        }
        let w2_a = if pick == n { s as u64 } else { grand - s as u64 };
        all += c;
        if dev(w2_a) >= obs {
            count += c;
        }
    }
    count as f64 / all as f64
}

fn normal_rank_sum_p(n: usize, m: usize, tie_sizes: &[usize], w2_obs: u64) -> f64 {
    let (nf, mf) = (n as f64, m as f64);
    let total = nf + mf;
    let tie_term: f64 = tie_sizes
        .iter()
        .map(|&t| {
            let t = t as f64;
            t * t * t - t
        })
        .sum::<f64>()
        / (total * (total - 1.0));
    // Variance of the doubled rank sum is four times that of the midrank sum.
    let var2 = 4.0 * nf * mf / 12.0 * ((total + 1.0) - tie_term);
    if var2 <= 0.0 {
        return 1.0;
    }
    let mu2 = nf * (total + 1.0);
    // Doubled midranks are integral, so the lattice step is 1; the continuity
    // correction is half a step.
    let z = ((w2_obs as f64 - mu2).abs() - 0.5).max(0.0) / var2.sqrt();
    let normal = Normal::new(0.0, 1.0).unwrap();
    (2.0 * (1.0 - normal.cdf(z))).clamp(0.0, 1.0)
}

/// True when the closed intervals [a.0, a.1] and [b.0, b.1] do not overlap.
pub fn intervals_disjoint(a: (u64, u64), b: (u64, u64)) -> bool {
    a.1 < b.0 || b.1 < a.0
}

/// Geometric mean of strictly positive values.
pub fn geometric_mean(values: &[f64]) -> Result<f64> {
    if values.is_empty() {
        return Err(Error::InvalidInput("geometric mean of an empty set".into()));
    }
    if values.iter().any(|&v| !(v.is_finite() && v > 0.0)) {
        return Err(Error::InvalidInput("geometric mean requires finite positive values".into()));
    }
    let log_sum: f64 = values.iter().map(|v| v.ln()).sum();
    Ok((log_sum / values.len() as f64).exp())
}

/// Outcome of comparing search strategies on a shared task: the strategies in
/// ascending order of effectiveness with a rank-sum p-value between each
/// adjacent pair.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ComparisonVerdict {
    /// Strategy identifiers, least effective first.
    pub ordering: Vec<String>,
    /// p-values for adjacent pairs; `p_values[i]` compares `ordering[i]`
    /// against `ordering[i + 1]`.
    pub p_values: Vec<f64>,
    /// Whether each adjacent pair is separated at the threshold.
    pub significant: Vec<bool>,
    pub threshold: f64,
}

impl ComparisonVerdict {
    /// Orders `groups` by ascending median score and tests adjacent pairs. A
    /// pair is significant exactly when its p-value is below `threshold`.
    /// Groups with equal medians keep their input order.
    pub fn from_scores(groups: &[(String, Vec<f64>)], threshold: f64) -> Result<Self> {
        if groups.is_empty() {
            return Err(Error::InvalidInput("verdict needs at least one group".into()));
        }
        if !(threshold > 0.0 && threshold <= 1.0) {
            return Err(Error::InvalidInput(format!("p-value threshold {threshold} outside (0, 1]")));
        }
        for (name, scores) in groups {
            if scores.is_empty() {
                return Err(Error::InvalidInput(format!("group {name} has no scores")));
            }
        }
        let mut order: Vec<usize> = (0..groups.len()).collect();
        order.sort_by(|&x, &y| {
            median(&groups[x].1).partial_cmp(&median(&groups[y].1)).unwrap()
        });
        let mut p_values = Vec::new();
        let mut significant = Vec::new();
        for pair in order.windows(2) {
            let p = wilcoxon_rank_sum(&groups[pair[0]].1, &groups[pair[1]].1)?;
            significant.push(p < threshold);
            p_values.push(p);
        }
        Ok(ComparisonVerdict {
            ordering: order.iter().map(|&i| groups[i].0.clone()).collect(),
            p_values,
            significant,
            threshold,
        })
    }

    /// Most effective strategy (last in the ordering).
    pub fn winner(&self) -> &str {
        self.ordering.last().unwrap()
    }

    /// Compact rendering such as "SA<BO≈RAN".
    pub fn render(&self) -> String {
        let mut out = String::new();
        for (i, name) in self.ordering.iter().enumerate() {
            if i > 0 {
                out.push(if self.significant[i - 1] { '<' } else { '≈' });
            }
            out.push_str(name);
        }
        out
    }
}

fn median(values: &[f64]) -> f64 {
    let mut sorted = values.to_vec();
    sorted.sort_by(|a, b| a.partial_cmp(b).unwrap());
    sorted[nearest_rank(0.5, sorted.len()) - 1]
}
