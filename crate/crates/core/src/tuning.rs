//! Threshold selection: candidate thresholds from bucket crits, the smallest
//! maximizer of the absorbed mass over those candidates, Monte-Carlo averaging
//! over hash seeds, a high-probability load bound, and a budgeted search over
//! the heavy/CM memory split.

use std::collections::BTreeMap;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::analysis;
use crate::error::{Error, Result};
use crate::stream::{assign_buckets, ArrivalDistribution, BucketAssignment, BucketProfile};

/// Candidate threshold -> the (seed, bucket) pairs that generated it.
pub type Provenance = BTreeMap<u64, Vec<(u64, u32)>>;

/// Integer thresholds worth evaluating: one per nonempty bucket, deduplicated.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CandidateSet {
    pub values: Vec<u64>,
    pub provenance: Provenance,
}

/// One evaluated threshold.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CandidateScore {
    pub lambda: u64,
    pub g_hat: f64,
}

/// Winning memory split of a budgeted search.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BudgetPick {
    pub m1: u32,
    pub m2: u32,
    pub expected_error: f64,
}

/// One row of the budgeted search: a memory split with its tuned threshold.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GridRow {
    pub m1: u32,
    pub m2: u32,
    pub lambda: u64,
    pub g_hat: f64,
    /// Limiting noise-floor expectation (1 - g) / m2; the search minimizes it.
    pub expected_error: f64,
}

/// Outcome of a threshold search: the chosen threshold, its score, and the
/// full table it was chosen from. Budgeted searches also report the winning
/// memory split and the per-split table.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TuneResult {
    pub lambda_star: u64,
    pub g_at_star: f64,
    pub table: Vec<CandidateScore>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub budget: Option<BudgetPick>,
    #[serde(skip_serializing_if = "Vec::is_empty", default)]
    pub grid: Vec<GridRow>,
}

/// A nonempty bucket's candidate: the smallest integer strictly above its
/// top item's critical threshold.
fn bucket_candidate(bucket: &BucketProfile) -> Option<u64> {
    bucket.crit_lambda.map(|crit| crit.floor() as u64 + 1)
}

/// Collects the candidate thresholds of one assignment.
pub fn candidate_set(assignment: &BucketAssignment) -> Result<CandidateSet> {
    let mut provenance = Provenance::new();
    collect_candidates(assignment, &mut provenance);
    if provenance.is_empty() {
        return Err(Error::EmptyAssignment);
    }
    Ok(CandidateSet { values: provenance.keys().copied().collect(), provenance })
}

fn collect_candidates(assignment: &BucketAssignment, provenance: &mut Provenance) {
    for bucket in assignment.buckets() {
        if let Some(c) = bucket_candidate(bucket) {
            provenance.entry(c).or_default().push((assignment.seed(), bucket.index));
        }
    }
}

/// Smallest maximizer over a table sorted by ascending threshold.
fn pick_smallest_maximizer(table: &[CandidateScore]) -> (u64, f64) {
    debug_assert!(!table.is_empty());
    let mut best = &table[0];
    for row in &table[1..] {
        if row.g_hat > best.g_hat {
            best = row;
        }
    }
    (best.lambda, best.g_hat)
}

/// Optimal integer threshold for one fixed assignment: evaluates the absorbed
/// mass at every candidate and returns the smallest maximizer.
pub fn lambda_star(assignment: &BucketAssignment) -> Result<TuneResult> {
    let candidates = candidate_set(assignment)?;
    let table: Vec<CandidateScore> = candidates
        .values
        .iter()
        .map(|&lambda| {
            Ok(CandidateScore { lambda, g_hat: analysis::absorbed_mass_total(assignment, lambda as f64)? })
        })
        .collect::<Result<_>>()?;
    let (lambda_star, g_at_star) = pick_smallest_maximizer(&table);
    Ok(TuneResult { lambda_star, g_at_star, table, budget: None, grid: Vec::new() })
}

/// Optimal threshold under uniform arrivals: the fullest bucket's load.
pub fn lambda_star_uniform(assignment: &BucketAssignment) -> u64 {
    assignment.max_occupancy() as u64
}

/// Threshold maximizing the seed-averaged absorbed mass. Candidates are the
/// union over seeds; each seed's assignment is evaluated at every union
/// candidate and results are averaged in fixed seed order.
pub fn lambda_hat_star(dist: &ArrivalDistribution, m1: u32, seeds: &[u64]) -> Result<TuneResult> {
    lambda_hat_impl(dist, m1, seeds, false)
}

/// Debug variant searching every integer threshold up to the maximum load
/// seen across seeds, not just the candidate union.
pub fn lambda_hat_star_dense(dist: &ArrivalDistribution, m1: u32, seeds: &[u64]) -> Result<TuneResult> {
    lambda_hat_impl(dist, m1, seeds, true)
}

fn lambda_hat_impl(dist: &ArrivalDistribution, m1: u32, seeds: &[u64], dense: bool) -> Result<TuneResult> {
    if m1 == 0 {
        return Err(Error::invalid("m1", "need at least one heavy bucket to tune"));
    }
    if seeds.is_empty() {
        return Err(Error::invalid("seeds", "need at least one seed"));
    }
    // Pass 1: the candidate union (assignments are cheap to rebuild, so they
    // are not retained across passes).
    let mut provenance = Provenance::new();
    let mut max_load = 0usize;
    for &seed in seeds {
        let assignment = assign_buckets(dist, m1, seed)?;
        collect_candidates(&assignment, &mut provenance);
        max_load = max_load.max(assignment.max_occupancy());
    }
    if provenance.is_empty() {
        return Err(Error::EmptyAssignment);
    }
    let values: Vec<u64> = if dense {
        (1..=max_load as u64).collect()
    } else {
        provenance.keys().copied().collect()
    };
    // Pass 2: per-seed curves in parallel, then an ordered reduction so the
    // result does not depend on scheduling.
    let per_seed: Vec<Result<Vec<f64>>> = seeds
        .par_iter()
        .map(|&seed| {
            let assignment = assign_buckets(dist, m1, seed)?;
            values
                .iter()
                .map(|&lambda| analysis::absorbed_mass_total(&assignment, lambda as f64))
                .collect()
        })
        .collect();
    let mut sums = vec![0.0f64; values.len()];
    let mut comps = vec![0.0f64; values.len()];
    for curve in per_seed {
        for (j, g) in curve?.into_iter().enumerate() {
            // Neumaier step: seed counts reach the thousands and ties between
            // candidates must not be decided by accumulation noise.
            let s = sums[j] + g;
            comps[j] += if sums[j].abs() >= g.abs() { (sums[j] - s) + g } else { (g - s) + sums[j] };
            sums[j] = s;
        }
    }
    let n = seeds.len() as f64;
    let table: Vec<CandidateScore> = values
        .iter()
        .zip(sums.iter().zip(&comps))
        .map(|(&lambda, (&s, &c))| CandidateScore { lambda, g_hat: (s + c) / n })
        .collect();
    let (lambda_star, g_at_star) = pick_smallest_maximizer(&table);
    Ok(TuneResult { lambda_star, g_at_star, table, budget: None, grid: Vec::new() })
}

/// High-probability bound on the optimal threshold under uniform arrivals:
/// with probability at least 1 - delta over the bucket hash, the fullest
/// bucket's load stays below n/m1 + sqrt(2 (n/m1) ln(m1/delta)) + ln(m1/delta)/3.
pub fn hp_bound(n_items: u64, m1: u32, delta: f64) -> Result<f64> {
    if n_items == 0 {
        return Err(Error::invalid("n_items", "empty universe"));
    }
    if m1 == 0 {
        return Err(Error::invalid("m1", "need at least one bucket"));
    }
    if !delta.is_finite() || delta <= 0.0 || delta >= 1.0 {
        return Err(Error::invalid("delta", format!("{delta} outside (0,1)")));
    }
    let mean_load = n_items as f64 / m1 as f64;
    let log_term = (m1 as f64 / delta).ln();
    Ok(mean_load + (2.0 * mean_load * log_term).sqrt() + log_term / 3.0)
}

/// Inputs of the budgeted search over the heavy/CM memory split.
#[derive(Debug, Clone, Copy)]
pub struct GridSearchParams<'a> {
    pub dist: &'a ArrivalDistribution,
    /// Total memory in CM-cell units.
    pub budget: u64,
    /// Units one heavy bucket costs (id + two counters by default).
    pub cost_per_bucket: u64,
    pub d: u32,
    pub m1_grid: &'a [u32],
    pub seeds: &'a [u64],
    /// Search all integer thresholds instead of the candidate union.
    pub dense: bool,
}

/// Searches the m1 grid under a fixed memory budget: each split gets the CM
/// width the budget leaves, its threshold is tuned by seed-averaged search,
/// and splits are ranked by limiting expected error. Ties prefer the smaller
/// m1, then the smaller threshold.
pub fn grid_search(params: &GridSearchParams<'_>) -> Result<TuneResult> {
    if params.budget == 0 {
        return Err(Error::invalid("budget", "no memory to spend"));
    }
    if params.cost_per_bucket == 0 {
        return Err(Error::invalid("cost_per_bucket", "bucket cost must be positive"));
    }
    if params.d == 0 {
        return Err(Error::invalid("d", "need at least one row"));
    }
    if params.m1_grid.is_empty() {
        return Err(Error::invalid("m1_grid", "empty grid"));
    }
    let mut grid_points: Vec<u32> = params.m1_grid.to_vec();
    grid_points.sort_unstable();
    grid_points.dedup();

    let mut rows: Vec<GridRow> = Vec::new();
    let mut winner: Option<(GridRow, Vec<CandidateScore>)> = None;
    for &m1 in &grid_points {
        let heavy_cost = params.cost_per_bucket * m1 as u64;
        if heavy_cost >= params.budget {
            continue;
        }
        let width = (params.budget - heavy_cost) / params.d as u64;
        if width == 0 {
            continue;
        }
        let m2 = u32::try_from(width)
            .map_err(|_| Error::invalid("budget", "CM width exceeds u32"))?;
        let (lambda, g_hat, table) = if m1 == 0 {
            (1, 0.0, Vec::new())
        } else {
            let tuned = lambda_hat_impl(params.dist, m1, params.seeds, params.dense)?;
            (tuned.lambda_star, tuned.g_at_star, tuned.table)
        };
        let expected_error = analysis::expected_limiting_error(g_hat, m2);
        let row = GridRow { m1, m2, lambda, g_hat, expected_error };
        // Strict improvement only: ascending grid order already favors the
        // smaller m1 on ties, and lambda ties were settled inside the tuner.
        if winner.as_ref().is_none_or(|(w, _)| expected_error < w.expected_error) {
            winner = Some((row.clone(), table));
        }
        rows.push(row);
    }
    match winner {
        None => Err(Error::InfeasibleBudget {
            budget: params.budget,
            cost_per_bucket: params.cost_per_bucket,
            d: params.d,
        }),
        Some((w, table)) => Ok(TuneResult {
            lambda_star: w.lambda,
            g_at_star: w.g_hat,
            table,
            budget: Some(BudgetPick { m1: w.m1, m2: w.m2, expected_error: w.expected_error }),
            grid: rows,
        }),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn smallest_maximizer_on_plateau() {
        let table = vec![
            CandidateScore { lambda: 2, g_hat: 0.4 },
            CandidateScore { lambda: 3, g_hat: 0.7 },
            CandidateScore { lambda: 5, g_hat: 0.7 },
            CandidateScore { lambda: 9, g_hat: 0.1 },
        ];
        assert_eq!(pick_smallest_maximizer(&table), (3, 0.7));
    }

    #[test]
    fn candidate_of_singleton_bucket_is_one() {
        let b = BucketProfile::standalone(vec![0.3]).unwrap();
        assert_eq!(bucket_candidate(&b), Some(1));
    }
}
