//! Experiment engine: single runs with metrics and optional invariant
//! checking, threshold sweeps against the theory curve, per-cell CM limit
//! checks, and brute-force Markov-chain oracles for the closed forms.

use rand::Rng;

use rayon::prelude::*;
use serde::Serialize;

use crate::analysis::{self, BucketClass};
use crate::error::{Error, Result};
use crate::hash::derive_seed;
use crate::numeric::{kahan_sum, quantile};
use crate::sketch::{InstrumentedSketch, Sketch, SketchConfig};
use crate::stream::{assign_buckets, ArrivalDistribution, BucketProfile, StreamSpec};

/// Identity checks run every this many arrivals on instrumented runs (plus
/// a mandatory final check).
const CHECK_EVERY: u64 = 1024;

/// Residual return mass tolerated when an oracle walk is declared escaped.
const ESCAPE_RESIDUAL: f64 = 1e-6;

/// Summary of one stream fed through one sketch.
#[derive(Debug, Clone, Serialize)]
pub struct RunMetrics {
    /// Fraction of arrivals retained in the heavy block.
    pub v_bar: f64,
    /// Mean relative estimation error over items that appeared.
    pub are: f64,
    /// Noise floor per arrival: the exact mean of the sampled error, over
    /// uniform column draws, divided by the stream length.
    pub err0_mean: f64,
    /// Elected item per bucket at the end, 0 when vacant.
    pub elected_final: Vec<u32>,
}

/// Streams `spec` through a sketch shaped by `config`. With `instrumented`
/// the run carries ground truth and validates the counter decomposition and
/// mass conservation periodically, aborting with a diagnostic snapshot on
/// the first violation.
pub fn run_once(config: &SketchConfig, spec: &StreamSpec, instrumented: bool) -> Result<RunMetrics> {
    if config.n_items as usize != spec.dist.n_items() {
        return Err(Error::invalid(
            "n_items",
            format!("sketch universe {} vs stream universe {}", config.n_items, spec.dist.n_items()),
        ));
    }
    if instrumented {
        let mut inst = InstrumentedSketch::new(config.clone())?;
        for (step, item) in spec.arrivals().enumerate() {
            inst.update(item);
            if (step as u64 + 1).is_multiple_of(CHECK_EVERY) {
                checked(&inst)?;
            }
        }
        checked(&inst)?;
        Ok(metrics_from(inst.sketch(), inst.truth().counts()))
    } else {
        let mut sketch = Sketch::new(config.clone())?;
        let mut counts = vec![0u64; config.n_items as usize];
        for item in spec.arrivals() {
            sketch.update(item);
            counts[item as usize - 1] += 1;
        }
        Ok(metrics_from(&sketch, &counts))
    }
}

fn checked(inst: &InstrumentedSketch) -> Result<()> {
    inst.check_identity().map_err(|e| {
        let snap = serde_json::to_string(&inst.sketch().snapshot())
            .unwrap_or_else(|_| "<unserializable>".into());
        Error::InvariantViolation(format!("at step {}: {e}; snapshot: {snap}", inst.sketch().t()))
    })
}

fn metrics_from(sketch: &Sketch, counts: &[u64]) -> RunMetrics {
    let t = sketch.t();
    let v_bar = sketch.v_bar();
    let are = kahan_sum(counts.iter().enumerate().filter(|(_, &n)| n > 0).map(|(idx, &n)| {
        let est = sketch.estimate(idx as u32 + 1);
        (est - n) as f64 / n as f64
    }));
    let present = counts.iter().filter(|&&n| n > 0).count();
    let are = if present == 0 { 0.0 } else { are / present as f64 };
    let err0_mean = if t == 0 { 0.0 } else { sketch.err0_expectation() / t as f64 };
    RunMetrics {
        v_bar,
        are,
        err0_mean,
        elected_final: (0..sketch.config().m1 as usize)
            .map(|b| sketch.elected(b).unwrap_or(0))
            .collect(),
    }
}

/// One threshold's theory value and across-run empirics.
#[derive(Debug, Clone, Serialize)]
pub struct SweepPoint {
    pub lambda: u64,
    pub g_theory: f64,
    pub vbar_mean: f64,
    pub vbar_stderr: f64,
    pub are_mean: f64,
    pub are_q1: f64,
    pub are_median: f64,
    pub are_q3: f64,
}

/// Theory curve vs empirical retained fraction over a threshold grid.
#[derive(Debug, Clone, Serialize)]
pub struct TheoryVsSim {
    pub points: Vec<SweepPoint>,
    /// Largest |g_theory - vbar_mean| over the grid.
    pub max_abs_dev: f64,
    pub mean_abs_dev: f64,
    pub n_runs: u32,
}

/// Sweep summary plus the per-run metrics behind it; `runs[i][k]` holds
/// threshold i, run k.
#[derive(Debug, Clone, Serialize)]
pub struct SweepDetail {
    pub summary: TheoryVsSim,
    pub runs: Vec<Vec<RunMetrics>>,
}

/// Sweep inputs: the bucket hash stays fixed, streams and column seeds are
/// redrawn per run from the master seed.
#[derive(Debug, Clone, Copy)]
pub struct SweepParams<'a> {
    pub dist: &'a ArrivalDistribution,
    pub m1: u32,
    pub m2: u32,
    pub d: u32,
    pub beta_seed: u64,
    pub tau: u64,
    pub n_runs: u32,
    pub master_seed: u64,
    pub lambdas: &'a [u64],
}

/// Runs every threshold on the same streams (one materialized stream per
/// run feeds one sketch per threshold) and aggregates against the theory
/// curve for the fixed bucket hash.
pub fn sweep_lambda(params: &SweepParams<'_>) -> Result<TheoryVsSim> {
    sweep_lambda_detailed(params).map(|d| d.summary)
}

/// Same sweep, keeping every run's metrics alongside the aggregates.
pub fn sweep_lambda_detailed(params: &SweepParams<'_>) -> Result<SweepDetail> {
    if params.n_runs < 2 {
        return Err(Error::invalid("n_runs", "need at least two runs for standard errors"));
    }
    if params.lambdas.is_empty() {
        return Err(Error::invalid("lambdas", "empty threshold grid"));
    }
    if params.m1 == 0 {
        return Err(Error::invalid("m1", "sweeping thresholds needs a heavy block"));
    }
    let n_items = u32::try_from(params.dist.n_items())
        .map_err(|_| Error::invalid("n_items", "universe exceeds u32"))?;
    let assignment = assign_buckets(params.dist, params.m1, params.beta_seed)?;
    let g_theory: Vec<f64> = params
        .lambdas
        .iter()
        .map(|&l| analysis::absorbed_mass_total(&assignment, l as f64))
        .collect::<Result<_>>()?;

    let stream_master = derive_seed(params.master_seed, 1);
    let cm_master = derive_seed(params.master_seed, 2);
    let per_run: Vec<Result<Vec<RunMetrics>>> = (0..params.n_runs as u64)
        .into_par_iter()
        .map(|k| {
            let spec = StreamSpec {
                dist: params.dist.clone(),
                tau: params.tau,
                seed: derive_seed(stream_master, k),
            };
            let arrivals = spec.sample();
            let mut counts = vec![0u64; n_items as usize];
            for &item in &arrivals {
                counts[item as usize - 1] += 1;
            }
            let cm_seed = derive_seed(cm_master, k);
            params
                .lambdas
                .iter()
                .map(|&lambda| {
                    let config = SketchConfig::new(
                        params.m1, params.m2, params.d, lambda, n_items, params.beta_seed, cm_seed,
                    );
                    let mut sketch = Sketch::new(config)?;
                    for &item in &arrivals {
                        sketch.update(item);
                    }
                    Ok(metrics_from(&sketch, &counts))
                })
                .collect()
        })
        .collect();

    let mut runs = vec![Vec::with_capacity(params.n_runs as usize); params.lambdas.len()];
    for run in per_run {
        for (j, m) in run?.into_iter().enumerate() {
            runs[j].push(m);
        }
    }
    let summary = aggregate_sweep(params.lambdas, &g_theory, &runs);
    Ok(SweepDetail { summary, runs })
}

/// Folds per-run metrics into the per-threshold summary; a single run gets
/// zero standard error and degenerate quartiles.
pub(crate) fn aggregate_sweep(
    lambdas: &[u64],
    g_theory: &[f64],
    runs: &[Vec<RunMetrics>],
) -> TheoryVsSim {
    let n = runs.first().map_or(0, Vec::len);
    let points: Vec<SweepPoint> = lambdas
        .iter()
        .enumerate()
        .map(|(j, &lambda)| {
            let vbars: Vec<f64> = runs[j].iter().map(|m| m.v_bar).collect();
            let ares: Vec<f64> = runs[j].iter().map(|m| m.are).collect();
            let mean = kahan_sum(vbars.iter().copied()) / n as f64;
            let stderr = if n < 2 {
                0.0
            } else {
                let var =
                    kahan_sum(vbars.iter().map(|v| (v - mean) * (v - mean))) / (n - 1) as f64;
                (var / n as f64).sqrt()
            };
            SweepPoint {
                lambda,
                g_theory: g_theory[j],
                vbar_mean: mean,
                vbar_stderr: stderr,
                are_mean: kahan_sum(ares.iter().copied()) / n as f64,
                are_q1: quantile(&ares, 0.25),
                are_median: quantile(&ares, 0.5),
                are_q3: quantile(&ares, 0.75),
            }
        })
        .collect();
    let devs: Vec<f64> = points.iter().map(|p| (p.g_theory - p.vbar_mean).abs()).collect();
    TheoryVsSim {
        max_abs_dev: devs.iter().copied().fold(0.0, f64::max),
        mean_abs_dev: kahan_sum(devs.iter().copied()) / devs.len() as f64,
        points,
        n_runs: n as u32,
    }
}

/// Steps above the start past which a walk with per-step return factor `r`
/// is declared escaped (missed-return mass below ESCAPE_RESIDUAL).
fn escape_levels(r: f64) -> u64 {
    if r <= 0.0 {
        1
    } else if r >= 1.0 {
        u64::MAX
    } else {
        ((ESCAPE_RESIDUAL.ln() / r.ln()).ceil() as u64).max(1)
    }
}

/// Empirical election frequencies from direct simulation of one bucket's
/// incumbent/score chain.
#[derive(Debug, Clone, Serialize)]
pub struct MarkovElectionReport {
    /// Absorption frequency per item, aligned with the bucket's item order,
    /// conditioned on resolved trials.
    pub frequencies: Vec<f64>,
    /// Fraction of trials that hit max_steps undecided.
    pub unresolved: f64,
    pub trials: u64,
    /// Escape level per item (score at which eviction is written off).
    pub escape_levels: Vec<u64>,
}

/// Simulates the bucket chain from the transition law: each step an arrival
/// lands in the bucket with probability mu_b; at score 0 it installs the
/// arriving item at score lambda, otherwise a match raises the score by
/// lambda and a mismatch lowers it by one. A trial resolves when the
/// incumbent's score clears its escape level, calibrated from the walk's
/// return probability so the missed-eviction mass is below 1e-6.
pub fn markov_election_oracle<R: Rng + ?Sized>(
    bucket: &BucketProfile,
    lambda: u64,
    n_trials: u64,
    max_steps: u64,
    rng: &mut R,
) -> Result<MarkovElectionReport> {
    if lambda == 0 {
        return Err(Error::invalid("lambda", "threshold must be at least 1"));
    }
    if n_trials == 0 {
        return Err(Error::invalid("n_trials", "need at least one trial"));
    }
    let n = bucket.n();
    if n == 0 {
        return Err(Error::EmptyAssignment);
    }
    let mu = bucket.mass;
    let mut cum = Vec::with_capacity(n);
    let mut acc = 0.0;
    for &p in &bucket.probs {
        acc += p;
        cum.push(acc);
    }
    let escapes: Vec<u64> = bucket
        .probs
        .iter()
        .map(|&p| Ok(escape_levels(analysis::return_prob(lambda as f64, mu / p)?)))
        .collect::<Result<_>>()?;

    let mut tally = vec![0u64; n];
    let mut unresolved = 0u64;
    for _ in 0..n_trials {
        let mut incumbent = usize::MAX;
        let mut level = 0u64;
        let mut resolved = false;
        for _ in 0..max_steps {
            let u: f64 = rng.random();
            if u >= mu {
                continue;
            }
            let arrival = cum.partition_point(|&c| c <= u).min(n - 1);
            if level == 0 {
                incumbent = arrival;
                level = lambda;
            } else if arrival == incumbent {
                level += lambda;
            } else {
                level -= 1;
            }
            if level >= escapes[incumbent] {
                tally[incumbent] += 1;
                resolved = true;
                break;
            }
        }
        if !resolved {
            unresolved += 1;
        }
    }
    let resolved_trials = n_trials - unresolved;
    if resolved_trials == 0 {
        return Err(Error::invalid("max_steps", "no trial resolved; widen max_steps"));
    }
    Ok(MarkovElectionReport {
        frequencies: tally.iter().map(|&c| c as f64 / resolved_trials as f64).collect(),
        unresolved: unresolved as f64 / n_trials as f64,
        trials: n_trials,
        escape_levels: escapes,
    })
}

/// Empirical return probability of the score walk.
#[derive(Debug, Clone, Serialize)]
pub struct WalkReport {
    /// Fraction of resolved trials that returned to 0.
    pub empirical: f64,
    pub unresolved: f64,
    pub trials: u64,
    pub start_level: u64,
    pub escape_level: u64,
}

/// Simulates the score walk from `start_level` (stay with probability
/// 1 - mu, up by lambda with probability p, down one otherwise) until it
/// returns to 0 or clears the escape level derived from the closed-form
/// return probability.
pub fn walk_return_oracle<R: Rng + ?Sized>(
    p: f64,
    mu: f64,
    lambda: u64,
    start_level: u64,
    n_trials: u64,
    max_steps: u64,
    rng: &mut R,
) -> Result<WalkReport> {
    if !(p > 0.0 && p <= mu && mu <= 1.0) {
        return Err(Error::invalid("p", format!("need 0 < p <= mu <= 1, got p={p} mu={mu}")));
    }
    if lambda == 0 {
        return Err(Error::invalid("lambda", "threshold must be at least 1"));
    }
    if start_level == 0 {
        return Err(Error::invalid("start_level", "walk starts above 0"));
    }
    if n_trials == 0 {
        return Err(Error::invalid("n_trials", "need at least one trial"));
    }
    let r1 = analysis::return_prob(lambda as f64, mu / p)?;
    let escape_level = start_level.saturating_add(escape_levels(r1));
    let mut returns = 0u64;
    let mut unresolved = 0u64;
    for _ in 0..n_trials {
        let mut level = start_level;
        let mut resolved = false;
        for _ in 0..max_steps {
            let u: f64 = rng.random();
            if u >= mu {
                continue;
            }
            if u < p {
                level += lambda;
            } else {
                level -= 1;
            }
            if level == 0 {
                returns += 1;
                resolved = true;
                break;
            }
            if level >= escape_level {
                resolved = true;
                break;
            }
        }
        if !resolved {
            unresolved += 1;
        }
    }
    let resolved_trials = n_trials - unresolved;
    if resolved_trials == 0 {
        return Err(Error::invalid("max_steps", "no trial resolved; widen max_steps"));
    }
    Ok(WalkReport {
        empirical: returns as f64 / resolved_trials as f64,
        unresolved: unresolved as f64 / n_trials as f64,
        trials: n_trials,
        start_level,
        escape_level,
    })
}

/// Inputs of the per-cell CM limit check (depth fixed at 1).
#[derive(Debug, Clone, Copy)]
pub struct CellLimitParams<'a> {
    pub dist: &'a ArrivalDistribution,
    pub m1: u32,
    pub m2: u32,
    pub lambda: u64,
    pub beta_seed: u64,
    pub tau: u64,
    pub n_runs: u32,
    pub master_seed: u64,
}

/// Across-run deviation of each CM cell's per-arrival rate from its limit.
#[derive(Debug, Clone, Serialize)]
pub struct CellLimitReport {
    pub max_abs_dev: f64,
    pub mean_abs_dev: f64,
    /// Per cell: |mean over runs of (Y_c/tau - limit_c)|.
    pub dev: Vec<f64>,
    /// Per cell: standard error of that mean.
    pub stderr: Vec<f64>,
    pub n_runs: u32,
}

/// Compares each CM cell's rate Y_c/tau against its limit: the mass hashing
/// into the cell minus, for buckets that retain an item forever, the final
/// incumbent's mass. The column hash is fixed; streams vary per run.
pub fn cm_cell_limit_check(params: &CellLimitParams<'_>) -> Result<CellLimitReport> {
    if params.n_runs < 2 {
        return Err(Error::invalid("n_runs", "need at least two runs for standard errors"));
    }
    if params.tau == 0 {
        return Err(Error::invalid("tau", "empty stream"));
    }
    let n_items = u32::try_from(params.dist.n_items())
        .map_err(|_| Error::invalid("n_items", "universe exceeds u32"))?;
    let cm_seed = derive_seed(params.master_seed, 2);
    let config = SketchConfig::new(
        params.m1, params.m2, 1, params.lambda, n_items, params.beta_seed, cm_seed,
    );
    config.validate()?;
    let probe = Sketch::new(config.clone())?;
    let m2 = params.m2 as usize;
    // Mass arriving at each cell, before any heavy-block interception.
    let mut base = vec![0.0f64; m2];
    for item in 1..=n_items {
        base[probe.cm_col(0, item)] += params.dist.prob(item);
    }
    // Buckets whose incumbent stabilizes: only they keep mass out of the CM
    // in the limit.
    let plus = if params.m1 > 0 {
        let assignment = assign_buckets(params.dist, params.m1, params.beta_seed)?;
        analysis::classify_buckets(&assignment, params.lambda as f64)
            .into_iter()
            .map(|c| c == BucketClass::Plus)
            .collect()
    } else {
        Vec::new()
    };

    let stream_master = derive_seed(params.master_seed, 1);
    let per_run: Vec<Result<Vec<f64>>> = (0..params.n_runs as u64)
        .into_par_iter()
        .map(|k| {
            let spec = StreamSpec {
                dist: params.dist.clone(),
                tau: params.tau,
                seed: derive_seed(stream_master, k),
            };
            let mut sketch = Sketch::new(config.clone())?;
            for item in spec.arrivals() {
                sketch.update(item);
            }
            let mut limit = base.clone();
            for (b, &is_plus) in plus.iter().enumerate() {
                if is_plus {
                    if let Some(incumbent) = sketch.elected(b) {
                        limit[sketch.cm_col(0, incumbent)] -= params.dist.prob(incumbent);
                    }
                }
            }
            let tau = params.tau as f64;
            Ok(sketch.cm_row(0).iter().zip(&limit).map(|(&y, &l)| y as f64 / tau - l).collect())
        })
        .collect();

    let n = params.n_runs as usize;
    let mut cell_diffs = vec![Vec::with_capacity(n); m2];
    for run in per_run {
        for (c, dval) in run?.into_iter().enumerate() {
            cell_diffs[c].push(dval);
        }
    }
    let mut dev = Vec::with_capacity(m2);
    let mut stderr = Vec::with_capacity(m2);
    for diffs in &cell_diffs {
        let mean = kahan_sum(diffs.iter().copied()) / n as f64;
        let var = kahan_sum(diffs.iter().map(|x| (x - mean) * (x - mean))) / (n - 1) as f64;
        dev.push(mean.abs());
        stderr.push((var / n as f64).sqrt());
    }
    Ok(CellLimitReport {
        max_abs_dev: dev.iter().copied().fold(0.0, f64::max),
        mean_abs_dev: kahan_sum(dev.iter().copied()) / m2 as f64,
        dev,
        stderr,
        n_runs: params.n_runs,
    })
}
