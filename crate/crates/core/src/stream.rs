//! Arrival distributions over a dense item universe, seeded bucket
//! assignments, and reproducible i.i.d. stream sampling.

use crate::error::{Error, Result};
use crate::hash;
use crate::numeric::{kahan_sum, snap_near_integer};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

/// Items are dense 1-based indices; 0 never names an item.
pub type ItemId = u32;

#[derive(Clone, Debug, PartialEq, Serialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
enum DistKind {
    Zipf { alpha: f64 },
    Uniform,
    Explicit,
}

/// A fixed probability vector p over items 1..=n_items.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct ArrivalDistribution {
    #[serde(flatten)]
    kind: DistKind,
    n_items: usize,
    probs: Vec<f64>,
    #[serde(skip)]
    cumulative: Vec<f64>,
    // True when probs are nonincreasing in item id (zipf/uniform by
    // construction), letting assignments skip per-bucket sorting.
    #[serde(skip)]
    sorted_desc: bool,
}

impl ArrivalDistribution {
    /// probs[i] = i^(-alpha) / sum_j j^(-alpha), 1-based.
    pub fn zipf(n_items: usize, alpha: f64) -> Result<Self> {
        if !alpha.is_finite() || alpha < 0.0 {
            return Err(Error::invalid("alpha", format!("{alpha} is not a finite nonnegative real")));
        }
        let weights: Vec<f64> = (1..=n_items).map(|i| (i as f64).powf(-alpha)).collect();
        Self::build(DistKind::Zipf { alpha }, weights, true)
    }

    pub fn uniform(n_items: usize) -> Result<Self> {
        let weights = vec![1.0; n_items];
        Self::build(DistKind::Uniform, weights, true)
    }

    /// Accepts an unnormalized-but-close vector (sum within 1e-9 of 1) and
    /// renormalizes; every entry must be finite and strictly positive.
    pub fn explicit(probs: Vec<f64>) -> Result<Self> {
        let total = kahan_sum(probs.iter().copied());
        if (total - 1.0).abs() > 1e-9 {
            return Err(Error::invalid("probs", format!("sum {total} deviates from 1 by more than 1e-9")));
        }
        let sorted = probs.windows(2).all(|w| w[0] >= w[1]);
        Self::build(DistKind::Explicit, probs, sorted)
    }

    fn build(kind: DistKind, weights: Vec<f64>, sorted_desc: bool) -> Result<Self> {
        let n_items = weights.len();
        if n_items == 0 {
            return Err(Error::invalid("n_items", "universe must be nonempty"));
        }
        if n_items > u32::MAX as usize {
            return Err(Error::invalid("n_items", "universe exceeds item-id range"));
        }
        if weights.iter().any(|w| !w.is_finite() || *w <= 0.0) {
            return Err(Error::invalid("probs", "every probability must be finite and > 0"));
        }
        let total = kahan_sum(weights.iter().copied());
        let probs: Vec<f64> = weights.iter().map(|w| w / total).collect();
        let mut cumulative = Vec::with_capacity(n_items);
        let mut acc = 0.0;
        for &p in &probs {
            acc += p;
            cumulative.push(acc);
        }
        // Rounding must not leave an unreachable sliver at the top.
        cumulative[n_items - 1] = 1.0;
        Ok(Self { kind, n_items, probs, cumulative, sorted_desc })
    }

    pub fn n_items(&self) -> usize {
        self.n_items
    }

    pub fn probs(&self) -> &[f64] {
        &self.probs
    }

    pub fn prob(&self, item: ItemId) -> f64 {
        self.probs[(item - 1) as usize]
    }

    pub(crate) fn sorted_desc(&self) -> bool {
        self.sorted_desc
    }

    /// One inverse-CDF draw: first index whose cumulative mass exceeds u.
    #[inline]
    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> ItemId {
        let u: f64 = rng.random();
        let idx = self.cumulative.partition_point(|&c| c <= u);
        (idx + 1) as ItemId
    }
}

/// Per-bucket view of an assignment: members, their probabilities sorted
/// descending, total mass mu_b, and the critical threshold lambda_b^(1).
#[derive(Clone, Debug, Serialize)]
pub struct BucketProfile {
    pub index: u32,
    pub items: Vec<ItemId>,
    pub probs: Vec<f64>,
    /// mu_b = sum of member probabilities (compensated).
    pub mass: f64,
    /// min_i mu_b/p_i - 1; None for an empty bucket; 0 iff a singleton.
    pub crit_lambda: Option<f64>,
}

impl BucketProfile {
    pub fn n(&self) -> usize {
        self.items.len()
    }

    /// Critical threshold of the member at sorted position `pos`.
    pub fn item_crit(&self, pos: usize) -> f64 {
        if self.items.len() == 1 {
            return 0.0;
        }
        snap_near_integer(self.mass / self.probs[pos] - 1.0).max(0.0)
    }

    /// A free-standing bucket for oracle experiments: members 1..=k, with
    /// mass equal to the given (sub-)probabilities' total.
    pub fn standalone(probs: Vec<f64>) -> Result<Self> {
        if probs.is_empty() || probs.iter().any(|p| !p.is_finite() || *p <= 0.0) {
            return Err(Error::invalid("probs", "need a nonempty vector of positive reals"));
        }
        let mass = kahan_sum(probs.iter().copied());
        if mass > 1.0 + 1e-12 {
            return Err(Error::invalid("probs", format!("bucket mass {mass} exceeds 1")));
        }
        let mut order: Vec<usize> = (0..probs.len()).collect();
        order.sort_by(|&a, &b| probs[b].total_cmp(&probs[a]).then(a.cmp(&b)));
        let items: Vec<ItemId> = order.iter().map(|&i| (i + 1) as ItemId).collect();
        let probs: Vec<f64> = order.iter().map(|&i| probs[i]).collect();
        let mut b = BucketProfile { index: 0, items, probs, mass, crit_lambda: None };
        b.crit_lambda = Some(b.item_crit(0));
        Ok(b)
    }
}

/// Seeded hash partition of the universe into m1 buckets, with all derived
/// per-bucket profiles populated.
#[derive(Clone, Debug, Serialize)]
pub struct BucketAssignment {
    pub m1: u32,
    pub seed: u64,
    bucket_of: Vec<u32>,
    buckets: Vec<BucketProfile>,
}

pub fn assign_buckets(dist: &ArrivalDistribution, m1: u32, seed: u64) -> Result<BucketAssignment> {
    if m1 == 0 {
        return Err(Error::invalid("m1", "assignment needs at least one bucket"));
    }
    let n = dist.n_items();
    let mut bucket_of = Vec::with_capacity(n);
    let mut members: Vec<Vec<ItemId>> = vec![Vec::new(); m1 as usize];
    for item in 1..=n as u32 {
        let b = hash::slot(seed, item as u64, m1 as u64) as u32;
        bucket_of.push(b);
        members[b as usize].push(item);
    }
    let probs = dist.probs();
    let buckets = members
        .into_iter()
        .enumerate()
        .map(|(index, mut items)| {
            if !dist.sorted_desc() {
                items.sort_by(|&a, &b| {
                    probs[(b - 1) as usize]
                        .total_cmp(&probs[(a - 1) as usize])
                        .then(a.cmp(&b))
                });
            }
            let bprobs: Vec<f64> = items.iter().map(|&i| probs[(i - 1) as usize]).collect();
            let mass = kahan_sum(bprobs.iter().copied());
            let mut b = BucketProfile {
                index: index as u32,
                items,
                probs: bprobs,
                mass,
                crit_lambda: None,
            };
            if b.n() > 0 {
                b.crit_lambda = Some(b.item_crit(0));
            }
            b
        })
        .collect();
    Ok(BucketAssignment { m1, seed, bucket_of, buckets })
}

impl BucketAssignment {
    pub fn m1(&self) -> u32 {
        self.m1
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn n_items(&self) -> usize {
        self.bucket_of.len()
    }

    pub fn bucket_of(&self, item: ItemId) -> usize {
        self.bucket_of[(item - 1) as usize] as usize
    }

    pub fn buckets(&self) -> &[BucketProfile] {
        &self.buckets
    }

    pub fn occupancy(&self) -> Vec<usize> {
        self.buckets.iter().map(|b| b.n()).collect()
    }

    pub fn max_occupancy(&self) -> usize {
        self.buckets.iter().map(|b| b.n()).max().unwrap_or(0)
    }
}

/// A replayable i.i.d. stream: (dist, tau, seed) fixes the arrival sequence.
#[derive(Clone, Debug, Serialize)]
pub struct StreamSpec {
    pub dist: ArrivalDistribution,
    pub tau: u64,
    pub seed: u64,
}

impl StreamSpec {
    /// Lazy arrival iterator; tau can exceed what a materialized Vec allows.
    pub fn arrivals(&self) -> Arrivals<'_> {
        Arrivals {
            dist: &self.dist,
            rng: ChaCha8Rng::seed_from_u64(self.seed),
            remaining: self.tau,
        }
    }

    pub fn sample(&self) -> Vec<ItemId> {
        self.arrivals().collect()
    }
}

pub struct Arrivals<'a> {
    dist: &'a ArrivalDistribution,
    rng: ChaCha8Rng,
    remaining: u64,
}

impl Iterator for Arrivals<'_> {
    type Item = ItemId;

    #[inline]
    fn next(&mut self) -> Option<ItemId> {
        if self.remaining == 0 {
            return None;
        }
        self.remaining -= 1;
        Some(self.dist.sample(&mut self.rng))
    }

    fn size_hint(&self) -> (usize, Option<usize>) {
        let n = usize::try_from(self.remaining).unwrap_or(usize::MAX);
        (n, Some(n))
    }
}
