//! The streaming counter itself: a heavy block of elected-item buckets in
//! front of a count-min matrix, plus an instrumented variant that carries
//! exact ground truth for invariant checking.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::hash;
use crate::stream::ItemId;

/// Shape and seeding of one sketch instance.
///
/// `m1 = 0` disables the heavy block entirely; every update then feeds the
/// count-min matrix directly.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SketchConfig {
    /// Heavy-block bucket count (0 for the plain count-min baseline).
    pub m1: u32,
    /// Columns per count-min row.
    pub m2: u32,
    /// Count-min rows.
    pub d: u32,
    /// Eviction threshold: a challenger must see `lambda` deflections per
    /// retained arrival before the incumbent is flushed.
    pub lambda: u64,
    /// Universe size; item ids are `1..=n_items`.
    pub n_items: u32,
    /// Seed for the item-to-bucket map.
    pub beta_seed: u64,
    /// Column-hash seed per count-min row; length must equal `d`.
    pub cm_seeds: Vec<u64>,
}

impl SketchConfig {
    /// Builds a config whose per-row column seeds are derived from one
    /// master seed.
    pub fn new(m1: u32, m2: u32, d: u32, lambda: u64, n_items: u32, beta_seed: u64, cm_seed: u64) -> Self {
        let cm_seeds = (0..d as u64).map(|l| hash::derive_seed(cm_seed, l)).collect();
        Self { m1, m2, d, lambda, n_items, beta_seed, cm_seeds }
    }

    pub fn validate(&self) -> Result<()> {
        if self.m2 == 0 {
            return Err(Error::invalid("m2", "need at least one column"));
        }
        if self.d == 0 {
            return Err(Error::invalid("d", "need at least one row"));
        }
        if self.lambda == 0 {
            return Err(Error::invalid("lambda", "threshold must be at least 1"));
        }
        if self.n_items == 0 {
            return Err(Error::invalid("n_items", "empty universe"));
        }
        if self.cm_seeds.len() != self.d as usize {
            return Err(Error::invalid("cm_seeds", format!("need one seed per row, got {} for d = {}", self.cm_seeds.len(), self.d)));
        }
        Ok(())
    }
}

/// Serializable full state of a sketch; `cm` is row-major `d * m2`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SketchSnapshot {
    pub config: SketchConfig,
    pub t: u64,
    /// Elected item per bucket, 0 when vacant.
    pub elected: Vec<u32>,
    pub v_plus: Vec<u64>,
    pub v_minus: Vec<u64>,
    pub cm: Vec<u64>,
}

#[derive(Debug, Clone)]
pub struct Sketch {
    config: SketchConfig,
    /// Elected item per bucket; 0 is the vacancy sentinel (ids are 1-based).
    elected: Vec<u32>,
    v_plus: Vec<u64>,
    v_minus: Vec<u64>,
    /// Row-major d x m2 counter matrix.
    cm: Vec<u64>,
    t: u64,
}

impl Sketch {
    pub fn new(config: SketchConfig) -> Result<Self> {
        config.validate()?;
        let m1 = config.m1 as usize;
        let cells = config.d as usize * config.m2 as usize;
        Ok(Self {
            elected: vec![0; m1],
            v_plus: vec![0; m1],
            v_minus: vec![0; m1],
            cm: vec![0; cells],
            t: 0,
            config,
        })
    }

    pub fn config(&self) -> &SketchConfig {
        &self.config
    }

    /// Arrivals processed so far.
    pub fn t(&self) -> u64 {
        self.t
    }

    /// Bucket index an item hashes to. Requires `m1 > 0`.
    pub fn bucket_of(&self, item: ItemId) -> usize {
        debug_assert!(self.config.m1 > 0);
        hash::slot(self.config.beta_seed, item as u64, self.config.m1 as u64) as usize
    }

    /// Column an item hashes to in a given count-min row.
    pub fn cm_col(&self, row: usize, item: ItemId) -> usize {
        hash::slot(self.config.cm_seeds[row], item as u64, self.config.m2 as u64) as usize
    }

    pub fn elected(&self, bucket: usize) -> Option<ItemId> {
        match self.elected[bucket] {
            0 => None,
            id => Some(id),
        }
    }

    pub fn v_plus(&self) -> &[u64] {
        &self.v_plus
    }

    pub fn v_minus(&self) -> &[u64] {
        &self.v_minus
    }

    pub fn cm_row(&self, row: usize) -> &[u64] {
        let m2 = self.config.m2 as usize;
        &self.cm[row * m2..(row + 1) * m2]
    }

    #[inline]
    fn cm_add(&mut self, item: ItemId, k: u64) {
        let m2 = self.config.m2 as usize;
        for l in 0..self.config.cm_seeds.len() {
            let c = hash::slot(self.config.cm_seeds[l], item as u64, self.config.m2 as u64) as usize;
            self.cm[l * m2 + c] += k;
        }
    }

    /// Feeds one arrival through the three-case update rule.
    #[inline]
    pub fn update(&mut self, item: ItemId) {
        debug_assert!(item >= 1 && item <= self.config.n_items, "item {item} outside universe");
        self.t += 1;
        if self.config.m1 == 0 {
            self.cm_add(item, 1);
            return;
        }
        let b = self.bucket_of(item);
        let incumbent = self.elected[b];
        if incumbent == item || incumbent == 0 {
            self.elected[b] = item;
            self.v_plus[b] += 1;
            return;
        }
        // Challenger. Deflect while the incumbent retains slack, evict once
        // the deflection budget lambda * V+ is spent.
        let budget = self.config.lambda * self.v_plus[b];
        debug_assert!(budget >= self.v_minus[b], "deflection counter overran its budget");
        if budget > self.v_minus[b] {
            self.v_minus[b] += 1;
            self.cm_add(item, 1);
        } else {
            let flushed = self.v_plus[b];
            self.cm_add(incumbent, flushed);
            self.elected[b] = item;
            self.v_plus[b] = 1;
            self.v_minus[b] = 0;
        }
    }

    /// Point estimate for one item; never undercounts.
    pub fn estimate(&self, item: ItemId) -> u64 {
        assert!(item >= 1 && item <= self.config.n_items, "item {item} outside universe");
        let mut est = u64::MAX;
        for l in 0..self.config.d as usize {
            let c = self.cm_col(l, item);
            est = est.min(self.cm_row(l)[c]);
        }
        if self.config.m1 > 0 {
            let b = self.bucket_of(item);
            if self.elected[b] == item {
                est += self.v_plus[b];
            }
        }
        est
    }

    /// Total retained count across buckets.
    pub fn heavy_mass(&self) -> u64 {
        self.v_plus.iter().sum()
    }

    /// Fraction of the stream absorbed by the heavy block (0 when empty).
    pub fn v_bar(&self) -> f64 {
        if self.t == 0 {
            0.0
        } else {
            self.heavy_mass() as f64 / self.t as f64
        }
    }

    /// Noise floor read at independently uniform columns, one per row.
    pub fn sample_err0<R: Rng + ?Sized>(&self, rng: &mut R) -> u64 {
        let m2 = self.config.m2 as usize;
        (0..self.config.d as usize)
            .map(|l| self.cm_row(l)[rng.random_range(0..m2)])
            .min()
            .unwrap_or(0)
    }

    /// Exact expectation of `sample_err0` over the uniform column draws.
    ///
    /// Uses the tail identity E[min] = sum over y of P(every row cell > y),
    /// with each row's survival counts read off its sorted copy. For d = 1
    /// this is the plain row average, computed exactly from integers.
    pub fn err0_expectation(&self) -> f64 {
        let m2 = self.config.m2 as usize;
        let d = self.config.d as usize;
        if d == 1 {
            let row: u64 = self.cm_row(0).iter().sum();
            return row as f64 / m2 as f64;
        }
        let mut sorted: Vec<Vec<u64>> = (0..d).map(|l| self.cm_row(l).to_vec()).collect();
        for row in &mut sorted {
            row.sort_unstable();
        }
        let max_y = self.cm.iter().copied().max().unwrap_or(0);
        let mut ptr = vec![0usize; d];
        let mut expect = 0.0;
        for y in 0..max_y {
            let mut prod = 1.0;
            for l in 0..d {
                while ptr[l] < m2 && sorted[l][ptr[l]] <= y {
                    ptr[l] += 1;
                }
                prod *= (m2 - ptr[l]) as f64 / m2 as f64;
            }
            if prod == 0.0 {
                break;
            }
            expect += prod;
        }
        expect
    }

    pub fn snapshot(&self) -> SketchSnapshot {
        SketchSnapshot {
            config: self.config.clone(),
            t: self.t,
            elected: self.elected.clone(),
            v_plus: self.v_plus.clone(),
            v_minus: self.v_minus.clone(),
            cm: self.cm.clone(),
        }
    }

    pub fn from_snapshot(snap: SketchSnapshot) -> Result<Self> {
        snap.config.validate()?;
        let m1 = snap.config.m1 as usize;
        let cells = snap.config.d as usize * snap.config.m2 as usize;
        if snap.elected.len() != m1 || snap.v_plus.len() != m1 || snap.v_minus.len() != m1 {
            return Err(Error::invalid("snapshot", "bucket arrays disagree with m1"));
        }
        if snap.cm.len() != cells {
            return Err(Error::invalid("snapshot", "cm length disagrees with d * m2"));
        }
        for (b, &id) in snap.elected.iter().enumerate() {
            if id > snap.config.n_items {
                return Err(Error::invalid("snapshot", format!("bucket {b} elects unknown item {id}")));
            }
            if id == 0 && (snap.v_plus[b] != 0 || snap.v_minus[b] != 0) {
                return Err(Error::invalid("snapshot", format!("bucket {b} vacant but counters nonzero")));
            }
        }
        Ok(Self {
            elected: snap.elected,
            v_plus: snap.v_plus,
            v_minus: snap.v_minus,
            cm: snap.cm,
            t: snap.t,
            config: snap.config,
        })
    }

    /// Fault injection for identity-check tests: bump one CM cell.
    pub fn corrupt_cm_cell(&mut self, row: usize, col: usize, delta: u64) {
        let m2 = self.config.m2 as usize;
        self.cm[row * m2 + col] += delta;
    }

    /// Fault injection for identity-check tests: bump one retained counter.
    pub fn corrupt_v_plus(&mut self, bucket: usize, delta: u64) {
        self.v_plus[bucket] += delta;
    }
}

/// Exact per-item counts and eviction bookkeeping, maintained alongside a
/// sketch to make its internal state externally checkable.
#[derive(Debug, Clone)]
pub struct GroundTruth {
    counts: Vec<u64>,
    /// Step at which the current incumbent's predecessor was flushed,
    /// i.e. one before the incumbent's electing arrival.
    last_evict: Vec<u64>,
    /// Incumbent's exact count at that step.
    count_at_evict: Vec<u64>,
    /// Plain CM fed the whole stream, same column seeds as the sketch.
    shadow_cm: Vec<u64>,
    t: u64,
}

impl GroundTruth {
    fn new(config: &SketchConfig) -> Self {
        Self {
            counts: vec![0; config.n_items as usize],
            last_evict: vec![0; config.m1 as usize],
            count_at_evict: vec![0; config.m1 as usize],
            shadow_cm: vec![0; config.d as usize * config.m2 as usize],
            t: 0,
        }
    }

    pub fn t(&self) -> u64 {
        self.t
    }

    pub fn counts(&self) -> &[u64] {
        &self.counts
    }

    pub fn count(&self, item: ItemId) -> u64 {
        self.counts[item as usize - 1]
    }

    pub fn last_evict(&self) -> &[u64] {
        &self.last_evict
    }

    pub fn count_at_evict(&self) -> &[u64] {
        &self.count_at_evict
    }
}

/// A sketch paired with ground truth, updated in lockstep.
#[derive(Debug, Clone)]
pub struct InstrumentedSketch {
    sketch: Sketch,
    truth: GroundTruth,
}

impl InstrumentedSketch {
    pub fn new(config: SketchConfig) -> Result<Self> {
        let truth = GroundTruth::new(&config);
        Ok(Self { sketch: Sketch::new(config)?, truth })
    }

    pub fn sketch(&self) -> &Sketch {
        &self.sketch
    }

    /// Mutable access, intended for fault-injection tests.
    pub fn sketch_mut(&mut self) -> &mut Sketch {
        &mut self.sketch
    }

    pub fn truth(&self) -> &GroundTruth {
        &self.truth
    }

    pub fn update(&mut self, item: ItemId) {
        let watched = (self.sketch.config.m1 > 0).then(|| {
            let b = self.sketch.bucket_of(item);
            (b, self.sketch.elected[b])
        });
        self.sketch.update(item);
        self.truth.t += 1;
        self.truth.counts[item as usize - 1] += 1;
        let m2 = self.sketch.config.m2 as usize;
        for l in 0..self.sketch.config.d as usize {
            let c = self.sketch.cm_col(l, item);
            self.truth.shadow_cm[l * m2 + c] += 1;
        }
        if let Some((b, before)) = watched {
            if self.sketch.elected[b] != before {
                // The arriving item took over this step; everything it
                // counted before now lives in the CM.
                self.truth.last_evict[b] = self.truth.t - 1;
                self.truth.count_at_evict[b] = self.truth.counts[item as usize - 1] - 1;
            }
        }
    }

    /// Checks the finite-time decomposition of the sketch against ground
    /// truth: each retained counter equals the incumbent's count since its
    /// election, every CM cell equals the shadow cell minus the retained
    /// mass of incumbents hashing there, and every row conserves mass.
    /// Reports the first violating coordinate.
    pub fn check_identity(&self) -> Result<()> {
        let cfg = &self.sketch.config;
        let m1 = cfg.m1 as usize;
        let m2 = cfg.m2 as usize;
        let d = cfg.d as usize;
        let fail = |msg: String| Err(Error::InvariantViolation(msg));

        if self.sketch.t != self.truth.t {
            return fail(format!("t: sketch {} vs truth {}", self.sketch.t, self.truth.t));
        }

        // Retained counters.
        let mut retained = vec![0u64; m1];
        for (b, slot) in retained.iter_mut().enumerate() {
            let id = self.sketch.elected[b];
            if id == 0 {
                if self.sketch.v_plus[b] != 0 || self.sketch.v_minus[b] != 0 {
                    return fail(format!("bucket {b}: vacant but counters nonzero"));
                }
                continue;
            }
            let since_evict = self.truth.counts[id as usize - 1] - self.truth.count_at_evict[b];
            if self.sketch.v_plus[b] != since_evict {
                return fail(format!(
                    "bucket {b}: v_plus {} but item {} gained {} since its election",
                    self.sketch.v_plus[b], id, since_evict
                ));
            }
            *slot = since_evict;
        }

        // CM cells: shadow minus retained mass of incumbents in each column.
        for l in 0..d {
            let mut corrections = vec![0u64; m2];
            for (b, &r) in retained.iter().enumerate() {
                let id = self.sketch.elected[b];
                if id != 0 {
                    corrections[self.sketch.cm_col(l, id)] += r;
                }
            }
            for (c, &corr) in corrections.iter().enumerate() {
                let shadow = self.truth.shadow_cm[l * m2 + c];
                let expect = shadow - corr.min(shadow);
                if corr > shadow {
                    return fail(format!("cell ({l},{c}): corrections exceed shadow count"));
                }
                let got = self.sketch.cm_row(l)[c];
                if got != expect {
                    return fail(format!("cell ({l},{c}): cm {got}, shadow {shadow} less retained {corr} gives {expect}"));
                }
            }
        }

        // Per-row mass conservation.
        let heavy = self.sketch.heavy_mass();
        for l in 0..d {
            let row: u64 = self.sketch.cm_row(l).iter().sum();
            if row + heavy != self.sketch.t {
                return fail(format!(
                    "row {l}: cm mass {row} plus retained {heavy} is not t {}",
                    self.sketch.t
                ));
            }
        }
        Ok(())
    }

    /// Checks the estimator sandwich on every item: the estimate never
    /// undercounts, and its excess never exceeds the CM floor at the item's
    /// own columns.
    pub fn check_estimate_bounds(&self) -> Result<()> {
        for item in 1..=self.sketch.config.n_items {
            let est = self.sketch.estimate(item);
            let n = self.truth.count(item);
            if est < n {
                return Err(Error::InvariantViolation(format!(
                    "item {item}: estimate {est} undercounts true {n}"
                )));
            }
            let floor = (0..self.sketch.config.d as usize)
                .map(|l| self.sketch.cm_row(l)[self.sketch.cm_col(l, item)])
                .min()
                .unwrap_or(0);
            if est - n > floor {
                return Err(Error::InvariantViolation(format!(
                    "item {item}: excess {} exceeds its CM floor {floor}",
                    est - n
                )));
            }
        }
        Ok(())
    }
}
