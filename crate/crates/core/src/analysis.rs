//! Limiting-regime analysis of the heavy block: per-item election
//! probabilities, bucket classes, the absorbed probability mass g, and the
//! expected limiting counting error.
//!
//! Each occupied bucket behaves like an absorbing Markov chain; whether an
//! item can be elected forever reduces to the return probability of a
//! lazy random walk, which is a root of a truncated-geometric-series
//! equation. Everything here is a pure function of the distribution-level
//! bucket profiles. Real-valued thresholds are accepted throughout; the
//! integer restriction applies only where a sketch parameter is selected.

use crate::error::{Error, Result};
use crate::numeric::kahan_sum;
use crate::stream::{BucketAssignment, BucketProfile, ItemId};
use serde::Serialize;

/// Closed form of the truncated geometric series sum_{k=0}^{lambda} x^k,
/// extended to real lambda as (x^(lambda+1) - 1)/(x - 1); strictly
/// increasing in x on [0, 1], with the limit lambda+1 substituted at 1.
pub fn geom_series(x: f64, lambda: f64) -> f64 {
    debug_assert!((0.0..=1.0).contains(&x), "x={x} outside [0,1]");
    debug_assert!(lambda > 0.0 && lambda.is_finite());
    let u = x - 1.0;
    if u == 0.0 {
        return lambda + 1.0;
    }
    let e = lambda + 1.0;
    // When x^e lands near 1 the direct power loses most of the numerator to
    // cancellation; expm1/ln_1p keeps full relative precision there, which
    // the root finder needs: barely supercritical parameters put the root
    // within an ulp or two of 1.
    let num = if e * u.abs() < 0.5 { f64::exp_m1(e * f64::ln_1p(u)) } else { pow_real(x, e) - 1.0 };
    num / u
}

/// x^e for x in [0,1]; exact integer exponents go through powi.
#[inline]
fn pow_real(x: f64, e: f64) -> f64 {
    if e.fract() == 0.0 && e.abs() < 2_147_483_000.0 {
        x.powi(e as i32)
    } else {
        x.powf(e)
    }
}

/// Return probability of the bucket walk one level above 0: 1 in the
/// recurrent regime lambda <= z - 1, otherwise the unique root of
/// geom_series(., lambda) = z in [0, 1). z is the mass ratio mu_b/p_i.
pub fn return_prob(lambda: f64, z: f64) -> Result<f64> {
    if !(lambda.is_finite() && lambda > 0.0) {
        return Err(Error::invalid("lambda", format!("{lambda} is not a positive real")));
    }
    if !(z.is_finite() && z >= 1.0) {
        return Err(Error::invalid("z", format!("{z} is below 1 (z = mu_b/p_i >= 1)")));
    }
    if lambda <= z - 1.0 {
        return Ok(1.0);
    }
    if z == 1.0 {
        return Ok(0.0);
    }
    // Bisection: geom_series(0) = 1 <= z < lambda + 1 = geom_series(1), and
    // the kernel is strictly increasing, so the bracket never degenerates.
    // Runs to float exhaustion (~55 halvings) within the iteration cap; the
    // 1e-12 interval tolerance is always reached.
    let mut lo = 0.0f64;
    let mut hi = 1.0f64;
    for _ in 0..200 {
        let mid = 0.5 * (lo + hi);
        if mid <= lo || mid >= hi {
            break;
        }
        if geom_series(mid, lambda) < z {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    let root = 0.5 * (lo + hi);
    let residual = (geom_series(root, lambda) - z).abs();
    if residual > 1e-10 {
        return Err(Error::NoConvergence { lambda, z, residual });
    }
    Ok(root)
}

/// Probability that a freshly elected item at level lambda is never evicted:
/// 1 - r^lambda, positive exactly when lambda > z - 1.
pub fn absorption_weight(lambda: f64, z: f64) -> Result<f64> {
    let r = return_prob(lambda, z)?;
    if r == 0.0 {
        return Ok(1.0);
    }
    // exp(lambda ln r) stays stable for large real lambda where repeated
    // multiplication would not.
    Ok(1.0 - (lambda * r.ln()).exp())
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum BucketClass {
    /// Some item is eventually elected forever (crit < lambda, or singleton).
    Plus,
    /// Occupied, but elections never settle.
    Minus,
    /// No items hash here.
    Empty,
}

pub fn classify_bucket(bucket: &BucketProfile, lambda: f64) -> BucketClass {
    match bucket.crit_lambda {
        None => BucketClass::Empty,
        Some(_) if bucket.n() == 1 => BucketClass::Plus,
        Some(crit) if crit < lambda => BucketClass::Plus,
        Some(_) => BucketClass::Minus,
    }
}

pub fn classify_buckets(assignment: &BucketAssignment, lambda: f64) -> Vec<BucketClass> {
    assignment.buckets().iter().map(|b| classify_bucket(b, lambda)).collect()
}

/// Election probabilities a_i aligned with the bucket's sorted members.
/// Items at or below their critical threshold get exactly 0; on a MINUS
/// bucket the whole vector is 0; a singleton gets 1.
pub fn election_probs(bucket: &BucketProfile, lambda: f64) -> Result<Vec<f64>> {
    if bucket.n() == 0 {
        return Err(Error::invalid("bucket", "election probabilities need a nonempty bucket"));
    }
    if bucket.n() == 1 {
        return Ok(vec![1.0]);
    }
    let n = bucket.n();
    let mut out = vec![0.0; n];
    if classify_bucket(bucket, lambda) != BucketClass::Plus {
        return Ok(out);
    }
    let mut weights = vec![0.0; n];
    let mut total = 0.0;
    // Members are probability-descending, so critical thresholds ascend and
    // the active prefix is contiguous.
    for (pos, slot) in weights.iter_mut().enumerate() {
        if bucket.item_crit(pos) >= lambda {
            break;
        }
        let z = bucket.mass / bucket.probs[pos];
        let w = bucket.probs[pos] * absorption_weight(lambda, z)?;
        *slot = w;
        total += w;
    }
    if total > 0.0 {
        for pos in 0..n {
            out[pos] = weights[pos] / total;
        }
    }
    Ok(out)
}

#[derive(Clone, Debug, Serialize)]
pub struct BucketElection {
    pub bucket: u32,
    pub class: BucketClass,
    pub items: Vec<ItemId>,
    pub election_probs: Vec<f64>,
    /// g_b: probability mass this bucket permanently absorbs.
    pub absorbed: f64,
}

#[derive(Clone, Debug, Serialize)]
pub struct ElectionProfile {
    pub lambda: f64,
    pub buckets: Vec<BucketElection>,
    /// g: total absorbed probability mass across buckets.
    pub absorbed: f64,
}

/// Full per-bucket election profile and the absorbed mass g at `lambda`.
pub fn absorbed_mass(assignment: &BucketAssignment, lambda: f64) -> Result<ElectionProfile> {
    let mut buckets = Vec::with_capacity(assignment.buckets().len());
    for b in assignment.buckets() {
        let class = classify_bucket(b, lambda);
        let probs = if b.n() == 0 { Vec::new() } else { election_probs(b, lambda)? };
        let absorbed = probs.iter().zip(&b.probs).map(|(a, p)| a * p).sum();
        buckets.push(BucketElection {
            bucket: b.index,
            class,
            items: b.items.clone(),
            election_probs: probs,
            absorbed,
        });
    }
    let absorbed = kahan_sum(buckets.iter().map(|b| b.absorbed));
    Ok(ElectionProfile { lambda, buckets, absorbed })
}

/// g alone, allocation-free: per PLUS bucket, sum(w_i p_i)/sum(w_i) over the
/// active prefix. Each item is touched at most once, so the cost is O(n_I).
pub fn absorbed_mass_total(assignment: &BucketAssignment, lambda: f64) -> Result<f64> {
    let mut total = 0.0;
    let mut comp = 0.0;
    for b in assignment.buckets() {
        if classify_bucket(b, lambda) != BucketClass::Plus {
            continue;
        }
        let gb = if b.n() == 1 {
            b.probs[0]
        } else {
            let mut wsum = 0.0;
            let mut dot = 0.0;
            for pos in 0..b.n() {
                if bucket_item_active(b, pos, lambda) {
                    let w = absorption_weight(lambda, b.mass / b.probs[pos])?;
                    wsum += b.probs[pos] * w;
                    dot += b.probs[pos] * b.probs[pos] * w;
                } else {
                    break;
                }
            }
            if wsum > 0.0 {
                dot / wsum
            } else {
                0.0
            }
        };
        // Neumaier step keeps the m1-term reduction tight.
        let t = total + gb;
        comp += if total.abs() >= gb.abs() { (total - t) + gb } else { (gb - t) + total };
        total = t;
    }
    Ok(total + comp)
}

#[inline]
fn bucket_item_active(b: &BucketProfile, pos: usize, lambda: f64) -> bool {
    b.item_crit(pos) < lambda
}

/// Expected limiting counting error (1 - g)/m2; exact for d = 1, an upper
/// bound for deeper CM blocks.
pub fn expected_limiting_error(absorbed: f64, m2: u32) -> f64 {
    debug_assert!((-1e-12..=1.0 + 1e-12).contains(&absorbed));
    debug_assert!(m2 >= 1);
    (1.0 - absorbed) / m2 as f64
}
