//! Small numeric helpers shared across modules.

/// Neumaier-compensated sum; keeps probability-mass identities at ~1e-15
/// where a naive sum over 1e5+ terms drifts past 1e-12.
pub fn kahan_sum<I: IntoIterator<Item = f64>>(xs: I) -> f64 {
    let mut sum = 0.0;
    let mut comp = 0.0;
    for x in xs {
        let t = sum + x;
        if sum.abs() >= x.abs() {
            comp += (sum - t) + x;
        } else {
            comp += (x - t) + sum;
        }
        sum = t;
    }
    sum + comp
}

/// Snaps values within 1e-9 (relative) of an integer onto that integer.
///
/// Critical thresholds mu_b/p_i - 1 are exactly integral for uniform and
/// other rational inputs; float division leaves them a few ulps off, which
/// would flip the strict comparisons that candidate sets and PLUS/MINUS
/// classification are built on.
pub fn snap_near_integer(x: f64) -> f64 {
    let r = x.round();
    if (x - r).abs() <= 1e-9 * r.abs().max(1.0) {
        r
    } else {
        x
    }
}

/// Linear-interpolation quantile of an unsorted sample; q in [0, 1].
pub fn quantile(sample: &[f64], q: f64) -> f64 {
    assert!(!sample.is_empty() && (0.0..=1.0).contains(&q));
    let mut s = sample.to_vec();
    s.sort_by(|a, b| a.total_cmp(b));
    let pos = q * (s.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    s[lo] + (pos - lo as f64) * (s[hi] - s[lo])
}
