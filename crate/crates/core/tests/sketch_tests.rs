//! Sketch behavior checks: the hand-traced update cases, mass conservation,
//! overestimation, the m1=0 CM reduction, the finite-time counter identity
//! against a shadow plain-CM oracle, and snapshot round-trips.

use esketch::sketch::{InstrumentedSketch, Sketch, SketchConfig};
use esketch::stream::{ArrivalDistribution, StreamSpec};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn cfg(m1: u32, m2: u32, d: u32, lambda: u64, n_items: u32) -> SketchConfig {
    SketchConfig::new(m1, m2, d, lambda, n_items, 0xb0b, 0xc0c)
}

/// Picks a cm_seed under which items 1 and 2 land in different columns of
/// row 0, so the hand trace has no accidental collision.
fn collision_free_cfg() -> SketchConfig {
    for seed in 0..64 {
        let c = SketchConfig::new(1, 4, 1, 1, 2, 0xb0b, seed);
        let s = Sketch::new(c.clone()).unwrap();
        if s.cm_col(0, 1) != s.cm_col(0, 2) {
            return c;
        }
    }
    unreachable!("no collision-free seed among 64 candidates");
}

#[test]
fn hand_traced_lambda1_sequence() {
    // Stream [1, 2, 2, 1, 1] on m1=1, d=1, lambda=1. Derived by hand from
    // the three update cases:
    //   t1: elect 1           (V+=1, V-=0)
    //   t2: score 1>0, case 2 (V-=1, CM[2] += 1)
    //   t3: score 0,   case 3 (CM[1] += 1, elect 2)
    //   t4: score 1>0, case 2 (V-=1, CM[1] += 1)
    //   t5: score 0,   case 3 (CM[2] += 1, elect 1)
    let config = collision_free_cfg();
    let mut s = Sketch::new(config).unwrap();
    let col1 = s.cm_col(0, 1);
    let col2 = s.cm_col(0, 2);

    s.update(1);
    assert_eq!(s.elected(0), Some(1));
    assert_eq!((s.v_plus()[0], s.v_minus()[0]), (1, 0));
    assert!(s.cm_row(0).iter().all(|&y| y == 0));

    s.update(2);
    assert_eq!(s.elected(0), Some(1));
    assert_eq!((s.v_plus()[0], s.v_minus()[0]), (1, 1));
    assert_eq!(s.cm_row(0)[col2], 1);

    s.update(2);
    assert_eq!(s.elected(0), Some(2));
    assert_eq!((s.v_plus()[0], s.v_minus()[0]), (1, 0));
    assert_eq!(s.cm_row(0)[col1], 1);

    s.update(1);
    assert_eq!(s.elected(0), Some(2));
    assert_eq!((s.v_plus()[0], s.v_minus()[0]), (1, 1));
    assert_eq!(s.cm_row(0)[col1], 2);

    s.update(1);
    assert_eq!(s.elected(0), Some(1));
    assert_eq!((s.v_plus()[0], s.v_minus()[0]), (1, 0));
    assert_eq!(s.cm_row(0)[col2], 2);

    assert_eq!(s.t(), 5);
    // Estimates: both items carry their exact counts here.
    assert_eq!(s.estimate(1), 3);
    assert_eq!(s.estimate(2), 2);
}

#[test]
fn fresh_state_trivials() {
    let s = Sketch::new(cfg(4, 16, 2, 3, 10)).unwrap();
    for item in 1..=10 {
        assert_eq!(s.estimate(item), 0);
    }
    assert_eq!(s.t(), 0);
    assert_eq!(s.heavy_mass(), 0);
    for b in 0..4 {
        assert_eq!(s.elected(b), None);
    }
}

#[test]
fn first_arrival_elects() {
    let mut s = Sketch::new(cfg(4, 16, 2, 3, 10)).unwrap();
    s.update(7);
    let b = s.bucket_of(7);
    assert_eq!(s.elected(b), Some(7));
    assert_eq!(s.v_plus()[b], 1);
    assert_eq!(s.v_minus()[b], 0);
    assert!(s.cm_row(0).iter().all(|&y| y == 0));
    assert!(s.cm_row(1).iter().all(|&y| y == 0));
}

#[test]
fn single_repeated_item_fully_absorbed() {
    let mut s = Sketch::new(cfg(2, 8, 1, 2, 1)).unwrap();
    for _ in 0..1000 {
        s.update(1);
    }
    assert_eq!(s.heavy_mass(), 1000);
    assert_eq!(s.estimate(1), 1000);
    assert_eq!(s.v_bar(), 1.0);
}

fn zipf_stream(n: usize, alpha: f64, tau: u64, seed: u64) -> Vec<u32> {
    StreamSpec { dist: ArrivalDistribution::zipf(n, alpha).unwrap(), tau, seed }.sample()
}

#[test]
fn mass_conservation_every_row() {
    let mut s = Sketch::new(cfg(8, 32, 3, 2, 100)).unwrap();
    for item in zipf_stream(100, 1.0, 20_000, 1) {
        s.update(item);
    }
    let heavy: u64 = s.v_plus().iter().sum();
    for l in 0..3 {
        let row: u64 = s.cm_row(l).iter().sum();
        assert_eq!(row + heavy, s.t(), "row {l}");
    }
}

#[test]
fn none_elected_means_zero_counters() {
    let mut s = Sketch::new(cfg(64, 16, 1, 1, 4)).unwrap();
    for item in zipf_stream(4, 0.5, 500, 3) {
        s.update(item);
    }
    for b in 0..64 {
        if s.elected(b).is_none() {
            assert_eq!(s.v_plus()[b], 0);
            assert_eq!(s.v_minus()[b], 0);
        }
    }
}

#[test]
fn m1_zero_reduces_to_plain_cm() {
    let config = cfg(0, 32, 2, 1, 50);
    let mut s = Sketch::new(config.clone()).unwrap();
    let stream = zipf_stream(50, 1.2, 5000, 9);
    // Independent plain CM built from the public column mapping.
    let mut cm = vec![vec![0u64; 32]; 2];
    for &item in &stream {
        s.update(item);
        for (l, row) in cm.iter_mut().enumerate() {
            row[s.cm_col(l, item)] += 1;
        }
    }
    for (l, row) in cm.iter().enumerate() {
        assert_eq!(s.cm_row(l), &row[..], "row {l}");
    }
    // Estimate is the plain CM minimum.
    for item in 1..=50u32 {
        let expect = (0..2).map(|l| cm[l][s.cm_col(l, item)]).min().unwrap();
        assert_eq!(s.estimate(item), expect);
    }
    assert_eq!(s.heavy_mass(), 0);
}

#[test]
fn overestimation_and_pathwise_dominance_on_random_streams() {
    for seed in 0..5 {
        let mut inst = InstrumentedSketch::new(cfg(16, 24, 2, 3, 200)).unwrap();
        for item in zipf_stream(200, 1.1, 10_000, 100 + seed) {
            inst.update(item);
        }
        inst.check_estimate_bounds().unwrap();
        // Spot check overestimation directly on a few items.
        for item in [1u32, 2, 50, 200] {
            assert!(inst.sketch().estimate(item) >= inst.truth().count(item));
        }
    }
}

#[test]
fn finite_time_identity_every_step_small_stream() {
    let mut inst = InstrumentedSketch::new(cfg(4, 8, 2, 1, 20)).unwrap();
    for item in zipf_stream(20, 1.0, 10_000, 5) {
        inst.update(item);
        inst.check_identity().unwrap();
    }
}

#[test]
fn corruption_is_detected() {
    let mut inst = InstrumentedSketch::new(cfg(4, 8, 1, 2, 20)).unwrap();
    for item in zipf_stream(20, 1.0, 2000, 6) {
        inst.update(item);
    }
    inst.check_identity().unwrap();
    inst.sketch_mut().corrupt_cm_cell(0, 3, 1);
    assert!(inst.check_identity().is_err(), "CM corruption must trip the identity");

    let mut inst = InstrumentedSketch::new(cfg(4, 8, 1, 2, 20)).unwrap();
    for item in zipf_stream(20, 1.0, 2000, 6) {
        inst.update(item);
    }
    inst.sketch_mut().corrupt_v_plus(2, 1);
    assert!(inst.check_identity().is_err(), "counter corruption must trip the identity");
}

#[test]
fn sample_err0_trivials_and_consistency() {
    let s = Sketch::new(cfg(4, 16, 2, 1, 10)).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    assert_eq!(s.sample_err0(&mut rng), 0, "empty sketch");

    let mut s = Sketch::new(cfg(2, 8, 1, 1, 30)).unwrap();
    for item in zipf_stream(30, 0.9, 4000, 12) {
        s.update(item);
    }
    // d=1: the sampler's expectation is the exact row average.
    let exact = s.err0_expectation();
    let row: u64 = s.cm_row(0).iter().sum();
    assert_eq!(exact, row as f64 / 8.0);
    let trials = 200_000;
    let mean = (0..trials).map(|_| s.sample_err0(&mut rng) as f64).sum::<f64>() / trials as f64;
    let spread = s.cm_row(0).iter().copied().max().unwrap() as f64;
    assert!((mean - exact).abs() < 4.0 * spread / (trials as f64).sqrt() + 1e-9);
}

#[test]
fn err0_expectation_matches_exhaustive_enumeration_d2() {
    let mut s = Sketch::new(cfg(2, 8, 2, 1, 30)).unwrap();
    for item in zipf_stream(30, 1.0, 3000, 21) {
        s.update(item);
    }
    // Brute force over all 8x8 column pairs.
    let mut total = 0.0;
    for c0 in 0..8 {
        for c1 in 0..8 {
            total += s.cm_row(0)[c0].min(s.cm_row(1)[c1]) as f64;
        }
    }
    let brute = total / 64.0;
    let fast = s.err0_expectation();
    assert!((fast - brute).abs() < 1e-9, "fast {fast} vs brute {brute}");
}

#[test]
fn snapshot_roundtrip_preserves_state() {
    let mut s = Sketch::new(cfg(8, 16, 2, 2, 50)).unwrap();
    for item in zipf_stream(50, 1.0, 5000, 33) {
        s.update(item);
    }
    let snap = s.snapshot();
    let json = serde_json::to_string(&snap).unwrap();
    let back: esketch::sketch::SketchSnapshot = serde_json::from_str(&json).unwrap();
    let restored = Sketch::from_snapshot(back).unwrap();
    assert_eq!(restored.snapshot(), snap);
    // Restored sketch keeps answering identically.
    for item in 1..=50u32 {
        assert_eq!(restored.estimate(item), s.estimate(item));
    }
}

#[test]
fn snapshot_rejects_inconsistent_shapes() {
    let s = Sketch::new(cfg(4, 8, 1, 1, 10)).unwrap();
    let mut snap = s.snapshot();
    snap.v_plus.pop();
    assert!(Sketch::from_snapshot(snap).is_err());
}

#[test]
fn config_validation() {
    assert!(Sketch::new(cfg(4, 0, 1, 1, 10)).is_err(), "m2 = 0");
    assert!(Sketch::new(cfg(4, 8, 0, 1, 10)).is_err(), "d = 0");
    assert!(Sketch::new(cfg(4, 8, 1, 0, 10)).is_err(), "lambda = 0");
    assert!(Sketch::new(cfg(4, 8, 1, 1, 0)).is_err(), "empty universe");
    assert!(Sketch::new(cfg(0, 8, 1, 1, 10)).is_ok(), "m1 = 0 is the CM baseline");
}

#[test]
fn randomized_invariants_many_small_streams() {
    let mut rng = ChaCha8Rng::seed_from_u64(777);
    for _ in 0..50 {
        let m1 = rng.random_range(0..6u32);
        let m2 = rng.random_range(1..12u32);
        let d = rng.random_range(1..4u32);
        let lambda = rng.random_range(1..5u64);
        let n = rng.random_range(1..30u32);
        let alpha = rng.random_range(0.0..2.0);
        let tau = rng.random_range(1..800u64);
        let config = SketchConfig::new(m1, m2, d, lambda, n, rng.random(), rng.random());
        let mut inst = InstrumentedSketch::new(config).unwrap();
        let stream = StreamSpec {
            dist: ArrivalDistribution::zipf(n as usize, alpha).unwrap(),
            tau,
            seed: rng.random(),
        };
        for item in stream.arrivals() {
            inst.update(item);
        }
        inst.check_identity().unwrap();
        inst.check_estimate_bounds().unwrap();
    }
}
