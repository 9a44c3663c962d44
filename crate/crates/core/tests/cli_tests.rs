//! End-to-end checks of the esketch binary: exit codes, file shapes, and
//! agreement between command output and direct library calls.

use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use serde_json::Value;
use tempfile::TempDir;

use esketch::hash::derive_seed;
use esketch::sim::{sweep_lambda, SweepParams};
use esketch::stream::{assign_buckets, ArrivalDistribution};
use esketch::tuning::{grid_search, hp_bound, lambda_hat_star, GridSearchParams};

fn run(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_esketch")).args(args).output().expect("spawn esketch")
}

fn code(out: &Output) -> i32 {
    out.status.code().expect("exit code")
}

fn stderr_text(out: &Output) -> String {
    String::from_utf8_lossy(&out.stderr).into_owned()
}

fn stdout_json(out: &Output) -> Value {
    serde_json::from_slice(&out.stdout).expect("stdout is JSON")
}

fn json_file(path: &Path) -> Value {
    serde_json::from_slice(&fs::read(path).expect("read json")).expect("parse json")
}

/// Data rows of a CSV file: skips '#' manifest comments, returns (header, rows).
fn csv_rows(path: &Path) -> (String, Vec<String>) {
    let text = fs::read_to_string(path).expect("read csv");
    let mut lines = text.lines().filter(|l| !l.starts_with('#'));
    let header = lines.next().expect("header row").to_string();
    (header, lines.map(str::to_string).collect())
}

#[test]
fn no_args_is_usage_error() {
    let out = run(&[]);
    assert_eq!(code(&out), 2);
    assert!(stderr_text(&out).contains("Usage"), "stderr: {}", stderr_text(&out));
}

#[test]
fn theory_requires_a_threshold_source() {
    let out = run(&["theory", "--dist", "uniform", "--n-items", "9", "--m1", "3"]);
    assert_eq!(code(&out), 2);
    assert!(stderr_text(&out).contains("lambda"), "stderr: {}", stderr_text(&out));
}

#[test]
fn theory_missing_m1_is_usage_error() {
    let out = run(&["theory", "--dist", "uniform", "--n-items", "9", "--candidates"]);
    assert_eq!(code(&out), 2);
}

#[test]
fn theory_uniform_lambda_star_is_max_load() {
    let out = run(&[
        "theory", "--dist", "uniform", "--n-items", "9", "--m1", "3", "--beta-seed", "1",
        "--candidates",
    ]);
    assert_eq!(code(&out), 0, "stderr: {}", stderr_text(&out));
    let v = stdout_json(&out);
    let dist = ArrivalDistribution::uniform(9).unwrap();
    let assignment = assign_buckets(&dist, 3, 1).unwrap();
    assert_eq!(v["lambda_star"].as_u64().unwrap(), assignment.max_occupancy() as u64);
    assert!(!v["candidates"].as_array().unwrap().is_empty());
}

#[test]
fn theory_zipf_golden_matches_library() {
    let dir = TempDir::new().unwrap();
    let stem = dir.path().join("out");
    let out = run(&[
        "theory", "--dist", "zipf", "--alpha", "1.2", "--n-items", "200", "--m1", "10",
        "--beta-seed", "7", "--candidates", "--m2", "64", "--out", stem.to_str().unwrap(),
    ]);
    assert_eq!(code(&out), 0, "stderr: {}", stderr_text(&out));
    let v = json_file(&stem.with_extension("json"));

    let dist = ArrivalDistribution::zipf(200, 1.2).unwrap();
    let assignment = assign_buckets(&dist, 10, 7).unwrap();
    let tuned = esketch::tuning::lambda_star(&assignment).unwrap();
    assert_eq!(v["lambda_star"].as_u64().unwrap(), tuned.lambda_star);
    assert_eq!(v["g_at_star"].as_f64().unwrap(), tuned.g_at_star);

    let cands = esketch::tuning::candidate_set(&assignment).unwrap();
    let got: Vec<u64> =
        v["candidates"].as_array().unwrap().iter().map(|x| x.as_u64().unwrap()).collect();
    assert_eq!(got, cands.values);

    // Curve rows carry the closed-form mass and its implied error, bit for bit.
    for point in v["curve"].as_array().unwrap() {
        let lambda = point["lambda"].as_u64().unwrap();
        let g = esketch::analysis::absorbed_mass_total(&assignment, lambda as f64).unwrap();
        assert_eq!(point["g"].as_f64().unwrap(), g);
        assert_eq!(point["expected_error"].as_f64().unwrap(), (1.0 - g) / 64.0);
    }
    assert_eq!(v["buckets"].as_array().unwrap().len(), 10);
    assert_eq!(v["manifest"]["tool"].as_str().unwrap(), "esketch");
}

#[test]
fn theory_csv_curve_shape() {
    let dir = TempDir::new().unwrap();
    let stem = dir.path().join("curve");
    let out = run(&[
        "theory", "--dist", "zipf", "--alpha", "1.0", "--n-items", "100", "--m1", "5",
        "--beta-seed", "3", "--lambda-grid", "1..4", "--m2", "32", "--out",
        stem.to_str().unwrap(),
    ]);
    assert_eq!(code(&out), 0, "stderr: {}", stderr_text(&out));
    let path = stem.with_extension("csv");
    let text = fs::read_to_string(&path).unwrap();
    assert!(text.starts_with("# esketch"), "manifest comment first: {text}");
    let (header, rows) = csv_rows(&path);
    assert_eq!(header, "lambda,g,expected_error");
    assert_eq!(rows.len(), 4);
    assert!(rows[0].starts_with("1,"));

    // Without --m2 the error column has no denominator and is dropped.
    let stem2 = dir.path().join("bare");
    let out = run(&[
        "theory", "--dist", "zipf", "--alpha", "1.0", "--n-items", "100", "--m1", "5",
        "--beta-seed", "3", "--lambda-grid", "2", "--out", stem2.to_str().unwrap(),
    ]);
    assert_eq!(code(&out), 0);
    let (header, rows) = csv_rows(&stem2.with_extension("csv"));
    assert_eq!(header, "lambda,g");
    assert_eq!(rows.len(), 1);
}

#[test]
fn theory_lambda_grid_parsing() {
    let grid = |spec: &str| -> Vec<u64> {
        let out = run(&[
            "theory", "--dist", "uniform", "--n-items", "20", "--m1", "2", "--lambda-grid", spec,
        ]);
        assert_eq!(code(&out), 0, "stderr: {}", stderr_text(&out));
        stdout_json(&out)["curve"]
            .as_array()
            .unwrap()
            .iter()
            .map(|p| p["lambda"].as_u64().unwrap())
            .collect()
    };
    assert_eq!(grid("1..5"), vec![1, 2, 3, 4, 5]);
    assert_eq!(grid("5,1,3,3"), vec![1, 3, 5]);

    let out = run(&[
        "theory", "--dist", "uniform", "--n-items", "20", "--m1", "2", "--lambda-grid", "0,2",
    ]);
    assert_eq!(code(&out), 2);
}

#[test]
fn config_file_values_apply_and_flags_win() {
    let dir = TempDir::new().unwrap();
    let cfg = dir.path().join("run.cfg");
    fs::write(
        &cfg,
        "# threshold study\ndist=zipf\nalpha=1.2\nn-items=120\nm1=8\nbeta-seed=3\ncandidates=true\n",
    )
    .unwrap();

    let a = dir.path().join("a");
    let out = run(&[
        "theory", "--config", cfg.to_str().unwrap(), "--alpha", "0.8", "--out",
        a.to_str().unwrap(),
    ]);
    assert_eq!(code(&out), 0, "stderr: {}", stderr_text(&out));
    let va = json_file(&a.with_extension("json"));
    let settings = &va["manifest"]["settings"];
    assert_eq!(settings["alpha"].as_str().unwrap(), "0.8");
    assert_eq!(settings["n-items"].as_str().unwrap(), "120");

    // Same resolved inputs via flags only: identical bytes, both formats.
    let b = dir.path().join("b");
    let out = run(&[
        "theory", "--dist", "zipf", "--alpha", "0.8", "--n-items", "120", "--m1", "8",
        "--beta-seed", "3", "--candidates", "--out", b.to_str().unwrap(),
    ]);
    assert_eq!(code(&out), 0);
    assert_eq!(
        fs::read(a.with_extension("json")).unwrap(),
        fs::read(b.with_extension("json")).unwrap()
    );
    assert_eq!(
        fs::read(a.with_extension("csv")).unwrap(),
        fs::read(b.with_extension("csv")).unwrap()
    );
}

#[test]
fn config_file_unknown_key_rejected() {
    let dir = TempDir::new().unwrap();
    let cfg = dir.path().join("bad.cfg");
    fs::write(&cfg, "dist=uniform\nn-itmes=9\n").unwrap();
    let out = run(&["theory", "--config", cfg.to_str().unwrap(), "--m1", "3", "--candidates"]);
    assert_eq!(code(&out), 2);
    assert!(stderr_text(&out).contains("line 2"), "stderr: {}", stderr_text(&out));
}

#[test]
fn config_file_bad_syntax_rejected() {
    let dir = TempDir::new().unwrap();
    let cfg = dir.path().join("bad.cfg");
    fs::write(&cfg, "dist uniform\n").unwrap();
    let out = run(&["theory", "--config", cfg.to_str().unwrap(), "--m1", "3", "--candidates"]);
    assert_eq!(code(&out), 2);
    assert!(stderr_text(&out).contains("line 1"), "stderr: {}", stderr_text(&out));
}

#[test]
fn explicit_distribution_roundtrip() {
    let dir = TempDir::new().unwrap();
    let probs = dir.path().join("p.txt");
    fs::write(&probs, "0.5\n0.3\n0.2\n").unwrap();
    let out = run(&[
        "theory", "--dist", "explicit", "--dist-file", probs.to_str().unwrap(), "--m1", "2",
        "--beta-seed", "4", "--candidates",
    ]);
    assert_eq!(code(&out), 0, "stderr: {}", stderr_text(&out));
    let v = stdout_json(&out);
    let dist = ArrivalDistribution::explicit(vec![0.5, 0.3, 0.2]).unwrap();
    let assignment = assign_buckets(&dist, 2, 4).unwrap();
    let tuned = esketch::tuning::lambda_star(&assignment).unwrap();
    assert_eq!(v["lambda_star"].as_u64().unwrap(), tuned.lambda_star);

    // A stated universe size must agree with the file.
    let out = run(&[
        "theory", "--dist", "explicit", "--dist-file", probs.to_str().unwrap(), "--n-items", "4",
        "--m1", "2", "--candidates",
    ]);
    assert_eq!(code(&out), 2);
}

#[test]
fn explicit_distribution_bad_sum_rejected() {
    let dir = TempDir::new().unwrap();
    let probs = dir.path().join("p.txt");
    fs::write(&probs, "0.5\n0.3\n").unwrap();
    let out = run(&[
        "theory", "--dist", "explicit", "--dist-file", probs.to_str().unwrap(), "--m1", "1",
        "--candidates",
    ]);
    assert_eq!(code(&out), 2);
    assert!(stderr_text(&out).contains("sum"), "stderr: {}", stderr_text(&out));
}

#[test]
fn bound_matches_library_and_hints_search_range() {
    let out = run(&["bound", "--n-items", "10000", "--m1", "200", "--delta", "0.05"]);
    assert_eq!(code(&out), 0, "stderr: {}", stderr_text(&out));
    let v = stdout_json(&out);
    let expect = hp_bound(10000, 200, 0.05).unwrap();
    assert_eq!(v["bound"].as_f64().unwrap(), expect);
    assert!((expect - 81.56407494323211).abs() < 1e-9);
    assert_eq!(v["lambda_search_max"].as_u64().unwrap(), 82);

    let out = run(&["bound", "--n-items", "10000", "--m1", "200", "--delta", "1.0"]);
    assert_eq!(code(&out), 2);
}

#[test]
fn tune_sample_mode_matches_library() {
    let dir = TempDir::new().unwrap();
    let stem = dir.path().join("tune");
    let out = run(&[
        "tune", "--dist", "zipf", "--alpha", "1.0", "--n-items", "300", "--m1", "10", "--n-samp",
        "20", "--seed", "5", "--out", stem.to_str().unwrap(),
    ]);
    assert_eq!(code(&out), 0, "stderr: {}", stderr_text(&out));
    let v = json_file(&stem.with_extension("json"));

    let dist = ArrivalDistribution::zipf(300, 1.0).unwrap();
    let seeds: Vec<u64> = (0..20).map(|k| derive_seed(5, k)).collect();
    let expect = lambda_hat_star(&dist, 10, &seeds).unwrap();
    assert_eq!(v["result"], serde_json::to_value(&expect).unwrap());

    let (header, rows) = csv_rows(&stem.with_extension("csv"));
    assert_eq!(header, "lambda,g_hat");
    assert_eq!(rows.len(), expect.table.len());
}

#[test]
fn tune_budget_mode_matches_library() {
    let dir = TempDir::new().unwrap();
    let stem = dir.path().join("grid");
    let out = run(&[
        "tune", "--dist", "uniform", "--n-items", "1000", "--budget", "100",
        "--cost-per-bucket", "3", "--d", "1", "--m1-grid", "0,8,16", "--n-samp", "10", "--seed",
        "5", "--out", stem.to_str().unwrap(),
    ]);
    assert_eq!(code(&out), 0, "stderr: {}", stderr_text(&out));
    let v = json_file(&stem.with_extension("json"));

    let dist = ArrivalDistribution::uniform(1000).unwrap();
    let seeds: Vec<u64> = (0..10).map(|k| derive_seed(5, k)).collect();
    let expect = grid_search(&GridSearchParams {
        dist: &dist,
        budget: 100,
        cost_per_bucket: 3,
        d: 1,
        m1_grid: &[0, 8, 16],
        seeds: &seeds,
        dense: false,
    })
    .unwrap();
    assert_eq!(v["result"], serde_json::to_value(&expect).unwrap());

    let (header, rows) = csv_rows(&stem.with_extension("csv"));
    assert_eq!(header, "m1,m2,lambda,g_hat,expected_error");
    assert_eq!(rows.len(), expect.grid.len());
}

#[test]
fn tune_infeasible_budget_is_config_error() {
    let out = run(&[
        "tune", "--dist", "uniform", "--n-items", "100", "--budget", "3", "--d", "4",
        "--m1-grid", "2", "--n-samp", "5",
    ]);
    assert_eq!(code(&out), 2);
    assert!(stderr_text(&out).contains("budget"), "stderr: {}", stderr_text(&out));
}

#[test]
fn tune_modes_are_exclusive() {
    let out = run(&[
        "tune", "--dist", "uniform", "--n-items", "100", "--m1", "4", "--budget", "50",
        "--m1-grid", "4",
    ]);
    assert_eq!(code(&out), 2);
    let out = run(&["tune", "--dist", "uniform", "--n-items", "100"]);
    assert_eq!(code(&out), 2);
}

#[test]
fn simulate_single_item_trivials() {
    let dir = TempDir::new().unwrap();
    let probs = dir.path().join("one.txt");
    fs::write(&probs, "1.0\n").unwrap();
    let stem = dir.path().join("single");
    let out = run(&[
        "simulate", "--dist", "explicit", "--dist-file", probs.to_str().unwrap(), "--m1", "1",
        "--m2", "8", "--lambda", "2", "--tau", "500", "--runs", "1", "--out",
        stem.to_str().unwrap(),
    ]);
    assert_eq!(code(&out), 0, "stderr: {}", stderr_text(&out));
    let v = json_file(&stem.with_extension("json"));
    let point = &v["sweep"]["points"][0];
    assert_eq!(point["vbar_mean"].as_f64().unwrap(), 1.0);
    assert_eq!(point["are_mean"].as_f64().unwrap(), 0.0);
    assert_eq!(point["vbar_stderr"].as_f64().unwrap(), 0.0);

    let (header, rows) = csv_rows(&stem.with_extension("csv"));
    assert_eq!(header, "lambda,g_theory,vbar_mean,vbar_stderr,are_mean,are_q1,are_median,are_q3");
    assert_eq!(rows.len(), 1);

    let (header, rows) = csv_rows(&stem.with_extension("runs.csv"));
    assert_eq!(header, "lambda,run,v_bar,are,err0_mean");
    assert_eq!(rows.len(), 1);
}

#[test]
fn simulate_matches_library_sweep() {
    let dir = TempDir::new().unwrap();
    let stem = dir.path().join("sweep");
    let out = run(&[
        "simulate", "--dist", "zipf", "--alpha", "1.0", "--n-items", "50", "--m1", "4", "--m2",
        "32", "--lambda-grid", "1,3", "--tau", "5000", "--runs", "4", "--beta-seed", "2",
        "--seed", "9", "--out", stem.to_str().unwrap(),
    ]);
    assert_eq!(code(&out), 0, "stderr: {}", stderr_text(&out));
    let v = json_file(&stem.with_extension("json"));

    let dist = ArrivalDistribution::zipf(50, 1.0).unwrap();
    let expect = sweep_lambda(&SweepParams {
        dist: &dist,
        m1: 4,
        m2: 32,
        d: 1,
        beta_seed: 2,
        tau: 5000,
        n_runs: 4,
        master_seed: 9,
        lambdas: &[1, 3],
    })
    .unwrap();
    assert_eq!(v["sweep"], serde_json::to_value(&expect).unwrap());
}

#[test]
fn simulate_instrumented_matches_plain() {
    let dir = TempDir::new().unwrap();
    let args = |stem: &Path, extra: &[&str]| {
        let mut v = vec![
            "simulate".to_string(), "--dist".into(), "zipf".into(), "--alpha".into(),
            "1.0".into(), "--n-items".into(), "50".into(), "--m1".into(), "4".into(),
            "--m2".into(), "32".into(), "--lambda-grid".into(), "1,3".into(), "--tau".into(),
            "5000".into(), "--runs".into(), "4".into(), "--beta-seed".into(), "2".into(),
            "--seed".into(), "9".into(), "--out".into(), stem.to_str().unwrap().into(),
        ];
        v.extend(extra.iter().map(|s| s.to_string()));
        v
    };
    let plain = dir.path().join("plain");
    let inst = dir.path().join("inst");
    let out = Command::new(env!("CARGO_BIN_EXE_esketch"))
        .args(args(&plain, &[]))
        .output()
        .unwrap();
    assert_eq!(code(&out), 0, "stderr: {}", stderr_text(&out));
    let out = Command::new(env!("CARGO_BIN_EXE_esketch"))
        .args(args(&inst, &["--instrumented"]))
        .output()
        .unwrap();
    assert_eq!(code(&out), 0, "stderr: {}", stderr_text(&out));

    // The checked path replays the exact same streams and seeds.
    let a = json_file(&plain.with_extension("json"));
    let b = json_file(&inst.with_extension("json"));
    assert_eq!(a["sweep"], b["sweep"]);

    let (_, rows) = csv_rows(&inst.with_extension("runs.csv"));
    assert_eq!(rows.len(), 2 * 4);
}

#[test]
fn simulate_pure_cm_baseline() {
    let dir = TempDir::new().unwrap();
    let stem = dir.path().join("cm");
    let out = run(&[
        "simulate", "--dist", "uniform", "--n-items", "50", "--m1", "0", "--m2", "32",
        "--lambda", "1", "--tau", "2000", "--runs", "2", "--out", stem.to_str().unwrap(),
    ]);
    assert_eq!(code(&out), 0, "stderr: {}", stderr_text(&out));
    let v = json_file(&stem.with_extension("json"));
    let point = &v["sweep"]["points"][0];
    assert_eq!(point["g_theory"].as_f64().unwrap(), 0.0);
    assert_eq!(point["vbar_mean"].as_f64().unwrap(), 0.0);
    let (_, rows) = csv_rows(&stem.with_extension("runs.csv"));
    assert!(rows.iter().all(|r| r.ends_with(",0.03125")), "rows: {rows:?}");
}

#[test]
fn simulate_format_selects_outputs() {
    let dir = TempDir::new().unwrap();
    let stem = dir.path().join("only-csv");
    let out = run(&[
        "simulate", "--dist", "uniform", "--n-items", "20", "--m1", "2", "--m2", "8",
        "--lambda", "1", "--tau", "200", "--runs", "2", "--format", "csv", "--out",
        stem.to_str().unwrap(),
    ]);
    assert_eq!(code(&out), 0, "stderr: {}", stderr_text(&out));
    assert!(stem.with_extension("csv").exists());
    assert!(!stem.with_extension("json").exists());

    let stem = dir.path().join("only-json");
    let out = run(&[
        "simulate", "--dist", "uniform", "--n-items", "20", "--m1", "2", "--m2", "8",
        "--lambda", "1", "--tau", "200", "--runs", "2", "--format", "json", "--out",
        stem.to_str().unwrap(),
    ]);
    assert_eq!(code(&out), 0);
    assert!(stem.with_extension("json").exists());
    assert!(!stem.with_extension("csv").exists());
}

#[test]
fn validate_default_suite_passes() {
    let out = run(&["validate"]);
    assert_eq!(code(&out), 0, "stderr: {}", stderr_text(&out));
    let v = stdout_json(&out);
    assert!(v["passed"].as_bool().unwrap());
    let checks = v["checks"].as_array().unwrap();
    assert!(checks.iter().all(|c| c["passed"].as_bool().unwrap()));
    let mut families: Vec<&str> =
        checks.iter().map(|c| c["family"].as_str().unwrap()).collect();
    families.dedup();
    for want in [
        "root-finding", "election-oracle", "walk-oracle", "mass-conservation", "theory-vs-sim",
        "noise-floor",
    ] {
        assert!(families.contains(&want), "missing family {want}: {families:?}");
    }
}

#[test]
fn validate_only_filters_family() {
    let out = run(&["validate", "--only", "mass-conservation"]);
    assert_eq!(code(&out), 0, "stderr: {}", stderr_text(&out));
    let v = stdout_json(&out);
    let checks = v["checks"].as_array().unwrap();
    assert!(!checks.is_empty());
    assert!(checks.iter().all(|c| c["family"].as_str().unwrap() == "mass-conservation"));
}

#[test]
fn validate_unknown_family_is_usage_error() {
    let out = run(&["validate", "--only", "bogus"]);
    assert_eq!(code(&out), 2);
    assert!(stderr_text(&out).contains("mass-conservation"), "stderr: {}", stderr_text(&out));
}

#[test]
fn validate_corruption_injection_fails() {
    let out = run(&["validate", "--only", "mass-conservation", "--inject-corruption"]);
    assert_eq!(code(&out), 1, "stderr: {}", stderr_text(&out));
    let v = stdout_json(&out);
    assert!(!v["passed"].as_bool().unwrap());
    assert!(v["checks"].as_array().unwrap().iter().any(|c| !c["passed"].as_bool().unwrap()));
}
