//! Batch front end: theory curves, threshold tuning, stream simulation,
//! tail bounds, and a built-in self-check suite. Every output embeds the
//! resolved settings and seeds so a run can be replayed exactly.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand, ValueEnum};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;
use serde_json::{json, Value};

use crate::analysis;
use crate::error::{Error, Result};
use crate::hash::derive_seed;
use crate::numeric::kahan_sum;
use crate::sim::{self, SweepDetail, SweepParams};
use crate::sketch::{InstrumentedSketch, SketchConfig};
use crate::stream::{assign_buckets, ArrivalDistribution, BucketProfile, StreamSpec};
use crate::tuning::{self, GridSearchParams, TuneResult};

/// Runs the CLI against the process arguments, returning the exit code:
/// 0 success, 1 failed check or runtime error, 2 usage or config error.
pub fn run() -> i32 {
    run_from(std::env::args().collect())
}

/// Same entry point with explicit arguments, for tests.
pub fn run_from(argv: Vec<String>) -> i32 {
    let argv = match merge_config(argv) {
        Ok(v) => v,
        Err(e) => {
            eprintln!("esketch: {e}");
            return 2;
        }
    };
    let cli = match Cli::try_parse_from(&argv) {
        Ok(c) => c,
        Err(e) => {
            use clap::error::ErrorKind;
            let code = match e.kind() {
                ErrorKind::DisplayHelp | ErrorKind::DisplayVersion => 0,
                _ => 2,
            };
            let _ = e.print();
            return code;
        }
    };
    match dispatch(cli) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("esketch: {e}");
            exit_code(&e)
        }
    }
}

fn exit_code(e: &Error) -> i32 {
    match e {
        Error::InvalidParameter { .. } | Error::Config { .. } | Error::InfeasibleBudget { .. } => 2,
        _ => 1,
    }
}

#[derive(Parser, Debug)]
#[command(name = "esketch", version, about = "Streaming counter with a tunable eviction threshold: theory, tuning, and simulation")]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand, Debug)]
enum Cmd {
    /// Closed-form absorption curve, candidate thresholds, and the optimum for one bucket hash
    #[command(args_override_self = true)]
    Theory(TheoryArgs),
    /// Seed-averaged threshold search, optionally over memory splits under a budget
    #[command(args_override_self = true)]
    Tune(TuneArgs),
    /// Stream runs against one or more thresholds, aggregated across seeds
    #[command(args_override_self = true)]
    Simulate(SimulateArgs),
    /// High-probability ceiling on the tuned threshold under uniform arrivals
    #[command(args_override_self = true)]
    Bound(BoundArgs),
    /// Self-check suite: oracles vs formulas, counter identities, theory vs simulation
    #[command(args_override_self = true)]
    Validate(ValidateArgs),
}

#[derive(Args, Debug)]
struct DistOpts {
    /// Arrival distribution family
    #[arg(long, value_enum, default_value_t = DistKind::Zipf)]
    dist: DistKind,
    /// Zipf exponent
    #[arg(long, default_value_t = 1.0)]
    alpha: f64,
    /// Universe size (required for zipf and uniform)
    #[arg(long)]
    n_items: Option<u32>,
    /// Explicit distribution file: one probability per line, '#' comments
    #[arg(long)]
    dist_file: Option<PathBuf>,
}

#[derive(ValueEnum, Clone, Copy, Debug, PartialEq)]
enum DistKind {
    Zipf,
    Uniform,
    Explicit,
}

impl DistOpts {
    fn build(&self) -> Result<ArrivalDistribution> {
        match self.dist {
            DistKind::Zipf => ArrivalDistribution::zipf(self.required_n()? as usize, self.alpha),
            DistKind::Uniform => ArrivalDistribution::uniform(self.required_n()? as usize),
            DistKind::Explicit => {
                let path = self.dist_file.as_ref().ok_or_else(|| {
                    Error::invalid("dist-file", "explicit distribution needs --dist-file")
                })?;
                let probs = read_probs(path)?;
                if let Some(n) = self.n_items {
                    if n as usize != probs.len() {
                        return Err(Error::invalid(
                            "n-items",
                            format!("file holds {} probabilities, flag says {n}", probs.len()),
                        ));
                    }
                }
                ArrivalDistribution::explicit(probs)
            }
        }
    }

    fn required_n(&self) -> Result<u32> {
        self.n_items.ok_or_else(|| Error::invalid("n-items", "universe size is required"))
    }

    fn echo(&self, dist: &ArrivalDistribution, s: &mut Settings) {
        let kind = match self.dist {
            DistKind::Zipf => "zipf",
            DistKind::Uniform => "uniform",
            DistKind::Explicit => "explicit",
        };
        put(s, "dist", kind);
        put(s, "n-items", dist.n_items());
        if self.dist == DistKind::Zipf {
            put(s, "alpha", self.alpha);
        }
        if let (DistKind::Explicit, Some(path)) = (self.dist, &self.dist_file) {
            put(s, "dist-file", path.display());
        }
    }
}

fn read_probs(path: &Path) -> Result<Vec<f64>> {
    let text = fs::read_to_string(path)?;
    let mut probs = Vec::new();
    for (idx, raw) in text.lines().enumerate() {
        let line = raw.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let p: f64 = line.parse().map_err(|_| Error::Config {
            line: idx + 1,
            reason: format!("expected a probability, got '{line}'"),
        })?;
        probs.push(p);
    }
    let sum = kahan_sum(probs.iter().copied());
    if (sum - 1.0).abs() > 1e-9 {
        return Err(Error::invalid(
            "dist-file",
            format!("probabilities sum to {sum}, want 1 within 1e-9"),
        ));
    }
    Ok(probs)
}

#[derive(Args, Debug)]
struct OutOpts {
    /// Output path stem; writes <out>.json and <out>.csv
    #[arg(long)]
    out: Option<PathBuf>,
    /// Which artifacts to write
    #[arg(long, value_enum, default_value_t = OutFormat::Both)]
    format: OutFormat,
}

#[derive(ValueEnum, Clone, Copy, Debug, PartialEq)]
enum OutFormat {
    Json,
    Csv,
    Both,
}

#[derive(Args, Debug)]
struct RunOpts {
    /// Flat key=value defaults; flags given on the command line win
    #[arg(long)]
    config: Option<PathBuf>,
    /// Worker threads for parallel runs (default: all cores)
    #[arg(long)]
    workers: Option<usize>,
}

#[derive(Args, Debug)]
struct TheoryArgs {
    #[command(flatten)]
    dist: DistOpts,
    /// Heavy-block buckets
    #[arg(long)]
    m1: u32,
    #[arg(long, default_value_t = 0)]
    beta_seed: u64,
    /// Single threshold to evaluate
    #[arg(long)]
    lambda: Option<u64>,
    /// Thresholds to evaluate: comma list and/or a..b ranges
    #[arg(long)]
    lambda_grid: Option<String>,
    /// Evaluate the per-bucket candidate thresholds
    #[arg(long)]
    candidates: bool,
    /// CM width; adds the expected-error column
    #[arg(long)]
    m2: Option<u32>,
    #[command(flatten)]
    out: OutOpts,
    #[command(flatten)]
    run: RunOpts,
}

#[derive(Args, Debug)]
struct TuneArgs {
    #[command(flatten)]
    dist: DistOpts,
    /// Fixed heavy width: tune the threshold only
    #[arg(long)]
    m1: Option<u32>,
    /// Total memory in cells: search the heavy/CM split too
    #[arg(long)]
    budget: Option<u64>,
    /// Cells one heavy bucket costs
    #[arg(long, default_value_t = 3)]
    cost_per_bucket: u64,
    /// CM rows assumed by the budget
    #[arg(long, default_value_t = 1)]
    d: u32,
    /// Heavy widths to try under --budget, comma list
    #[arg(long)]
    m1_grid: Option<String>,
    /// Bucket hashes averaged per evaluation
    #[arg(long, default_value_t = 100)]
    n_samp: u32,
    /// Master seed the hash draws derive from
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Score every threshold up to the max load instead of the candidate union
    #[arg(long)]
    dense: bool,
    #[command(flatten)]
    out: OutOpts,
    #[command(flatten)]
    run: RunOpts,
}

#[derive(Args, Debug)]
struct SimulateArgs {
    #[command(flatten)]
    dist: DistOpts,
    /// Heavy-block buckets; 0 runs the plain CM baseline
    #[arg(long)]
    m1: u32,
    /// CM width
    #[arg(long)]
    m2: u32,
    /// CM rows
    #[arg(long, default_value_t = 1)]
    d: u32,
    /// Single threshold to run
    #[arg(long)]
    lambda: Option<u64>,
    /// Thresholds to run: comma list and/or a..b ranges
    #[arg(long)]
    lambda_grid: Option<String>,
    /// Stream length
    #[arg(long)]
    tau: u64,
    /// Independent runs per threshold
    #[arg(long, default_value_t = 1)]
    runs: u32,
    #[arg(long, default_value_t = 0)]
    beta_seed: u64,
    /// Master seed; per-run stream and column seeds derive from it
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Carry ground truth and check the counter identities as the stream runs
    #[arg(long)]
    instrumented: bool,
    #[command(flatten)]
    out: OutOpts,
    #[command(flatten)]
    run: RunOpts,
}

#[derive(Args, Debug)]
struct BoundArgs {
    #[arg(long)]
    n_items: u64,
    #[arg(long)]
    m1: u32,
    /// Tail probability the ceiling may be exceeded with
    #[arg(long, default_value_t = 0.05)]
    delta: f64,
    /// Optional JSON output path stem
    #[arg(long)]
    out: Option<PathBuf>,
    #[command(flatten)]
    run: RunOpts,
}

#[derive(Args, Debug)]
struct ValidateArgs {
    /// Run a single family: root-finding, election-oracle, walk-oracle,
    /// mass-conservation, theory-vs-sim, noise-floor
    #[arg(long)]
    only: Option<String>,
    /// Corrupt a counter mid-run; the suite must catch it and fail
    #[arg(long)]
    inject_corruption: bool,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Optional report path stem
    #[arg(long)]
    out: Option<PathBuf>,
    #[command(flatten)]
    run: RunOpts,
}

fn dispatch(cli: Cli) -> Result<i32> {
    let workers = match &cli.cmd {
        Cmd::Theory(a) => a.run.workers,
        Cmd::Tune(a) => a.run.workers,
        Cmd::Simulate(a) => a.run.workers,
        Cmd::Bound(a) => a.run.workers,
        Cmd::Validate(a) => a.run.workers,
    };
    if let Some(w) = workers {
        if w == 0 {
            return Err(Error::invalid("workers", "need at least one thread"));
        }
        let _ = rayon::ThreadPoolBuilder::new().num_threads(w).build_global();
    }
    match cli.cmd {
        Cmd::Theory(a) => cmd_theory(&a).map(|()| 0),
        Cmd::Tune(a) => cmd_tune(&a).map(|()| 0),
        Cmd::Simulate(a) => cmd_simulate(&a).map(|()| 0),
        Cmd::Bound(a) => cmd_bound(&a).map(|()| 0),
        Cmd::Validate(a) => cmd_validate(&a),
    }
}

// ---- config file merging ----------------------------------------------

const BOOL_KEYS: &[&str] = &["candidates", "dense", "instrumented", "inject-corruption"];
const VALUE_KEYS: &[&str] = &[
    "dist", "alpha", "n-items", "dist-file", "m1", "m2", "d", "lambda", "lambda-grid", "tau",
    "runs", "n-samp", "beta-seed", "seed", "budget", "cost-per-bucket", "m1-grid", "delta",
    "only", "out", "format", "workers",
];

/// Expands a --config file into synthetic flags placed right after the
/// subcommand, so flags typed on the command line override the file.
fn merge_config(argv: Vec<String>) -> Result<Vec<String>> {
    let mut path: Option<PathBuf> = None;
    let mut i = 0;
    while i < argv.len() {
        if argv[i] == "--config" {
            path = argv.get(i + 1).map(PathBuf::from);
            i += 2;
        } else if let Some(p) = argv[i].strip_prefix("--config=") {
            path = Some(PathBuf::from(p));
            i += 1;
        } else {
            i += 1;
        }
    }
    let Some(path) = path else { return Ok(argv) };
    let text = fs::read_to_string(&path)?;
    let mut synth = Vec::new();
    for (idx, raw) in text.lines().enumerate() {
        let line = raw.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let Some((key, value)) = line.split_once('=') else {
            return Err(Error::Config { line: idx + 1, reason: "expected key=value".into() });
        };
        let (key, value) = (key.trim(), value.trim());
        if key == "config" {
            return Err(Error::Config { line: idx + 1, reason: "config files cannot nest".into() });
        }
        if BOOL_KEYS.contains(&key) {
            match value {
                "true" => synth.push(format!("--{key}")),
                "false" => {}
                _ => {
                    return Err(Error::Config {
                        line: idx + 1,
                        reason: format!("{key} takes true or false, got '{value}'"),
                    })
                }
            }
        } else if VALUE_KEYS.contains(&key) {
            synth.push(format!("--{key}={value}"));
        } else {
            return Err(Error::Config { line: idx + 1, reason: format!("unknown key '{key}'") });
        }
    }
    let at = argv
        .iter()
        .enumerate()
        .skip(1)
        .find(|(_, a)| !a.starts_with('-'))
        .map(|(i, _)| i + 1);
    let Some(at) = at else { return Ok(argv) };
    let mut merged = argv;
    merged.splice(at..at, synth);
    Ok(merged)
}

// ---- manifests and output plumbing -------------------------------------

type Settings = BTreeMap<String, String>;

#[derive(Serialize)]
struct Manifest {
    tool: &'static str,
    version: &'static str,
    command: &'static str,
    settings: Settings,
}

fn manifest(command: &'static str, settings: Settings) -> Manifest {
    Manifest { tool: "esketch", version: env!("CARGO_PKG_VERSION"), command, settings }
}

fn put(s: &mut Settings, key: &str, value: impl ToString) {
    s.insert(key.to_string(), value.to_string());
}

/// Manifest as CSV comment lines, ending before the header row.
fn csv_preamble(m: &Manifest) -> String {
    let mut s = format!("# esketch {} {}\n", m.version, m.command);
    for (k, v) in &m.settings {
        let _ = writeln!(s, "# {k}={v}");
    }
    s
}

fn emit(out: &OutOpts, doc: &Value, csv: Option<&str>, extra: &[(&str, String)]) -> Result<()> {
    let json_text = format!("{doc:#}\n");
    match &out.out {
        Some(stem) => {
            if out.format != OutFormat::Csv {
                fs::write(stem.with_extension("json"), &json_text)?;
            }
            if out.format != OutFormat::Json {
                if let Some(c) = csv {
                    fs::write(stem.with_extension("csv"), c)?;
                }
                for (ext, text) in extra {
                    fs::write(stem.with_extension(ext), text)?;
                }
            }
        }
        None => {
            if out.format == OutFormat::Csv {
                if let Some(c) = csv {
                    print!("{c}");
                }
            } else {
                print!("{json_text}");
            }
        }
    }
    Ok(())
}

/// Comma list and/or inclusive a..b ranges of thresholds, sorted and deduplicated.
fn parse_lambda_grid(spec: &str) -> Result<Vec<u64>> {
    let bad = |part: &str| {
        Error::invalid(
            "lambda-grid",
            format!("bad entry '{part}', want integers >= 1 as k, a..b, or a comma list"),
        )
    };
    let mut grid = Vec::new();
    for part in spec.split(',') {
        let part = part.trim();
        if let Some((a, b)) = part.split_once("..") {
            let a: u64 = a.trim().parse().map_err(|_| bad(part))?;
            let b: u64 = b.trim().parse().map_err(|_| bad(part))?;
            if a == 0 || a > b {
                return Err(bad(part));
            }
            grid.extend(a..=b);
        } else {
            let l: u64 = part.parse().map_err(|_| bad(part))?;
            if l == 0 {
                return Err(bad(part));
            }
            grid.push(l);
        }
    }
    if grid.is_empty() {
        return Err(Error::invalid("lambda-grid", "empty threshold grid"));
    }
    grid.sort_unstable();
    grid.dedup();
    Ok(grid)
}

fn parse_m1_grid(spec: &str) -> Result<Vec<u32>> {
    let grid: Vec<u32> = spec
        .split(',')
        .map(|part| {
            part.trim()
                .parse()
                .map_err(|_| Error::invalid("m1-grid", format!("bad entry '{}'", part.trim())))
        })
        .collect::<Result<_>>()?;
    if grid.is_empty() {
        return Err(Error::invalid("m1-grid", "empty grid"));
    }
    Ok(grid)
}

fn join<T: ToString>(values: &[T]) -> String {
    values.iter().map(T::to_string).collect::<Vec<_>>().join(",")
}

// ---- theory -------------------------------------------------------------

fn cmd_theory(a: &TheoryArgs) -> Result<()> {
    let dist = a.dist.build()?;
    if a.m1 == 0 {
        return Err(Error::invalid("m1", "theory needs a heavy block"));
    }
    let assignment = assign_buckets(&dist, a.m1, a.beta_seed)?;
    let cands = tuning::candidate_set(&assignment)?;
    let tuned = tuning::lambda_star(&assignment)?;

    let mut grid: Vec<u64> = Vec::new();
    if let Some(l) = a.lambda {
        grid.push(l);
    }
    if let Some(spec) = &a.lambda_grid {
        grid.extend(parse_lambda_grid(spec)?);
    }
    if a.candidates {
        grid.extend(cands.values.iter().copied());
    }
    if grid.contains(&0) {
        return Err(Error::invalid("lambda", "thresholds start at 1"));
    }
    if grid.is_empty() {
        return Err(Error::invalid("lambda", "need --lambda, --lambda-grid, or --candidates"));
    }
    grid.sort_unstable();
    grid.dedup();

    let curve: Vec<(u64, f64)> = grid
        .iter()
        .map(|&l| analysis::absorbed_mass_total(&assignment, l as f64).map(|g| (l, g)))
        .collect::<Result<_>>()?;

    let mut settings = Settings::new();
    a.dist.echo(&dist, &mut settings);
    put(&mut settings, "m1", a.m1);
    put(&mut settings, "beta-seed", a.beta_seed);
    put(&mut settings, "candidates", a.candidates);
    put(&mut settings, "lambdas", join(&grid));
    if let Some(m2) = a.m2 {
        put(&mut settings, "m2", m2);
    }
    let m = manifest("theory", settings);

    let curve_json: Vec<Value> = curve
        .iter()
        .map(|&(l, g)| match a.m2 {
            Some(m2) => json!({
                "lambda": l,
                "g": g,
                "expected_error": analysis::expected_limiting_error(g, m2),
            }),
            None => json!({ "lambda": l, "g": g }),
        })
        .collect();
    let buckets: Vec<Value> = assignment
        .buckets()
        .iter()
        .map(|b| {
            json!({
                "bucket": b.index,
                "n_items": b.n(),
                "mass": b.mass,
                "crit_lambda": b.crit_lambda,
            })
        })
        .collect();
    let mut doc = json!({
        "manifest": serde_json::to_value(&m)?,
        "lambda_star": tuned.lambda_star,
        "g_at_star": tuned.g_at_star,
        "curve": curve_json,
        "buckets": buckets,
    });
    if a.candidates {
        doc["candidates"] = json!(cands.values);
    }

    let mut csv = csv_preamble(&m);
    if let Some(m2) = a.m2 {
        csv.push_str("lambda,g,expected_error\n");
        for &(l, g) in &curve {
            let _ = writeln!(csv, "{l},{g},{}", analysis::expected_limiting_error(g, m2));
        }
    } else {
        csv.push_str("lambda,g\n");
        for &(l, g) in &curve {
            let _ = writeln!(csv, "{l},{g}");
        }
    }
    emit(&a.out, &doc, Some(&csv), &[])
}

// ---- tune ---------------------------------------------------------------

fn cmd_tune(a: &TuneArgs) -> Result<()> {
    let dist = a.dist.build()?;
    if a.n_samp == 0 {
        return Err(Error::invalid("n-samp", "need at least one hash sample"));
    }
    let seeds: Vec<u64> = (0..a.n_samp as u64).map(|k| derive_seed(a.seed, k)).collect();

    let mut settings = Settings::new();
    a.dist.echo(&dist, &mut settings);
    put(&mut settings, "n-samp", a.n_samp);
    put(&mut settings, "seed", a.seed);
    put(&mut settings, "dense", a.dense);

    let result: TuneResult = match (a.m1, a.budget) {
        (Some(_), Some(_)) => {
            return Err(Error::invalid("m1", "pick --m1 or --budget, not both"));
        }
        (None, None) => {
            return Err(Error::invalid("m1", "need --m1 (fixed split) or --budget (search)"));
        }
        (Some(m1), None) => {
            put(&mut settings, "m1", m1);
            if a.dense {
                tuning::lambda_hat_star_dense(&dist, m1, &seeds)?
            } else {
                tuning::lambda_hat_star(&dist, m1, &seeds)?
            }
        }
        (None, Some(budget)) => {
            let spec = a
                .m1_grid
                .as_ref()
                .ok_or_else(|| Error::invalid("m1-grid", "budget search needs --m1-grid"))?;
            let m1_grid = parse_m1_grid(spec)?;
            put(&mut settings, "budget", budget);
            put(&mut settings, "cost-per-bucket", a.cost_per_bucket);
            put(&mut settings, "d", a.d);
            put(&mut settings, "m1-grid", join(&m1_grid));
            tuning::grid_search(&GridSearchParams {
                dist: &dist,
                budget,
                cost_per_bucket: a.cost_per_bucket,
                d: a.d,
                m1_grid: &m1_grid,
                seeds: &seeds,
                dense: a.dense,
            })?
        }
    };

    let m = manifest("tune", settings);
    let doc = json!({
        "manifest": serde_json::to_value(&m)?,
        "result": serde_json::to_value(&result)?,
    });

    let mut csv = csv_preamble(&m);
    if a.budget.is_some() {
        csv.push_str("m1,m2,lambda,g_hat,expected_error\n");
        for row in &result.grid {
            let _ = writeln!(
                csv,
                "{},{},{},{},{}",
                row.m1, row.m2, row.lambda, row.g_hat, row.expected_error
            );
        }
    } else {
        csv.push_str("lambda,g_hat\n");
        for row in &result.table {
            let _ = writeln!(csv, "{},{}", row.lambda, row.g_hat);
        }
    }
    emit(&a.out, &doc, Some(&csv), &[])
}

// ---- simulate -----------------------------------------------------------

fn cmd_simulate(a: &SimulateArgs) -> Result<()> {
    let dist = a.dist.build()?;
    if a.tau == 0 {
        return Err(Error::invalid("tau", "empty stream"));
    }
    if a.runs == 0 {
        return Err(Error::invalid("runs", "need at least one run"));
    }
    let mut lambdas: Vec<u64> = Vec::new();
    if let Some(l) = a.lambda {
        if l == 0 {
            return Err(Error::invalid("lambda", "thresholds start at 1"));
        }
        lambdas.push(l);
    }
    if let Some(spec) = &a.lambda_grid {
        lambdas.extend(parse_lambda_grid(spec)?);
    }
    if lambdas.is_empty() {
        return Err(Error::invalid("lambda", "need --lambda or --lambda-grid"));
    }
    lambdas.sort_unstable();
    lambdas.dedup();

    let detail = if !a.instrumented && a.m1 > 0 && a.runs >= 2 {
        sim::sweep_lambda_detailed(&SweepParams {
            dist: &dist,
            m1: a.m1,
            m2: a.m2,
            d: a.d,
            beta_seed: a.beta_seed,
            tau: a.tau,
            n_runs: a.runs,
            master_seed: a.seed,
            lambdas: &lambdas,
        })
    } else {
        simulate_serial(&dist, a, &lambdas)
    };
    let detail = match detail {
        Ok(d) => d,
        Err(Error::InvariantViolation(msg)) => {
            return Err(save_violation(msg, a.out.out.as_deref()));
        }
        Err(e) => return Err(e),
    };

    let mut settings = Settings::new();
    a.dist.echo(&dist, &mut settings);
    put(&mut settings, "m1", a.m1);
    put(&mut settings, "m2", a.m2);
    put(&mut settings, "d", a.d);
    put(&mut settings, "lambdas", join(&lambdas));
    put(&mut settings, "tau", a.tau);
    put(&mut settings, "runs", a.runs);
    put(&mut settings, "beta-seed", a.beta_seed);
    put(&mut settings, "seed", a.seed);
    put(&mut settings, "instrumented", a.instrumented);
    let m = manifest("simulate", settings);

    let doc = json!({
        "manifest": serde_json::to_value(&m)?,
        "sweep": serde_json::to_value(&detail.summary)?,
    });

    let mut csv = csv_preamble(&m);
    csv.push_str("lambda,g_theory,vbar_mean,vbar_stderr,are_mean,are_q1,are_median,are_q3\n");
    for p in &detail.summary.points {
        let _ = writeln!(
            csv,
            "{},{},{},{},{},{},{},{}",
            p.lambda, p.g_theory, p.vbar_mean, p.vbar_stderr, p.are_mean, p.are_q1, p.are_median,
            p.are_q3
        );
    }

    let mut runs_csv = csv_preamble(&m);
    runs_csv.push_str("lambda,run,v_bar,are,err0_mean\n");
    for (j, &lambda) in lambdas.iter().enumerate() {
        for (k, r) in detail.runs[j].iter().enumerate() {
            let _ = writeln!(runs_csv, "{lambda},{k},{},{},{}", r.v_bar, r.are, r.err0_mean);
        }
    }
    emit(&a.out, &doc, Some(&csv), &[("runs.csv", runs_csv)])
}

/// One sketch per (threshold, run) via run_once, deriving the same per-run
/// stream and column seeds as the parallel sweep; covers the single-run,
/// baseline (m1 = 0), and instrumented paths.
fn simulate_serial(
    dist: &ArrivalDistribution,
    a: &SimulateArgs,
    lambdas: &[u64],
) -> Result<SweepDetail> {
    let n_items = u32::try_from(dist.n_items())
        .map_err(|_| Error::invalid("n_items", "universe exceeds u32"))?;
    let g_theory: Vec<f64> = if a.m1 == 0 {
        vec![0.0; lambdas.len()]
    } else {
        let assignment = assign_buckets(dist, a.m1, a.beta_seed)?;
        lambdas
            .iter()
            .map(|&l| analysis::absorbed_mass_total(&assignment, l as f64))
            .collect::<Result<_>>()?
    };
    let stream_master = derive_seed(a.seed, 1);
    let cm_master = derive_seed(a.seed, 2);
    let mut runs = vec![Vec::with_capacity(a.runs as usize); lambdas.len()];
    for k in 0..a.runs as u64 {
        let spec =
            StreamSpec { dist: dist.clone(), tau: a.tau, seed: derive_seed(stream_master, k) };
        let cm_seed = derive_seed(cm_master, k);
        for (j, &lambda) in lambdas.iter().enumerate() {
            let config =
                SketchConfig::new(a.m1, a.m2, a.d, lambda, n_items, a.beta_seed, cm_seed);
            runs[j].push(sim::run_once(&config, &spec, a.instrumented)?);
        }
    }
    let summary = sim::aggregate_sweep(lambdas, &g_theory, &runs);
    Ok(SweepDetail { summary, runs })
}

/// Splits the state dump out of a violation message into its own file so
/// the failure is inspectable without scraping stderr.
fn save_violation(msg: String, stem: Option<&Path>) -> Error {
    let marker = "snapshot: ";
    let Some(idx) = msg.find(marker) else { return Error::InvariantViolation(msg) };
    let head = &msg[..idx];
    let snap = &msg[idx + marker.len()..];
    let path = stem
        .map(|s| s.with_extension("violation.json"))
        .unwrap_or_else(|| PathBuf::from("esketch-violation.json"));
    match fs::write(&path, snap) {
        Ok(()) => Error::InvariantViolation(format!("{head}snapshot written to {}", path.display())),
        Err(_) => Error::InvariantViolation(msg),
    }
}

// ---- bound --------------------------------------------------------------

fn cmd_bound(a: &BoundArgs) -> Result<()> {
    let bound = tuning::hp_bound(a.n_items, a.m1, a.delta)?;
    let mut settings = Settings::new();
    put(&mut settings, "n-items", a.n_items);
    put(&mut settings, "m1", a.m1);
    put(&mut settings, "delta", a.delta);
    let m = manifest("bound", settings);
    let doc = json!({
        "manifest": serde_json::to_value(&m)?,
        "bound": bound,
        "lambda_search_max": bound.ceil() as u64,
    });
    let text = format!("{doc:#}\n");
    print!("{text}");
    if let Some(stem) = &a.out {
        fs::write(stem.with_extension("json"), &text)?;
    }
    Ok(())
}

// ---- validate -----------------------------------------------------------

const FAMILIES: &[&str] = &[
    "root-finding",
    "election-oracle",
    "walk-oracle",
    "mass-conservation",
    "theory-vs-sim",
    "noise-floor",
];

#[derive(Serialize)]
struct Check {
    family: &'static str,
    name: String,
    passed: bool,
    detail: String,
}

fn check(family: &'static str, name: &str, passed: bool, detail: String) -> Check {
    Check { family, name: name.to_string(), passed, detail }
}

fn cmd_validate(a: &ValidateArgs) -> Result<i32> {
    if let Some(f) = &a.only {
        if !FAMILIES.contains(&f.as_str()) {
            return Err(Error::invalid(
                "only",
                format!("unknown family '{f}', one of: {}", FAMILIES.join(", ")),
            ));
        }
    }
    let mut checks = Vec::new();
    for &family in FAMILIES {
        if a.only.as_deref().is_some_and(|only| only != family) {
            continue;
        }
        let batch = match family {
            "root-finding" => check_root_finding(),
            "election-oracle" => check_election_oracle(a.seed),
            "walk-oracle" => check_walk_oracle(a.seed),
            "mass-conservation" => check_mass_conservation(a.seed, a.inject_corruption),
            "theory-vs-sim" => check_theory_vs_sim(a.seed),
            _ => check_noise_floor(a.seed),
        };
        checks.extend(batch?);
    }
    for c in &checks {
        eprintln!("{} {}/{}: {}", if c.passed { "PASS" } else { "FAIL" }, c.family, c.name, c.detail);
    }
    let passed = checks.iter().all(|c| c.passed);

    let mut settings = Settings::new();
    put(&mut settings, "only", a.only.as_deref().unwrap_or("all"));
    put(&mut settings, "inject-corruption", a.inject_corruption);
    put(&mut settings, "seed", a.seed);
    let m = manifest("validate", settings);
    let doc = json!({
        "manifest": serde_json::to_value(&m)?,
        "passed": passed,
        "checks": serde_json::to_value(&checks)?,
    });
    let text = format!("{doc:#}\n");
    print!("{text}");
    if let Some(stem) = &a.out {
        fs::write(stem.with_extension("json"), &text)?;
    }
    Ok(if passed { 0 } else { 1 })
}

fn check_root_finding() -> Result<Vec<Check>> {
    let mut checks = Vec::new();
    let mut worst: f64 = 0.0;
    let mut pairs = 0u32;
    for lambda in 1..=10u32 {
        for &z in &[1.5, 2.0, 3.0, 5.0, 10.0] {
            if (lambda as f64) <= z - 1.0 {
                continue;
            }
            let r = analysis::return_prob(lambda as f64, z)?;
            worst = worst.max((analysis::geom_series(r, lambda as f64) - z).abs());
            pairs += 1;
        }
    }
    checks.push(check(
        "root-finding",
        "residual-grid",
        worst <= 1e-10,
        format!("max residual {worst:.2e} over {pairs} supercritical pairs"),
    ));

    let recurrent = [(1.0, 3.0), (2.0, 3.5), (4.0, 40.0)]
        .iter()
        .all(|&(l, z)| analysis::return_prob(l, z).map(|r| r == 1.0).unwrap_or(false));
    checks.push(check(
        "root-finding",
        "recurrent-regime",
        recurrent,
        "return probability is exactly 1 at and below the critical threshold".into(),
    ));

    let r = analysis::return_prob(3.0, 2.0)?;
    let dev = (r - 0.543_689_012_692_076_4).abs();
    checks.push(check(
        "root-finding",
        "frozen-root",
        dev <= 1e-9,
        format!("root_r(3,2) off by {dev:.2e}"),
    ));
    Ok(checks)
}

fn check_election_oracle(seed: u64) -> Result<Vec<Check>> {
    let trials = 20_000u64;
    let cases: [(&str, Vec<f64>, u64); 2] =
        [("pair", vec![0.6, 0.4], 2), ("triple", vec![0.5, 0.3, 0.2], 3)];
    let mut checks = Vec::new();
    for (i, (name, probs, lambda)) in cases.into_iter().enumerate() {
        let bucket = BucketProfile::standalone(probs)?;
        let formula = analysis::election_probs(&bucket, lambda as f64)?;
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, 40 + i as u64));
        let report = sim::markov_election_oracle(&bucket, lambda, trials, 2_000_000, &mut rng)?;
        let mut worst_sigmas: f64 = 0.0;
        for (a, f) in formula.iter().zip(&report.frequencies) {
            let se = (a * (1.0 - a) / trials as f64).sqrt();
            let sigmas = if se > 0.0 { (f - a).abs() / se } else { (f - a).abs() * 1e12 };
            worst_sigmas = worst_sigmas.max(sigmas);
        }
        let passed = worst_sigmas <= 4.0 && report.unresolved < 1e-3;
        checks.push(check(
            "election-oracle",
            name,
            passed,
            format!(
                "worst deviation {worst_sigmas:.2} standard errors, unresolved {:.1e}",
                report.unresolved
            ),
        ));
    }
    Ok(checks)
}

fn check_walk_oracle(seed: u64) -> Result<Vec<Check>> {
    let trials = 20_000u64;
    let cases: [(&str, f64, f64, u64); 3] = [
        ("supercritical-shallow", 0.5, 1.0, 3),
        ("supercritical-deep", 0.3, 0.9, 5),
        ("recurrent", 0.2, 0.8, 2),
    ];
    let mut checks = Vec::new();
    for (i, (name, p, mu, lambda)) in cases.into_iter().enumerate() {
        let expected = analysis::return_prob(lambda as f64, mu / p)?;
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, 50 + i as u64));
        let report = sim::walk_return_oracle(p, mu, lambda, 1, trials, 2_000_000, &mut rng)?;
        let se = (expected * (1.0 - expected) / trials as f64).sqrt();
        let dev = (report.empirical - expected).abs();
        let passed = dev <= 4.0 * se + 1e-9 && report.unresolved < 1e-3;
        checks.push(check(
            "walk-oracle",
            name,
            passed,
            format!("|empirical - r| = {dev:.2e} (se {se:.2e})"),
        ));
    }
    Ok(checks)
}

fn check_mass_conservation(seed: u64, inject: bool) -> Result<Vec<Check>> {
    let tau = 20_000u64;
    let cases: [(&str, ArrivalDistribution, u32, u32, u32, u64); 2] = [
        ("zipf-d2", ArrivalDistribution::zipf(80, 1.0)?, 6, 32, 2, 2),
        ("uniform-d1", ArrivalDistribution::uniform(40)?, 4, 16, 1, 1),
    ];
    let mut checks = Vec::new();
    for (i, (name, dist, m1, m2, d, lambda)) in cases.into_iter().enumerate() {
        let n_items = dist.n_items() as u32;
        let config = SketchConfig::new(
            m1,
            m2,
            d,
            lambda,
            n_items,
            derive_seed(seed, 60 + i as u64),
            derive_seed(seed, 70 + i as u64),
        );
        let spec = StreamSpec { dist, tau, seed: derive_seed(seed, 80 + i as u64) };
        let mut inst = InstrumentedSketch::new(config)?;
        let mut violation: Option<String> = None;
        let mut checkpoints = 0u32;
        for (step, item) in spec.arrivals().enumerate() {
            inst.update(item);
            if inject && step as u64 + 1 == tau / 2 {
                inst.sketch_mut().corrupt_cm_cell(0, 3, 7);
            }
            if (step as u64 + 1).is_multiple_of(1024) {
                checkpoints += 1;
                if let Err(e) = inst.check_identity() {
                    violation = Some(e.to_string());
                    break;
                }
            }
        }
        if violation.is_none() {
            checkpoints += 1;
            violation = inst
                .check_identity()
                .and_then(|()| inst.check_estimate_bounds())
                .err()
                .map(|e| e.to_string());
        }
        let passed = violation.is_none();
        let detail = violation.unwrap_or_else(|| {
            format!("counter identity and row mass hold at {checkpoints} checkpoints")
        });
        checks.push(check("mass-conservation", name, passed, detail));
    }
    Ok(checks)
}

fn check_theory_vs_sim(seed: u64) -> Result<Vec<Check>> {
    let dist = ArrivalDistribution::uniform(120)?;
    let out = sim::sweep_lambda(&SweepParams {
        dist: &dist,
        m1: 8,
        m2: 64,
        d: 1,
        beta_seed: derive_seed(seed, 90),
        tau: 20_000,
        n_runs: 8,
        master_seed: derive_seed(seed, 91),
        lambdas: &[1, 2, 3, 4],
    })?;
    Ok(vec![check(
        "theory-vs-sim",
        "uniform-sweep",
        out.max_abs_dev <= 0.05,
        format!("max |g - vbar| = {:.4} over 4 thresholds, 8 runs", out.max_abs_dev),
    )])
}

fn check_noise_floor(seed: u64) -> Result<Vec<Check>> {
    let dist = ArrivalDistribution::uniform(60)?;
    let spec = StreamSpec { dist: dist.clone(), tau: 10_000, seed: derive_seed(seed, 95) };
    let mut checks = Vec::new();

    let config = SketchConfig::new(4, 32, 1, 2, 60, derive_seed(seed, 96), derive_seed(seed, 97));
    let metrics = sim::run_once(&config, &spec, false)?;
    let dev = (metrics.err0_mean - (1.0 - metrics.v_bar) / 32.0).abs();
    checks.push(check(
        "noise-floor",
        "depth-one-identity",
        dev <= 1e-12,
        format!("|err0 - (1 - vbar)/m2| = {dev:.2e}"),
    ));

    let config = SketchConfig::new(0, 32, 1, 1, 60, 0, derive_seed(seed, 98));
    let metrics = sim::run_once(&config, &spec, false)?;
    checks.push(check(
        "noise-floor",
        "baseline-floor",
        metrics.err0_mean == 1.0 / 32.0,
        format!("plain CM floor {}", metrics.err0_mean),
    ));
    Ok(checks)
}
