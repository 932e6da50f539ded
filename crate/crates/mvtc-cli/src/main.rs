//! `mvtc` command line: synthetic data generation, batch fitting, dynamic
//! replay, scoring, factor export, and per-iteration benchmarking.
//!
//! Every flag of every subcommand has a config-file equivalent: pass
//! `--config file.json` with keys named after the flags; explicit flags win
//! over the file, which wins over built-in defaults.

use clap::{Args, Parser, Subcommand};
use mvtc::error::Error;
use mvtc::eval::{
    bench_sweep, score, write_bench_csv, ExperimentMode, ExperimentSpec, FactorExport,
};
use mvtc::events::{read_events_csv, write_events_csv, IngestOptions, MultiVersionDataset};
use mvtc::graph::LocationGraph;
use mvtc::solver::{fit, Momentum, SolverConfig};
use mvtc::synth::{
    emit_events, generate, write_truth_csv, DelayProfile, GeneratorConfig, TruthRow,
};
use mvtc::tensor::Tensor3;
use serde::Deserialize;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

#[derive(Parser)]
#[command(name = "mvtc", version, about = "Multi-version tensor completion")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic event stream and its withheld truth.
    Synth(SynthArgs),
    /// Batch-fit the completion model and write estimates and factors.
    Fit(FitArgs),
    /// Replay a stream dynamically through the online tracker.
    Track(TrackArgs),
    /// Score an estimate CSV against a truth CSV.
    Score(ScoreArgs),
    /// Batch-fit and write only the factor JSON.
    ExportFactors(FitArgs),
    /// Time one solver iteration across dimension doublings.
    Bench(BenchArgs),
}

fn read_config<T: for<'de> Deserialize<'de> + Default>(path: &Option<PathBuf>) -> Result<T, Error> {
    match path {
        None => Ok(T::default()),
        Some(p) => {
            let text = std::fs::read_to_string(p)?;
            Ok(serde_json::from_str(&text)?)
        }
    }
}

#[derive(Args)]
struct SynthArgs {
    /// JSON file with defaults for any of the flags below.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Locations (I).
    #[arg(long = "I")]
    locations: Option<usize>,
    /// Features (J).
    #[arg(long = "J")]
    features: Option<usize>,
    /// Generation dates (S).
    #[arg(long = "S")]
    gds: Option<usize>,
    /// Maximum updates per GD (K).
    #[arg(long = "K")]
    max_updates: Option<usize>,
    /// Planted rank (F).
    #[arg(long = "F")]
    rank: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    /// Multiplicative jitter on update fractions, in [0, 1].
    #[arg(long)]
    noise: Option<f64>,
    /// Comma-separated fixed delay fractions p_1..p_K (default front-loaded).
    #[arg(long)]
    profile: Option<String>,
    /// Plant this many location communities and emit the matching graph.
    #[arg(long)]
    communities: Option<usize>,
    /// Nonnegative model-mismatch perturbation scale.
    #[arg(long)]
    mismatch: Option<f64>,
    /// Smooth the GD factor with a moving average.
    #[arg(long)]
    smooth: bool,
    /// Also write truth rows for every GD (needed for dynamic replay).
    #[arg(long)]
    full_truth: bool,
    #[arg(long)]
    out_dir: Option<PathBuf>,
}

#[derive(Deserialize, Default)]
#[serde(deny_unknown_fields)]
struct SynthFile {
    #[serde(rename = "I")]
    locations: Option<usize>,
    #[serde(rename = "J")]
    features: Option<usize>,
    #[serde(rename = "S")]
    gds: Option<usize>,
    #[serde(rename = "K")]
    max_updates: Option<usize>,
    #[serde(rename = "F")]
    rank: Option<usize>,
    seed: Option<u64>,
    noise: Option<f64>,
    profile: Option<String>,
    communities: Option<usize>,
    mismatch: Option<f64>,
    smooth: Option<bool>,
    full_truth: Option<bool>,
    out_dir: Option<PathBuf>,
}

fn run_synth(args: SynthArgs) -> Result<(), Error> {
    let file: SynthFile = read_config(&args.config)?;
    let locations = args.locations.or(file.locations).unwrap_or(10);
    let features = args.features.or(file.features).unwrap_or(5);
    let gds = args.gds.or(file.gds).unwrap_or(30);
    let max_updates = args.max_updates.or(file.max_updates).unwrap_or(3);
    let rank = args.rank.or(file.rank).unwrap_or(2);
    let out_dir = args
        .out_dir
        .or(file.out_dir)
        .unwrap_or_else(|| PathBuf::from("."));
    let profile_str = args.profile.or(file.profile);
    let mut cfg = GeneratorConfig::new(locations, features, gds, max_updates, rank);
    cfg.seed = args.seed.or(file.seed).unwrap_or(0);
    cfg.noise_scale = args.noise.or(file.noise).unwrap_or(0.0);
    cfg.communities = args.communities.or(file.communities);
    cfg.mismatch_scale = args.mismatch.or(file.mismatch).unwrap_or(0.0);
    cfg.factor_smoothness = args.smooth || file.smooth.unwrap_or(false);
    if let Some(p) = profile_str {
        let fractions: Result<Vec<f64>, _> = p.split(',').map(|v| v.trim().parse()).collect();
        cfg.delay_profile = DelayProfile::Fixed(
            fractions.map_err(|_| Error::arg(format!("bad --profile value: {p}")))?,
        );
    }
    let full_truth = args.full_truth || file.full_truth.unwrap_or(false);

    let data = generate(&cfg)?;
    std::fs::create_dir_all(&out_dir)?;
    let horizon = gds - 1;
    let (events, withheld) = emit_events(&data.updates, &data.totals, horizon, 0);
    write_events_csv(&out_dir.join("events.csv"), &events)?;
    let truth_rows = if full_truth {
        let mut rows = Vec::new();
        for s in 0..gds {
            for j in 0..features {
                for i in 0..locations {
                    rows.push(TruthRow {
                        location: i,
                        feature: j,
                        gd: s as i64,
                        true_count: data.totals.get(i, j, s),
                    });
                }
            }
        }
        rows
    } else {
        withheld
    };
    write_truth_csv(&out_dir.join("truth.csv"), &truth_rows)?;
    if let Some(g) = &data.graph {
        g.write_csv(&out_dir.join("graph.csv"))?;
    }
    println!(
        "synth: wrote {} events and {} truth rows to {}",
        events.len(),
        truth_rows.len(),
        out_dir.display()
    );
    Ok(())
}

#[derive(Args)]
struct FitArgs {
    /// JSON file with defaults for any of the flags below.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Solver settings as a `key = value` file (flags below override it).
    #[arg(long)]
    solver_config: Option<PathBuf>,
    #[arg(long)]
    events: Option<PathBuf>,
    #[arg(long = "I")]
    locations: Option<usize>,
    #[arg(long = "J")]
    features: Option<usize>,
    #[arg(long = "K")]
    max_updates: Option<usize>,
    #[arg(long)]
    graph: Option<PathBuf>,
    #[arg(long = "F")]
    rank: Option<usize>,
    #[arg(long)]
    alpha: Option<f64>,
    #[arg(long)]
    rho: Option<f64>,
    #[arg(long)]
    rho_a: Option<f64>,
    #[arg(long)]
    max_iters: Option<usize>,
    #[arg(long)]
    init_iters: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    /// "fista" or "none".
    #[arg(long)]
    momentum: Option<String>,
    #[arg(long)]
    out_dir: Option<PathBuf>,
}

#[derive(Deserialize, Default)]
#[serde(deny_unknown_fields)]
struct FitFile {
    solver_config: Option<PathBuf>,
    events: Option<PathBuf>,
    #[serde(rename = "I")]
    locations: Option<usize>,
    #[serde(rename = "J")]
    features: Option<usize>,
    #[serde(rename = "K")]
    max_updates: Option<usize>,
    graph: Option<PathBuf>,
    #[serde(rename = "F")]
    rank: Option<usize>,
    alpha: Option<f64>,
    rho: Option<f64>,
    rho_a: Option<f64>,
    max_iters: Option<usize>,
    init_iters: Option<usize>,
    seed: Option<u64>,
    momentum: Option<String>,
    out_dir: Option<PathBuf>,
}

struct ResolvedFit {
    events: PathBuf,
    locations: usize,
    features: usize,
    max_updates: usize,
    graph: Option<PathBuf>,
    solver: SolverConfig,
    out_dir: PathBuf,
}

fn resolve_fit(args: FitArgs) -> Result<ResolvedFit, Error> {
    let file: FitFile = read_config(&args.config)?;
    let mut solver = match args.solver_config.or(file.solver_config) {
        Some(p) => SolverConfig::from_kv_str(&std::fs::read_to_string(p)?)?,
        None => SolverConfig::default(),
    };
    if let Some(v) = args.rank.or(file.rank) {
        solver.rank = v;
    }
    if let Some(v) = args.alpha.or(file.alpha) {
        solver.alpha = v;
    }
    if let Some(v) = args.rho.or(file.rho) {
        solver.rho = v;
    }
    if let Some(v) = args.rho_a.or(file.rho_a) {
        solver.rho_a = v;
    }
    if let Some(v) = args.max_iters.or(file.max_iters) {
        solver.max_outer_iters = v;
    }
    if let Some(v) = args.init_iters.or(file.init_iters) {
        solver.init_iters = v;
    }
    if let Some(v) = args.seed.or(file.seed) {
        solver.seed = v;
    }
    if let Some(m) = args.momentum.or(file.momentum) {
        solver.momentum = match m.as_str() {
            "fista" => Momentum::Fista,
            "none" => Momentum::None,
            other => return Err(Error::arg(format!("bad --momentum value: {other}"))),
        };
    }
    Ok(ResolvedFit {
        events: args
            .events
            .or(file.events)
            .ok_or_else(|| Error::arg("--events is required"))?,
        locations: args
            .locations
            .or(file.locations)
            .ok_or_else(|| Error::arg("--I is required"))?,
        features: args
            .features
            .or(file.features)
            .ok_or_else(|| Error::arg("--J is required"))?,
        max_updates: args
            .max_updates
            .or(file.max_updates)
            .ok_or_else(|| Error::arg("--K is required"))?,
        graph: args.graph.or(file.graph),
        solver,
        out_dir: args
            .out_dir
            .or(file.out_dir)
            .unwrap_or_else(|| PathBuf::from(".")),
    })
}

fn ingest_for(resolved: &ResolvedFit) -> Result<MultiVersionDataset, Error> {
    let events = read_events_csv(&resolved.events)?;
    if events.is_empty() {
        return Err(Error::arg(format!(
            "{} has no event records",
            resolved.events.display()
        )));
    }
    let horizon = events.iter().map(|e| e.ld).max().expect("non-empty");
    MultiVersionDataset::ingest(
        events,
        &IngestOptions {
            locations: resolved.locations,
            features: resolved.features,
            max_updates: resolved.max_updates,
            horizon,
            epoch: None,
        },
    )
}

fn write_estimate_csv(path: &Path, estimate: &Tensor3, epoch: i64) -> Result<(), Error> {
    let [i_dim, j_dim, s_dim] = estimate.dims();
    let mut out = String::from("gd,location,feature,estimate\n");
    for s in 0..s_dim {
        for i in 0..i_dim {
            for j in 0..j_dim {
                out.push_str(&format!(
                    "{},{},{},{}\n",
                    epoch + s as i64,
                    i,
                    j,
                    estimate.get(i, j, s)
                ));
            }
        }
    }
    std::fs::write(path, out)?;
    Ok(())
}

fn run_fit(args: FitArgs, factors_only: bool) -> Result<(), Error> {
    let resolved = resolve_fit(args)?;
    let ds = ingest_for(&resolved)?;
    let graph = match &resolved.graph {
        Some(p) => Some(LocationGraph::read_csv(p)?),
        None => None,
    };
    let result = fit(&ds, graph.as_ref(), &resolved.solver)?;
    std::fs::create_dir_all(&resolved.out_dir)?;
    let export = FactorExport::from_fit(&result, &resolved.solver);
    export.write_json(&resolved.out_dir.join("factors.json"))?;
    if !factors_only {
        write_estimate_csv(
            &resolved.out_dir.join("estimate.csv"),
            &result.estimate,
            ds.epoch(),
        )?;
        write_estimate_csv(
            &resolved.out_dir.join("hybrid_estimate.csv"),
            &result.hybrid_estimate,
            ds.epoch(),
        )?;
        std::fs::write(
            resolved.out_dir.join("solver_config.txt"),
            resolved.solver.to_kv_string(),
        )?;
        std::fs::write(
            resolved.out_dir.join("diagnostics.json"),
            serde_json::to_string_pretty(&result.diagnostics)?,
        )?;
    }
    for w in &result.diagnostics.warnings {
        eprintln!("warning: {w}");
    }
    println!(
        "fit: {} iterations, converged = {}, wrote {}",
        result.diagnostics.iterations,
        result.diagnostics.converged,
        resolved.out_dir.display()
    );
    Ok(())
}

#[derive(Args)]
struct TrackArgs {
    #[command(flatten)]
    fit: FitArgs,
    #[arg(long)]
    truth: Option<PathBuf>,
    /// Batch-fit on the first SPLIT GDs, replay the rest.
    #[arg(long)]
    split: Option<usize>,
    /// Also run a batch restart at every arrival for comparison.
    #[arg(long)]
    batch_restart: bool,
    /// Score each GD only at its first appearance.
    #[arg(long)]
    first_appearance: bool,
}

#[derive(Deserialize, Default)]
#[serde(deny_unknown_fields)]
struct TrackFile {
    truth: Option<PathBuf>,
    split: Option<usize>,
    batch_restart: Option<bool>,
    first_appearance: Option<bool>,
}

fn run_track(args: TrackArgs) -> Result<(), Error> {
    let file: TrackFile = read_config(&args.fit.config)?;
    let truth = args
        .truth
        .or(file.truth)
        .ok_or_else(|| Error::arg("--truth is required"))?;
    let split = args
        .split
        .or(file.split)
        .ok_or_else(|| Error::arg("--split is required"))?;
    let batch_restart = args.batch_restart || file.batch_restart.unwrap_or(false);
    let first_appearance = args.first_appearance || file.first_appearance.unwrap_or(false);
    let resolved = resolve_fit(args.fit)?;
    let spec = ExperimentSpec {
        mode: ExperimentMode::Dynamic,
        events_path: resolved.events,
        truth_path: truth,
        graph_path: resolved.graph,
        locations: resolved.locations,
        features: resolved.features,
        max_updates: resolved.max_updates,
        split: Some(split),
        batch_restart_arm: batch_restart,
        first_appearance_only: first_appearance,
        score_all_gds: false,
        solver: resolved.solver,
        out_dir: resolved.out_dir,
    };
    let outcome = mvtc::eval::run_dynamic(&spec)?;
    println!(
        "track: {} arrivals, online rmse {:.6} ± {:.6}, wrote {}",
        outcome.arrivals.len(),
        outcome.online_rmse.mean,
        outcome.online_rmse.std,
        spec.out_dir.display()
    );
    Ok(())
}

#[derive(Args)]
struct ScoreArgs {
    /// JSON file with defaults for any of the flags below.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Estimate CSV (`gd,location,feature,estimate`).
    #[arg(long)]
    estimate: Option<PathBuf>,
    /// Truth CSV (`location,feature,gd,true_count` or the estimate schema).
    #[arg(long)]
    truth: Option<PathBuf>,
    /// Write the report CSV here as well as printing it.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Deserialize, Default)]
#[serde(deny_unknown_fields)]
struct ScoreFile {
    estimate: Option<PathBuf>,
    truth: Option<PathBuf>,
    out: Option<PathBuf>,
}

/// (location, feature, gd) → value rows in either supported schema.
fn read_value_rows(path: &Path) -> Result<Vec<TruthRow>, Error> {
    let text = std::fs::read_to_string(path)?;
    let header = text.lines().next().map(str::trim).unwrap_or("");
    if header == "location,feature,gd,true_count" {
        return mvtc::synth::read_truth_csv(path);
    }
    if header != "gd,location,feature,estimate" {
        return Err(Error::Csv {
            path: path.display().to_string(),
            line: 1,
            msg: format!("unrecognized header `{header}`"),
        });
    }
    let mut out = Vec::new();
    for (lineno, line) in text.lines().enumerate().skip(1) {
        let line = line.trim();
        if line.is_empty() {
            continue;
        }
        let parts: Vec<&str> = line.split(',').collect();
        if parts.len() != 4 {
            return Err(Error::Csv {
                path: path.display().to_string(),
                line: lineno + 1,
                msg: format!("expected 4 fields, got {}", parts.len()),
            });
        }
        let err = |what: &str, val: &str| Error::Csv {
            path: path.display().to_string(),
            line: lineno + 1,
            msg: format!("bad {what}: {val}"),
        };
        out.push(TruthRow {
            gd: parts[0].trim().parse().map_err(|_| err("gd", parts[0]))?,
            location: parts[1]
                .trim()
                .parse()
                .map_err(|_| err("location", parts[1]))?,
            feature: parts[2]
                .trim()
                .parse()
                .map_err(|_| err("feature", parts[2]))?,
            true_count: parts[3]
                .trim()
                .parse()
                .map_err(|_| err("estimate", parts[3]))?,
        });
    }
    Ok(out)
}

fn run_score(args: ScoreArgs) -> Result<(), Error> {
    let file: ScoreFile = read_config(&args.config)?;
    let est_path = args
        .estimate
        .or(file.estimate)
        .ok_or_else(|| Error::arg("--estimate is required"))?;
    let truth_path = args
        .truth
        .or(file.truth)
        .ok_or_else(|| Error::arg("--truth is required"))?;
    let est_rows = read_value_rows(&est_path)?;
    let truth_rows = read_value_rows(&truth_path)?;
    let mut by_key = std::collections::HashMap::new();
    for r in &est_rows {
        by_key.insert((r.location, r.feature, r.gd), r.true_count);
    }
    let mut est = Vec::with_capacity(truth_rows.len());
    let mut tru = Vec::with_capacity(truth_rows.len());
    for r in &truth_rows {
        match by_key.get(&(r.location, r.feature, r.gd)) {
            Some(&v) => {
                est.push(v);
                tru.push(r.true_count);
            }
            None => {
                return Err(Error::arg(format!(
                    "no estimate for (location {}, feature {}, gd {})",
                    r.location, r.feature, r.gd
                )))
            }
        }
    }
    let report = score(&est, &tru, "truth-file")?;
    let r2 = report
        .r2
        .map(|v| format!("{v}"))
        .unwrap_or_else(|| "undefined".into());
    println!(
        "score: rmse {} mae {} r2 {r2} n {}",
        report.rmse, report.mae, report.n
    );
    if let Some(out) = args.out.or(file.out) {
        std::fs::write(
            &out,
            format!(
                "rmse,mae,r2,n\n{},{},{r2},{}\n",
                report.rmse, report.mae, report.n
            ),
        )?;
    }
    Ok(())
}

#[derive(Args)]
struct BenchArgs {
    /// JSON file with defaults for any of the flags below.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long = "I")]
    locations: Option<usize>,
    #[arg(long = "J")]
    features: Option<usize>,
    #[arg(long = "K")]
    max_updates: Option<usize>,
    #[arg(long = "S")]
    gds: Option<usize>,
    #[arg(long = "F")]
    rank: Option<usize>,
    /// Timed iterations per shape (the median is reported).
    #[arg(long)]
    iters: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Deserialize, Default)]
#[serde(deny_unknown_fields)]
struct BenchFile {
    #[serde(rename = "I")]
    locations: Option<usize>,
    #[serde(rename = "J")]
    features: Option<usize>,
    #[serde(rename = "K")]
    max_updates: Option<usize>,
    #[serde(rename = "S")]
    gds: Option<usize>,
    #[serde(rename = "F")]
    rank: Option<usize>,
    iters: Option<usize>,
    seed: Option<u64>,
    out: Option<PathBuf>,
}

fn run_bench(args: BenchArgs) -> Result<(), Error> {
    let file: BenchFile = read_config(&args.config)?;
    let base = [
        args.locations.or(file.locations).unwrap_or(64),
        args.features.or(file.features).unwrap_or(16),
        args.max_updates.or(file.max_updates).unwrap_or(4),
        args.gds.or(file.gds).unwrap_or(64),
    ];
    let rank = args.rank.or(file.rank).unwrap_or(8);
    let iters = args.iters.or(file.iters).unwrap_or(10);
    let seed = args.seed.or(file.seed).unwrap_or(0);
    let rows = bench_sweep(base, rank, iters, seed)?;
    println!("dim,value,seconds_per_iter");
    for r in &rows {
        println!("{},{},{}", r.dim, r.value, r.seconds_per_iter);
    }
    if let Some(out) = args.out.or(file.out) {
        write_bench_csv(&out, &rows)?;
    }
    Ok(())
}

fn run() -> Result<(), Error> {
    match Cli::parse().command {
        Command::Synth(args) => run_synth(args),
        Command::Fit(args) => run_fit(args, false),
        Command::ExportFactors(args) => run_fit(args, true),
        Command::Track(args) => run_track(args),
        Command::Score(args) => run_score(args),
        Command::Bench(args) => run_bench(args),
    }
}

fn main() -> ExitCode {
    match run() {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}
