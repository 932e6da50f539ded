//! Metrics and experiment protocol: scoring against withheld truth, the
//! static three-arm comparison (Naive, completed, unregularized ablation), the
//! dynamic replay protocol, per-iteration benchmarking, and factor export.

use crate::error::{Error, Result};
use crate::events::{read_events_csv, IngestOptions, MultiVersionDataset};
use crate::graph::LocationGraph;
use crate::matrix::Matrix;
use crate::online::{TrackerConfig, TrackerState};
use crate::solver::{
    fit, impute, scale_slabs, update_factor, FitResult, ProblemTerms, SolverConfig, ALL_MODES,
};
use crate::synth::{read_truth_csv, TruthRow};
use crate::tensor::{FactorSet, Tensor3, Tensor4};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use std::collections::BTreeSet;
use std::path::{Path, PathBuf};
use std::time::Instant;

/// Error metrics over one scored scope.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoreReport {
    pub rmse: f64,
    pub mae: f64,
    /// Coefficient of determination about the truth mean; `None` when the
    /// truth has zero variance over the scope.
    pub r2: Option<f64>,
    pub n: usize,
    pub scope: String,
}

/// rmse, mae, and r² of `estimates` against `truth` over aligned entries.
pub fn score(estimates: &[f64], truth: &[f64], scope: &str) -> Result<ScoreReport> {
    if estimates.is_empty() || truth.is_empty() {
        return Err(Error::arg("score needs a non-empty scope"));
    }
    if estimates.len() != truth.len() {
        return Err(Error::arg(format!(
            "score alignment mismatch: {} estimates vs {} truth entries",
            estimates.len(),
            truth.len()
        )));
    }
    let n = truth.len() as f64;
    let mut sse = 0.0;
    let mut sae = 0.0;
    for (e, t) in estimates.iter().zip(truth.iter()) {
        let d = e - t;
        sse += d * d;
        sae += d.abs();
    }
    let mean = truth.iter().sum::<f64>() / n;
    let sst: f64 = truth.iter().map(|t| (t - mean) * (t - mean)).sum();
    let r2 = if sst > 0.0 { Some(1.0 - sse / sst) } else { None };
    Ok(ScoreReport {
        rmse: (sse / n).sqrt(),
        mae: sae / n,
        r2,
        n: truth.len(),
        scope: scope.to_string(),
    })
}

/// √(Σ err² / Σ truth²): scale-free error used by the recovery checks.
pub fn relative_rmse(estimates: &[f64], truth: &[f64]) -> Result<f64> {
    if estimates.len() != truth.len() || truth.is_empty() {
        return Err(Error::arg("relative_rmse needs aligned non-empty inputs"));
    }
    let mut err = 0.0;
    let mut norm = 0.0;
    for (e, t) in estimates.iter().zip(truth.iter()) {
        err += (e - t) * (e - t);
        norm += t * t;
    }
    if norm == 0.0 {
        return Err(Error::arg("relative_rmse is undefined for zero truth"));
    }
    Ok((err / norm).sqrt())
}

/// Pulls the (estimate, truth) pairs for a truth table out of a 3-way
/// estimate, keyed by (location, feature, gd − epoch).
pub fn align_truth(
    estimate: &Tensor3,
    truth: &[TruthRow],
    epoch: i64,
) -> Result<(Vec<f64>, Vec<f64>)> {
    let [i_dim, j_dim, s_dim] = estimate.dims();
    let mut est = Vec::with_capacity(truth.len());
    let mut tru = Vec::with_capacity(truth.len());
    for row in truth {
        let s = row.gd - epoch;
        if row.location >= i_dim || row.feature >= j_dim || s < 0 || s as usize >= s_dim {
            return Err(Error::arg(format!(
                "truth row ({}, {}, gd {}) outside the estimate dims {:?}",
                row.location, row.feature, row.gd, estimate.dims()
            )));
        }
        est.push(estimate.get(row.location, row.feature, s as usize));
        tru.push(row.true_count);
    }
    Ok((est, tru))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ExperimentMode {
    Static,
    Dynamic,
}

/// One experiment run: dataset paths, shape, solver settings, output dir.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ExperimentSpec {
    pub mode: ExperimentMode,
    pub events_path: PathBuf,
    pub truth_path: PathBuf,
    pub graph_path: Option<PathBuf>,
    pub locations: usize,
    pub features: usize,
    pub max_updates: usize,
    /// Dynamic mode: batch-fit on the first `split` GDs, replay the rest.
    pub split: Option<usize>,
    /// Dynamic mode: also run a batch restart at every arrival for
    /// comparison and timing.
    pub batch_restart_arm: bool,
    /// Dynamic mode: score each GD only at its first appearance instead of
    /// at every arrival while it is under-reported.
    pub first_appearance_only: bool,
    /// Score every GD instead of only the under-reported window.
    pub score_all_gds: bool,
    pub solver: SolverConfig,
    pub out_dir: PathBuf,
}

impl ExperimentSpec {
    fn validate(&self) -> Result<()> {
        self.solver.validate()?;
        if !self.events_path.exists() {
            return Err(Error::arg(format!(
                "events file {} does not exist",
                self.events_path.display()
            )));
        }
        if !self.truth_path.exists() {
            return Err(Error::arg(format!(
                "truth file {} does not exist",
                self.truth_path.display()
            )));
        }
        if let Some(g) = &self.graph_path {
            if !g.exists() {
                return Err(Error::arg(format!("graph file {} does not exist", g.display())));
            }
        }
        if self.mode == ExperimentMode::Dynamic && self.split.is_none() {
            return Err(Error::arg("dynamic mode needs a replay split"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct StaticOutcome {
    pub naive: ScoreReport,
    pub mtc: ScoreReport,
    /// Same solve with ρ = ρ_A = 0.
    pub unregularized: ScoreReport,
}

fn load_inputs(
    spec: &ExperimentSpec,
) -> Result<(MultiVersionDataset, Vec<TruthRow>, Option<LocationGraph>)> {
    let events = read_events_csv(&spec.events_path)?;
    if events.is_empty() {
        return Err(Error::arg("events file has no records"));
    }
    let truth = read_truth_csv(&spec.truth_path)?;
    let graph = match &spec.graph_path {
        Some(p) => Some(LocationGraph::read_csv(p)?),
        None => None,
    };
    let horizon = events.iter().map(|e| e.ld).max().expect("non-empty");
    let ds = MultiVersionDataset::ingest(
        events,
        &IngestOptions {
            locations: spec.locations,
            features: spec.features,
            max_updates: spec.max_updates,
            horizon,
            epoch: None,
        },
    )?;
    Ok((ds, truth, graph))
}

fn scope_truth<'a>(
    truth: &'a [TruthRow],
    ds: &MultiVersionDataset,
    score_all: bool,
) -> Vec<&'a TruthRow> {
    let first_under = ds.fully_observed_slabs() as i64 + ds.epoch();
    truth
        .iter()
        .filter(|r| score_all || r.gd >= first_under)
        .collect()
}

fn score_rows(estimate: &Tensor3, rows: &[&TruthRow], epoch: i64, scope: &str) -> Result<ScoreReport> {
    if rows.is_empty() {
        return Err(Error::arg("no truth rows inside the scored scope"));
    }
    let owned: Vec<TruthRow> = rows.iter().map(|r| (*r).clone()).collect();
    let (est, tru) = align_truth(estimate, &owned, epoch)?;
    score(&est, &tru, scope)
}

fn write_estimate_csv(path: &Path, estimate: &Tensor3, epoch: i64) -> Result<()> {
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

fn write_reports_csv(path: &Path, rows: &[(&str, &ScoreReport)]) -> Result<()> {
    let mut out = String::from("method,rmse,mae,r2,n,scope\n");
    for (name, r) in rows {
        let r2 = match r.r2 {
            Some(v) => format!("{v}"),
            None => "undefined".to_string(),
        };
        out.push_str(&format!("{name},{},{},{r2},{},{}\n", r.rmse, r.mae, r.n, r.scope));
    }
    std::fs::write(path, out)?;
    Ok(())
}

/// Runs the static protocol: Naive, the regularized solve, and the
/// unregularized ablation on the same dataset, scored on the withheld window.
/// Writes the three estimate CSVs, the report CSV, and the resolved config
/// into the output directory.
pub fn run_static(spec: &ExperimentSpec) -> Result<StaticOutcome> {
    spec.validate()?;
    let (ds, truth, graph) = load_inputs(spec)?;
    std::fs::create_dir_all(&spec.out_dir)?;

    let scoped = scope_truth(&truth, &ds, spec.score_all_gds);
    let scope_name = if spec.score_all_gds {
        "all-gds".to_string()
    } else {
        format!("last-{}-gds", ds.max_updates().saturating_sub(1))
    };

    let naive_est = ds.naive_estimate();
    let naive = score_rows(&naive_est, &scoped, ds.epoch(), &scope_name)?;

    let mtc_fit = fit(&ds, graph.as_ref(), &spec.solver)?;
    let mtc = score_rows(&mtc_fit.estimate, &scoped, ds.epoch(), &scope_name)?;

    let ablation_cfg = SolverConfig {
        rho: 0.0,
        rho_a: 0.0,
        ..spec.solver.clone()
    };
    let ablation_fit = fit(&ds, None, &ablation_cfg)?;
    let unregularized = score_rows(&ablation_fit.estimate, &scoped, ds.epoch(), &scope_name)?;

    write_estimate_csv(&spec.out_dir.join("naive.csv"), &naive_est, ds.epoch())?;
    write_estimate_csv(&spec.out_dir.join("mtc.csv"), &mtc_fit.estimate, ds.epoch())?;
    write_estimate_csv(
        &spec.out_dir.join("mtc_unregularized.csv"),
        &ablation_fit.estimate,
        ds.epoch(),
    )?;
    write_reports_csv(
        &spec.out_dir.join("reports.csv"),
        &[
            ("naive", &naive),
            ("mtc", &mtc),
            ("mtc_unregularized", &unregularized),
        ],
    )?;
    std::fs::write(
        spec.out_dir.join("config.json"),
        serde_json::to_string_pretty(spec)?,
    )?;
    Ok(StaticOutcome {
        naive,
        mtc,
        unregularized,
    })
}

/// Mean ± std (population) of a metric over arrivals.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct MeanStd {
    pub mean: f64,
    pub std: f64,
}

fn mean_std(values: &[f64]) -> MeanStd {
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let var = values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
    MeanStd {
        mean,
        std: var.sqrt(),
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ArrivalScore {
    pub ld: i64,
    pub online: ScoreReport,
    pub batch: Option<ScoreReport>,
    pub online_seconds: f64,
    pub batch_seconds: Option<f64>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DynamicOutcome {
    pub arrivals: Vec<ArrivalScore>,
    pub online_rmse: MeanStd,
    pub online_mae: MeanStd,
    pub batch_rmse: Option<MeanStd>,
    pub batch_mae: Option<MeanStd>,
}

/// Runs the dynamic protocol: batch-fits the first `split` GDs, replays the
/// remaining loading dates through the tracker (and through fresh batch
/// restarts when the comparison arm is on), scoring the under-reported window
/// at every arrival. Writes per-arrival scores and timing CSVs.
pub fn run_dynamic(spec: &ExperimentSpec) -> Result<DynamicOutcome> {
    spec.validate()?;
    let split = spec.split.expect("validated");
    if split < spec.max_updates {
        return Err(Error::arg(format!(
            "split {split} must cover at least K = {} GDs",
            spec.max_updates
        )));
    }
    let all_events = read_events_csv(&spec.events_path)?;
    if all_events.is_empty() {
        return Err(Error::arg("events file has no records"));
    }
    let truth = read_truth_csv(&spec.truth_path)?;
    let graph = match &spec.graph_path {
        Some(p) => Some(LocationGraph::read_csv(p)?),
        None => None,
    };
    std::fs::create_dir_all(&spec.out_dir)?;

    let epoch = all_events.iter().map(|e| e.gd).min().expect("non-empty");
    let last_ld = all_events.iter().map(|e| e.ld).max().expect("non-empty");
    let first_horizon = epoch + split as i64 - 1;
    if first_horizon >= last_ld {
        return Err(Error::arg("split leaves no arrivals to replay"));
    }

    let initial: Vec<_> = all_events
        .iter()
        .filter(|e| e.ld <= first_horizon)
        .cloned()
        .collect();
    let ds = MultiVersionDataset::ingest(
        initial,
        &IngestOptions {
            locations: spec.locations,
            features: spec.features,
            max_updates: spec.max_updates,
            horizon: first_horizon,
            epoch: Some(epoch),
        },
    )?;
    let batch_fit = fit(&ds, graph.as_ref(), &spec.solver)?;
    let tcfg = TrackerConfig {
        solver: spec.solver.clone(),
        ..TrackerConfig::default()
    };
    let mut tracker = TrackerState::new(ds, batch_fit.factors, graph.clone(), tcfg)?;

    let mut scored_gds: BTreeSet<i64> = BTreeSet::new();
    let mut arrivals = Vec::new();
    for ld in (first_horizon + 1)..=last_ld {
        let step: Vec<_> = all_events.iter().filter(|e| e.ld == ld).cloned().collect();
        let rec = tracker.track(ld, step)?.clone();
        let ds_now = tracker.dataset();
        let first_under = ds_now.fully_observed_slabs() as i64 + epoch;
        let scoped: Vec<&TruthRow> = truth
            .iter()
            .filter(|r| {
                let in_window = r.gd >= first_under && r.gd <= ld;
                let fresh = !spec.first_appearance_only || !scored_gds.contains(&r.gd);
                in_window && fresh
            })
            .collect();
        if scoped.is_empty() {
            continue;
        }
        for r in &scoped {
            scored_gds.insert(r.gd);
        }
        let scope_name = format!("under-reported@{ld}");
        let online = score_rows(&tracker.estimate(), &scoped, epoch, &scope_name)?;

        let (batch, batch_seconds) = if spec.batch_restart_arm {
            let events_now: Vec<_> = all_events.iter().filter(|e| e.ld <= ld).cloned().collect();
            let ds_restart = MultiVersionDataset::ingest(
                events_now,
                &IngestOptions {
                    locations: spec.locations,
                    features: spec.features,
                    max_updates: spec.max_updates,
                    horizon: ld,
                    epoch: Some(epoch),
                },
            )?;
            let t0 = Instant::now();
            let restart = fit(&ds_restart, graph.as_ref(), &spec.solver)?;
            let secs = t0.elapsed().as_secs_f64();
            let report = score_rows(&restart.estimate, &scoped, epoch, &scope_name)?;
            (Some(report), Some(secs))
        } else {
            (None, None)
        };

        arrivals.push(ArrivalScore {
            ld,
            online,
            batch,
            online_seconds: rec.seconds,
            batch_seconds,
        });
    }
    if arrivals.is_empty() {
        return Err(Error::arg("no arrivals produced a scored window"));
    }

    let online_rmse = mean_std(&arrivals.iter().map(|a| a.online.rmse).collect::<Vec<_>>());
    let online_mae = mean_std(&arrivals.iter().map(|a| a.online.mae).collect::<Vec<_>>());
    let (batch_rmse, batch_mae) = if spec.batch_restart_arm {
        (
            Some(mean_std(
                &arrivals
                    .iter()
                    .filter_map(|a| a.batch.as_ref().map(|b| b.rmse))
                    .collect::<Vec<_>>(),
            )),
            Some(mean_std(
                &arrivals
                    .iter()
                    .filter_map(|a| a.batch.as_ref().map(|b| b.mae))
                    .collect::<Vec<_>>(),
            )),
        )
    } else {
        (None, None)
    };

    let mut scores_csv = String::from("ld,online_rmse,online_mae,batch_rmse,batch_mae\n");
    let mut timing_csv = String::from("ld,online_seconds,batch_seconds\n");
    for a in &arrivals {
        let (brmse, bmae) = match &a.batch {
            Some(b) => (format!("{}", b.rmse), format!("{}", b.mae)),
            None => ("".into(), "".into()),
        };
        scores_csv.push_str(&format!(
            "{},{},{},{brmse},{bmae}\n",
            a.ld, a.online.rmse, a.online.mae
        ));
        let bsec = a
            .batch_seconds
            .map(|s| format!("{s}"))
            .unwrap_or_default();
        timing_csv.push_str(&format!("{},{},{bsec}\n", a.ld, a.online_seconds));
    }
    std::fs::write(spec.out_dir.join("dynamic_scores.csv"), scores_csv)?;
    std::fs::write(spec.out_dir.join("dynamic_timing.csv"), timing_csv)?;
    std::fs::write(
        spec.out_dir.join("config.json"),
        serde_json::to_string_pretty(spec)?,
    )?;
    let outcome = DynamicOutcome {
        arrivals,
        online_rmse,
        online_mae,
        batch_rmse,
        batch_mae,
    };
    std::fs::write(
        spec.out_dir.join("dynamic_summary.json"),
        serde_json::to_string_pretty(&outcome)?,
    )?;
    Ok(outcome)
}

/// One row of a dimension sweep: the swept dimension, its value, and the
/// median per-iteration wall time.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct BenchRow {
    pub dim: String,
    pub value: usize,
    pub seconds_per_iter: f64,
}

/// Median per-iteration wall time of one full coordinate round (all four
/// factor updates plus imputation) on random data of the given shape.
pub fn bench_per_iter(dims: [usize; 4], rank: usize, iters: usize, seed: u64) -> Result<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n: usize = dims.iter().product();
    let data: Vec<f64> = (0..n).map(|_| rand::Rng::gen::<f64>(&mut rng)).collect();
    let x = Tensor4::from_vec(dims, data)?;
    let counts: Vec<usize> = (0..dims[3]).map(|s| (dims[3] - s).min(dims[2])).collect();
    let mask = crate::tensor::ObservationMask::from_age_counts(dims, &counts)?;
    let mut theta = FactorSet::new(
        Matrix::random_uniform(dims[0], rank, &mut rng),
        Matrix::random_uniform(dims[1], rank, &mut rng),
        Matrix::random_uniform(dims[2], rank, &mut rng),
        Matrix::random_uniform(dims[3], rank, &mut rng),
    )?;
    let mut prev = theta.clone();
    let terms = ProblemTerms::new(0.7, dims[3], dims[2], None, 0.0, 0.0)?;
    let mut y = impute(&theta, &x, &mask);
    let mut times = Vec::with_capacity(iters);
    for it in 0..iters {
        let t0 = Instant::now();
        let ybar = scale_slabs(&y, &terms.weights);
        for mode in ALL_MODES {
            update_factor(&mut theta, &mut prev, mode, 0.0, &y, &ybar, &terms, false, it)?;
        }
        y = impute(&theta, &x, &mask);
        times.push(t0.elapsed().as_secs_f64());
    }
    times.sort_by(|a, b| a.partial_cmp(b).expect("finite"));
    Ok(times[times.len() / 2])
}

/// Doubles I, S, and F each in turn around the base shape, timing the
/// per-iteration cost. Emits `dim,value,seconds_per_iter` rows.
pub fn bench_sweep(
    base: [usize; 4],
    rank: usize,
    iters: usize,
    seed: u64,
) -> Result<Vec<BenchRow>> {
    let mut rows = Vec::new();
    let mut push = |dim: &str, value: usize, dims: [usize; 4], f: usize| -> Result<()> {
        rows.push(BenchRow {
            dim: dim.to_string(),
            value,
            seconds_per_iter: bench_per_iter(dims, f, iters, seed)?,
        });
        Ok(())
    };
    push("base", base[0], base, rank)?;
    push("I", base[0] * 2, [base[0] * 2, base[1], base[2], base[3]], rank)?;
    push("S", base[3] * 2, [base[0], base[1], base[2], base[3] * 2], rank)?;
    push("F", rank * 2, base, rank * 2)?;
    Ok(rows)
}

pub fn write_bench_csv(path: &Path, rows: &[BenchRow]) -> Result<()> {
    let mut out = String::from("dim,value,seconds_per_iter\n");
    for r in rows {
        out.push_str(&format!("{},{},{}\n", r.dim, r.value, r.seconds_per_iter));
    }
    std::fs::write(path, out)?;
    Ok(())
}

/// Serialized factorization with enough metadata to reproduce it.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct FactorExport {
    pub dims: [usize; 4],
    pub rank: usize,
    pub factors: FactorSet,
    pub col_norms: ColNorms,
    pub config: SolverConfig,
    pub seed: u64,
    pub objective_trace: Vec<f64>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ColNorms {
    pub a: Vec<f64>,
    pub b: Vec<f64>,
    pub c: Vec<f64>,
    pub d: Vec<f64>,
}

impl FactorExport {
    pub fn from_fit(result: &FitResult, config: &SolverConfig) -> Self {
        let theta = &result.factors;
        FactorExport {
            dims: theta.dims(),
            rank: theta.rank(),
            factors: theta.clone(),
            col_norms: ColNorms {
                a: theta.a.col_norms(),
                b: theta.b.col_norms(),
                c: theta.c.col_norms(),
                d: theta.d.col_norms(),
            },
            config: config.clone(),
            seed: config.seed,
            objective_trace: result.diagnostics.objective_trace.clone(),
        }
    }

    pub fn write_json(&self, path: &Path) -> Result<()> {
        std::fs::write(path, serde_json::to_string_pretty(self)?)?;
        Ok(())
    }

    pub fn read_json(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        Ok(serde_json::from_str(&text)?)
    }
}

/// Greedy column matching by cosine similarity: for each column of `a` (in
/// order of best available match) picks the closest unused column of `b`.
/// Returns `perm` with `perm[col_of_a] = col_of_b`. CP factors are
/// identifiable only up to column permutation and scaling, so recovered
/// factors must be aligned before comparison.
pub fn greedy_match_columns(a: &Matrix, b: &Matrix) -> Result<Vec<usize>> {
    if a.rows() != b.rows() || a.cols() != b.cols() {
        return Err(Error::arg("greedy_match_columns needs same-shape matrices"));
    }
    let f = a.cols();
    let cosine = |x: &Matrix, cx: usize, y: &Matrix, cy: usize| -> f64 {
        let mut dot = 0.0;
        let mut nx = 0.0;
        let mut ny = 0.0;
        for r in 0..x.rows() {
            let (vx, vy) = (x.get(r, cx), y.get(r, cy));
            dot += vx * vy;
            nx += vx * vx;
            ny += vy * vy;
        }
        if nx == 0.0 || ny == 0.0 {
            return 0.0;
        }
        dot / (nx.sqrt() * ny.sqrt())
    };
    let mut sims = Vec::new();
    for ca in 0..f {
        for cb in 0..f {
            sims.push((cosine(a, ca, b, cb), ca, cb));
        }
    }
    sims.sort_by(|x, y| y.0.partial_cmp(&x.0).expect("finite"));
    let mut perm = vec![usize::MAX; f];
    let mut used_a = vec![false; f];
    let mut used_b = vec![false; f];
    for (_, ca, cb) in sims {
        if !used_a[ca] && !used_b[cb] {
            perm[ca] = cb;
            used_a[ca] = true;
            used_b[cb] = true;
        }
    }
    Ok(perm)
}
