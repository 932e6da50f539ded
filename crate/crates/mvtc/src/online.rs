//! Online tracking of the factorization as new loading dates arrive.
//!
//! Each arrival advances the horizon. For every GD slab that appears, a
//! forward-pass (FP) step solves a masked nonnegative least-squares problem
//! for the new row of the GD factor while the other factors are held fixed; a
//! backward-pass (BP) step then re-imputes the missing entries and runs one
//! coordinate round of prox-linear factor updates. The per-arrival cost is a
//! small constant number of passes over the tensor, far below a batch
//! restart.

use crate::error::{Error, Result};
use crate::events::{MultiVersionDataset, UpdateEvent};
use crate::graph::LocationGraph;
use crate::matrix::Matrix;
use crate::solver::{
    impute, masked_slab_nnls, projected_residual, scale_slabs, update_factor, ProblemTerms,
    SolverConfig, ALL_MODES,
};
use crate::tensor::{reconstruct, FactorSet, Tensor3};
use serde::{Deserialize, Serialize};
use std::time::Instant;

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TrackerConfig {
    pub solver: SolverConfig,
    /// Projected-gradient iteration cap for the FP row solve.
    pub fp_iters: usize,
    pub fp_tol: f64,
    /// Solve the FP row against all K update slots instead of only the
    /// observed ones (treats unseen slots as zero counts).
    pub literal_fp: bool,
    /// Cap on BP coordinate rounds per arrival; BP stops early once the
    /// projected-gradient residual drops below the solver's `tol_station`.
    pub bp_rounds: usize,
}

impl Default for TrackerConfig {
    fn default() -> Self {
        TrackerConfig {
            solver: SolverConfig::default(),
            fp_iters: 50,
            fp_tol: 1e-8,
            literal_fp: false,
            bp_rounds: 8,
        }
    }
}

/// Timing and quality record for one processed arrival.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ArrivalRecord {
    /// Loading date the tracker advanced to.
    pub ld: i64,
    /// GD slabs appended by this arrival.
    pub new_gds: usize,
    pub fp_seconds: f64,
    pub bp_seconds: f64,
    pub seconds: f64,
    /// Projected-gradient residual after the BP step.
    pub residual: f64,
}

/// Tracks a batch-fit factorization forward as arrivals stream in.
///
/// The state owns an immutable dataset snapshot; [`TrackerState::track`]
/// replays the log to the new horizon and produces updated factors.
#[derive(Debug, Clone)]
pub struct TrackerState {
    dataset: MultiVersionDataset,
    factors: FactorSet,
    graph: Option<LocationGraph>,
    config: TrackerConfig,
    history: Vec<ArrivalRecord>,
}

impl TrackerState {
    /// Starts tracking from a batch fit of `dataset`.
    pub fn new(
        dataset: MultiVersionDataset,
        factors: FactorSet,
        graph: Option<LocationGraph>,
        config: TrackerConfig,
    ) -> Result<Self> {
        config.solver.validate()?;
        let dims = dataset.dims();
        if factors.dims() != dims {
            return Err(Error::arg(format!(
                "factor dims {:?} do not match dataset dims {:?}",
                factors.dims(),
                dims
            )));
        }
        if let Some(g) = &graph {
            if g.node_count() != dims[0] {
                return Err(Error::arg(format!(
                    "graph has {} nodes but the dataset has {} locations",
                    g.node_count(),
                    dims[0]
                )));
            }
        }
        Ok(TrackerState {
            dataset,
            factors,
            graph,
            config,
            history: Vec::new(),
        })
    }

    pub fn dataset(&self) -> &MultiVersionDataset {
        &self.dataset
    }

    pub fn factors(&self) -> &FactorSet {
        &self.factors
    }

    pub fn horizon(&self) -> i64 {
        self.dataset.horizon()
    }

    pub fn history(&self) -> &[ArrivalRecord] {
        &self.history
    }

    /// Processes one arrival: all events with loading date ≤ `ld`.
    ///
    /// `ld` must be strictly past the current horizon. Gaps are fine — a slab
    /// with no events is still appended (its FP row solves against zeros).
    pub fn track(&mut self, ld: i64, events: Vec<UpdateEvent>) -> Result<&ArrivalRecord> {
        if ld <= self.dataset.horizon() {
            return Err(Error::Stream(format!(
                "arrival ld {ld} is not past the current horizon {}",
                self.dataset.horizon()
            )));
        }
        if let Some(bad) = events.iter().find(|e| e.ld > ld) {
            return Err(Error::Stream(format!(
                "event ld {} is past the arrival ld {ld}",
                bad.ld
            )));
        }
        let t0 = Instant::now();
        let old_s = self.dataset.num_gds();
        let next = self.dataset.with_horizon(ld, events)?;
        let new_s = next.num_gds();
        self.dataset = next;

        let t_fp = Instant::now();
        self.fp_step(old_s, new_s)?;
        let fp_seconds = t_fp.elapsed().as_secs_f64();

        let t_bp = Instant::now();
        let residual = self.bp_step()?;
        let bp_seconds = t_bp.elapsed().as_secs_f64();

        self.history.push(ArrivalRecord {
            ld,
            new_gds: new_s - old_s,
            fp_seconds,
            bp_seconds,
            seconds: t0.elapsed().as_secs_f64(),
            residual,
        });
        Ok(self.history.last().expect("just pushed"))
    }

    /// FP step: append one GD-factor row per new slab, each solved by masked
    /// nonnegative least squares against the observed update slots.
    fn fp_step(&mut self, old_s: usize, new_s: usize) -> Result<()> {
        let f = self.factors.rank();
        let k_dim = self.dataset.max_updates();
        let x = self.dataset.tensor();
        let mut d = Matrix::zeros(new_s, f);
        for s in 0..old_s.min(new_s) {
            d.row_mut(s).copy_from_slice(self.factors.d.row(s));
        }
        for s in old_s..new_s {
            let k_obs = if self.config.literal_fp {
                k_dim
            } else {
                self.dataset.observed_updates(s)
            };
            // warm start from the previous GD's loading, which is usually close
            let warm = if s > 0 { Some(d.row(s - 1).to_vec()) } else { None };
            let row = masked_slab_nnls(
                x,
                s,
                k_obs,
                &self.factors.a,
                &self.factors.b,
                &self.factors.c,
                self.config.fp_tol,
                self.config.fp_iters,
                warm.as_deref(),
            )?;
            d.row_mut(s).copy_from_slice(&row);
        }
        self.factors.d = d;
        Ok(())
    }

    /// BP step: impute the missing entries from the current model and run
    /// un-extrapolated coordinate rounds of factor updates, stopping once the
    /// projected-gradient residual is stationary or `bp_rounds` is reached.
    fn bp_step(&mut self) -> Result<f64> {
        let [_, _, k_dim, s_dim] = self.dataset.dims();
        let scfg = &self.config.solver;
        let lap = self.graph.as_ref().map(|g| g.laplacian());
        let terms = ProblemTerms::new(scfg.alpha, s_dim, k_dim, lap, scfg.rho_a, scfg.rho)?;
        let x = self.dataset.tensor();
        let mask = self.dataset.mask();
        let mut residual = f64::INFINITY;
        for _ in 0..self.config.bp_rounds.max(1) {
            let y = impute(&self.factors, x, mask);
            let ybar = scale_slabs(&y, &terms.weights);
            let mut prev = self.factors.clone();
            for mode in ALL_MODES {
                update_factor(
                    &mut self.factors,
                    &mut prev,
                    mode,
                    0.0,
                    &y,
                    &ybar,
                    &terms,
                    scfg.literal_update,
                    self.history.len(),
                )?;
            }
            let y = impute(&self.factors, x, mask);
            residual = projected_residual(&self.factors, &y, &terms)?;
            if residual <= scfg.tol_station {
                break;
            }
        }
        Ok(residual)
    }

    /// Marginalized model estimate for every GD.
    pub fn estimate(&self) -> Tensor3 {
        reconstruct(&self.factors).marginalize_updates()
    }

    /// Observed totals on fully reported slabs, model estimate on the
    /// under-reported tail.
    pub fn hybrid_estimate(&self) -> Tensor3 {
        let mut out = self.estimate();
        let agg = self.dataset.aggregate();
        let [i_dim, j_dim, _] = out.dims();
        for s in 0..self.dataset.fully_observed_slabs() {
            for j in 0..j_dim {
                for i in 0..i_dim {
                    out.set(i, j, s, agg.get(i, j, s));
                }
            }
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::events::IngestOptions;
    use crate::solver::{fit, Momentum};
    use crate::synth::{emit_events, generate, DelayProfile, GeneratorConfig};

    fn ingest_horizon(
        events: Vec<UpdateEvent>,
        cfg: &GeneratorConfig,
        horizon: i64,
    ) -> MultiVersionDataset {
        MultiVersionDataset::ingest(
            events,
            &IngestOptions {
                locations: cfg.locations,
                features: cfg.features,
                max_updates: cfg.max_updates,
                horizon,
                epoch: Some(0),
            },
        )
        .unwrap()
    }

    fn noiseless_cfg() -> GeneratorConfig {
        GeneratorConfig {
            delay_profile: DelayProfile::Fixed(vec![0.6, 0.3, 0.1]),
            ..GeneratorConfig::new(6, 4, 16, 3, 2)
        }
    }

    fn solver_cfg() -> SolverConfig {
        SolverConfig {
            rank: 2,
            alpha: 0.5,
            rho_a: 0.0,
            rho: 0.0,
            max_outer_iters: 400,
            init_iters: 200,
            seed: 3,
            ..SolverConfig::default()
        }
    }

    #[test]
    fn shape_law_and_gap_handling() {
        let cfg = noiseless_cfg();
        let data = generate(&cfg).unwrap();
        let (events, _) = emit_events(&data.updates, &data.totals, 9, 0);
        let ds = ingest_horizon(events, &cfg, 9);
        let res = fit(&ds, None, &solver_cfg()).unwrap();
        let mut tracker =
            TrackerState::new(ds, res.factors, None, TrackerConfig::default()).unwrap();
        assert_eq!(tracker.factors().d.rows(), 10);
        // jump two LDs at once: two slabs appended, one of them eventless
        let (all_events, _) = emit_events(&data.updates, &data.totals, 11, 0);
        let new_events: Vec<UpdateEvent> = all_events
            .into_iter()
            .filter(|e| e.ld > 9 && e.gd != 10)
            .collect();
        let rec = tracker.track(11, new_events).unwrap().clone();
        assert_eq!(rec.new_gds, 2);
        assert_eq!(tracker.factors().d.rows(), 12);
        assert_eq!(tracker.dataset().num_gds(), 12);
        assert!(tracker.factors().is_nonneg());
    }

    #[test]
    fn rejects_out_of_order_and_future_events() {
        let cfg = noiseless_cfg();
        let data = generate(&cfg).unwrap();
        let (events, _) = emit_events(&data.updates, &data.totals, 9, 0);
        let ds = ingest_horizon(events, &cfg, 9);
        let res = fit(&ds, None, &solver_cfg()).unwrap();
        let mut tracker =
            TrackerState::new(ds, res.factors, None, TrackerConfig::default()).unwrap();
        assert!(matches!(tracker.track(9, vec![]), Err(Error::Stream(_))));
        let future = UpdateEvent {
            location: 0,
            feature: 0,
            gd: 10,
            ld: 12,
            count: 1.0,
        };
        assert!(matches!(
            tracker.track(10, vec![future]),
            Err(Error::Stream(_))
        ));
    }

    #[test]
    fn fp_recovers_planted_row_noiseless() {
        // exact low-rank data: with A, B, C at the truth, the masked NNLS for
        // a new slab must recover the planted D row (identifiable when the
        // masked design has full column rank)
        let cfg = noiseless_cfg();
        let data = generate(&cfg).unwrap();
        let csum: Vec<f64> = (0..2)
            .map(|f| (0..3).map(|r| data.factors.c.get(r, f)).sum())
            .collect();
        let c_model = Matrix::from_fn(3, 2, |r, f| [0.6, 0.3, 0.1][r] * csum[f]);
        let (events, _) = emit_events(&data.updates, &data.totals, 10, 0);
        let ds = ingest_horizon(events, &cfg, 10);
        // slab 10 has only k=0 observed; one observed slot over I*J entries
        // still overdetermines the F=2 row
        let row = masked_slab_nnls(
            ds.tensor(),
            10,
            ds.observed_updates(10),
            &data.factors.a,
            &data.factors.b,
            &c_model,
            1e-12,
            200_000,
            None,
        )
        .unwrap();
        let truth = data.factors.d.row(10);
        for (got, want) in row.iter().zip(truth.iter()) {
            assert!(
                (got - want).abs() <= 1e-6 * want.max(1.0),
                "row {row:?} vs truth {truth:?}"
            );
        }
    }

    #[test]
    fn fp_zero_slab_gives_zero_row() {
        let cfg = noiseless_cfg();
        let data = generate(&cfg).unwrap();
        let (events, _) = emit_events(&data.updates, &data.totals, 9, 0);
        let ds = ingest_horizon(events, &cfg, 9);
        let res = fit(&ds, None, &solver_cfg()).unwrap();
        let mut tracker =
            TrackerState::new(ds, res.factors, None, TrackerConfig::default()).unwrap();
        // arrival with no events at all: the new slab is all zeros and its
        // row must come out zero (warm start notwithstanding)
        tracker.track(10, vec![]).unwrap();
        let d_new = tracker.factors().d.row(10);
        // one BP round can lift it slightly through imputation; the FP output
        // itself is exactly zero, so the row must stay tiny relative to its
        // neighbors
        let scale: f64 = tracker.factors().d.row(9).iter().sum();
        assert!(
            d_new.iter().sum::<f64>() <= 0.2 * scale.max(1e-12),
            "zero-slab row {d_new:?}"
        );
    }

    #[test]
    fn tracking_is_a_fixed_point_on_noiseless_converged_state() {
        let cfg = noiseless_cfg();
        let data = generate(&cfg).unwrap();
        let csum: Vec<f64> = (0..2)
            .map(|f| (0..3).map(|r| data.factors.c.get(r, f)).sum())
            .collect();
        let c_model = Matrix::from_fn(3, 2, |r, f| [0.6, 0.3, 0.1][r] * csum[f]);
        let (events, _) = emit_events(&data.updates, &data.totals, 9, 0);
        let ds = ingest_horizon(events, &cfg, 9);
        let truth10 = FactorSet::new(
            data.factors.a.clone(),
            data.factors.b.clone(),
            c_model,
            Matrix::from_fn(10, 2, |r, c| data.factors.d.get(r, c)),
        )
        .unwrap();
        // no regularization: the planted factors are stationary only for the
        // pure data objective
        let tcfg = TrackerConfig {
            solver: solver_cfg(),
            fp_iters: 200_000,
            fp_tol: 1e-14,
            ..TrackerConfig::default()
        };
        let mut tracker = TrackerState::new(ds, truth10.clone(), None, tcfg).unwrap();
        let (all_events, _) = emit_events(&data.updates, &data.totals, 10, 0);
        let new_events: Vec<UpdateEvent> = all_events.into_iter().filter(|e| e.ld == 10).collect();
        let rec = tracker.track(10, new_events).unwrap().clone();
        assert!(rec.residual <= 1e-6, "residual {}", rec.residual);
        // the appended row matches the planted one and the old rows barely move
        let d = &tracker.factors().d;
        for s in 0..=10 {
            for f in 0..2 {
                let want = data.factors.d.get(s, f);
                assert!(
                    (d.get(s, f) - want).abs() <= 1e-4 * want.max(1.0),
                    "d({s},{f}) = {} vs {want}",
                    d.get(s, f)
                );
            }
        }
    }

    #[test]
    fn tracked_estimate_stays_close_to_batch_restart() {
        let cfg = GeneratorConfig {
            noise_scale: 0.2,
            ..noiseless_cfg()
        };
        let data = generate(&cfg).unwrap();
        let scfg = SolverConfig {
            max_outer_iters: 200,
            init_iters: 100,
            ..solver_cfg()
        };
        let (events, _) = emit_events(&data.updates, &data.totals, 9, 0);
        let ds = ingest_horizon(events, &cfg, 9);
        let res = fit(&ds, None, &scfg).unwrap();
        let tcfg = TrackerConfig {
            solver: scfg.clone(),
            ..TrackerConfig::default()
        };
        let mut tracker = TrackerState::new(ds, res.factors, None, tcfg).unwrap();
        let (all_events, _) = emit_events(&data.updates, &data.totals, 15, 0);
        for ld in 10..=15i64 {
            let step: Vec<UpdateEvent> =
                all_events.iter().filter(|e| e.ld == ld).cloned().collect();
            tracker.track(ld, step).unwrap();
        }
        // batch restart at the final horizon
        let (events15, _) = emit_events(&data.updates, &data.totals, 15, 0);
        let ds15 = ingest_horizon(events15, &cfg, 15);
        let batch = fit(&ds15, None, &scfg).unwrap();
        // compare withheld-window errors against the truth
        let err = |est: &Tensor3| {
            let mut e2 = 0.0;
            let mut n = 0.0;
            for s in 14..16 {
                for j in 0..cfg.features {
                    for i in 0..cfg.locations {
                        let d = est.get(i, j, s) - data.totals.get(i, j, s);
                        e2 += d * d;
                        n += 1.0;
                    }
                }
            }
            (e2 / n).sqrt()
        };
        let online_rmse = err(&tracker.estimate());
        let batch_rmse = err(&batch.estimate);
        assert!(
            online_rmse <= 2.0 * batch_rmse.max(1e-6),
            "online {online_rmse} vs batch {batch_rmse}"
        );
    }

    #[test]
    fn tracking_is_deterministic() {
        let cfg = noiseless_cfg();
        let data = generate(&cfg).unwrap();
        let (events, _) = emit_events(&data.updates, &data.totals, 9, 0);
        let run = || {
            let ds = ingest_horizon(events.clone(), &cfg, 9);
            let res = fit(&ds, None, &solver_cfg()).unwrap();
            let mut tracker =
                TrackerState::new(ds, res.factors, None, TrackerConfig::default()).unwrap();
            let (all_events, _) = emit_events(&data.updates, &data.totals, 12, 0);
            for ld in 10..=12i64 {
                let step: Vec<UpdateEvent> =
                    all_events.iter().filter(|e| e.ld == ld).cloned().collect();
                tracker.track(ld, step).unwrap();
            }
            tracker.factors().clone()
        };
        assert_eq!(run(), run());
    }

    #[test]
    fn momentum_free_solver_config_is_respected() {
        // the BP round never extrapolates regardless of the batch momentum
        // setting; this pins the config plumbing
        let cfg = noiseless_cfg();
        let data = generate(&cfg).unwrap();
        let (events, _) = emit_events(&data.updates, &data.totals, 9, 0);
        let ds = ingest_horizon(events, &cfg, 9);
        let res = fit(&ds, None, &solver_cfg()).unwrap();
        let (all_events, _) = emit_events(&data.updates, &data.totals, 10, 0);
        let step: Vec<UpdateEvent> = all_events.iter().filter(|e| e.ld == 10).cloned().collect();
        let run = |momentum| {
            let tcfg = TrackerConfig {
                solver: SolverConfig {
                    momentum,
                    ..solver_cfg()
                },
                ..TrackerConfig::default()
            };
            let ds2 = ds.clone();
            let mut tracker = TrackerState::new(ds2, res.factors.clone(), None, tcfg).unwrap();
            tracker.track(10, step.clone()).unwrap();
            tracker.factors().clone()
        };
        assert_eq!(run(Momentum::Fista), run(Momentum::None));
    }
}
