//! Multi-version data model: ingests update events into the 4-way update
//! tensor with its age-dependent observation mask, and derives the aggregated
//! and naive estimates.
//!
//! A generation date (GD) is when a count was generated; a loading date (LD)
//! is when it was received. The update index is k = ld − gd (0-based here),
//! capped at K−1: late stragglers are folded into the last slot so totals are
//! preserved.

use crate::error::{Error, Result};
use crate::tensor::{ObservationMask, Tensor3, Tensor4};
use std::path::Path;

/// One ingested record: an increment for (location, feature, gd) loaded at ld.
#[derive(Debug, Clone, PartialEq)]
pub struct UpdateEvent {
    pub location: usize,
    pub feature: usize,
    pub gd: i64,
    pub ld: i64,
    pub count: f64,
}

/// Shape and window parameters for ingestion.
#[derive(Debug, Clone)]
pub struct IngestOptions {
    pub locations: usize,
    pub features: usize,
    /// K: maximum updates per GD.
    pub max_updates: usize,
    /// Latest loading date replayed into the dataset.
    pub horizon: i64,
    /// GD of tensor slab 0. Defaults to the earliest event GD.
    pub epoch: Option<i64>,
}

/// Immutable snapshot of the update tensor X_t, its mask Ω_t, and the event
/// log it was built from. Replaying to a later horizon produces a new value.
#[derive(Debug, Clone)]
pub struct MultiVersionDataset {
    locations: usize,
    features: usize,
    max_updates: usize,
    epoch: i64,
    horizon: i64,
    events: Vec<UpdateEvent>,
    tensor: Tensor4,
    mask: ObservationMask,
}

impl MultiVersionDataset {
    /// Builds the update tensor and age mask from an event log.
    ///
    /// Events with ld > horizon are retained in the log but excluded from the
    /// tensor; they become visible when replaying to a later horizon.
    pub fn ingest(events: Vec<UpdateEvent>, opts: &IngestOptions) -> Result<Self> {
        if opts.max_updates == 0 {
            return Err(Error::arg("max_updates (K) must be at least 1"));
        }
        let epoch = match opts.epoch {
            Some(e) => e,
            None => events.iter().map(|e| e.gd).min().unwrap_or(opts.horizon),
        };
        if opts.horizon < epoch {
            return Err(Error::arg("horizon must not precede the epoch"));
        }
        let s_dim = (opts.horizon - epoch + 1) as usize;
        let dims = [opts.locations, opts.features, opts.max_updates, s_dim];
        let mut tensor = Tensor4::zeros(dims);
        for (record, ev) in events.iter().enumerate() {
            Self::validate_event(ev, opts, epoch, record)?;
            if ev.ld > opts.horizon {
                continue;
            }
            let s = (ev.gd - epoch) as usize;
            let k = ((ev.ld - ev.gd) as usize).min(opts.max_updates - 1);
            tensor.add(ev.location, ev.feature, k, s, ev.count);
        }
        let counts: Vec<usize> = (0..s_dim)
            .map(|s| (s_dim - s).min(opts.max_updates))
            .collect();
        let mask = ObservationMask::from_age_counts(dims, &counts)?;
        Ok(MultiVersionDataset {
            locations: opts.locations,
            features: opts.features,
            max_updates: opts.max_updates,
            epoch,
            horizon: opts.horizon,
            events,
            tensor,
            mask,
        })
    }

    fn validate_event(
        ev: &UpdateEvent,
        opts: &IngestOptions,
        epoch: i64,
        record: usize,
    ) -> Result<()> {
        let fail = |msg: String| Error::Ingest { record, msg };
        if ev.location >= opts.locations {
            return Err(fail(format!(
                "location {} out of range 0..{}",
                ev.location, opts.locations
            )));
        }
        if ev.feature >= opts.features {
            return Err(fail(format!(
                "feature {} out of range 0..{}",
                ev.feature, opts.features
            )));
        }
        if ev.ld < ev.gd {
            return Err(fail(format!("ld {} precedes gd {}", ev.ld, ev.gd)));
        }
        if ev.gd < epoch {
            return Err(fail(format!("gd {} precedes epoch {epoch}", ev.gd)));
        }
        if ev.gd > opts.horizon {
            return Err(fail(format!("gd {} past horizon {}", ev.gd, opts.horizon)));
        }
        if !(ev.count >= 0.0) || !ev.count.is_finite() {
            return Err(fail(format!("count {} must be finite and >= 0", ev.count)));
        }
        Ok(())
    }

    /// Replays the log, plus optional newly arrived events, to a later
    /// horizon. Produces a new dataset value.
    pub fn with_horizon(&self, horizon: i64, extra: Vec<UpdateEvent>) -> Result<Self> {
        if horizon < self.horizon {
            return Err(Error::Stream(format!(
                "horizon {horizon} precedes current horizon {}",
                self.horizon
            )));
        }
        let mut events = self.events.clone();
        events.extend(extra);
        MultiVersionDataset::ingest(
            events,
            &IngestOptions {
                locations: self.locations,
                features: self.features,
                max_updates: self.max_updates,
                horizon,
                epoch: Some(self.epoch),
            },
        )
    }

    pub fn tensor(&self) -> &Tensor4 {
        &self.tensor
    }

    pub fn mask(&self) -> &ObservationMask {
        &self.mask
    }

    pub fn events(&self) -> &[UpdateEvent] {
        &self.events
    }

    pub fn dims(&self) -> [usize; 4] {
        self.tensor.dims()
    }

    pub fn epoch(&self) -> i64 {
        self.epoch
    }

    pub fn horizon(&self) -> i64 {
        self.horizon
    }

    pub fn max_updates(&self) -> usize {
        self.max_updates
    }

    /// Number of GD slabs.
    pub fn num_gds(&self) -> usize {
        self.tensor.dims()[3]
    }

    /// Slabs 0..fully_observed_slabs() have all K update slots observed.
    pub fn fully_observed_slabs(&self) -> usize {
        let s_dim = self.num_gds();
        s_dim.saturating_sub(self.max_updates - 1)
    }

    /// Observed update slots for slab s under the age rule.
    pub fn observed_updates(&self, s: usize) -> usize {
        (self.num_gds() - s).min(self.max_updates)
    }

    /// Z_t(i,j,s) = Σ_k X_t(i,j,k,s) over observed k: totals received so far.
    pub fn aggregate(&self) -> Tensor3 {
        let [i_dim, j_dim, k_dim, s_dim] = self.tensor.dims();
        let mut out = Tensor3::zeros([i_dim, j_dim, s_dim]);
        for s in 0..s_dim {
            for k in 0..k_dim {
                for j in 0..j_dim {
                    for i in 0..i_dim {
                        if self.mask.is_observed(i, j, k, s) {
                            out.add(i, j, s, self.tensor.get(i, j, k, s));
                        }
                    }
                }
            }
        }
        out
    }

    /// The received-so-far baseline: aggregate(ds) unchanged.
    pub fn naive_estimate(&self) -> Tensor3 {
        self.aggregate()
    }
}

/// Sums a completed update tensor over its update mode.
pub fn marginalize(completed: &Tensor4) -> Tensor3 {
    completed.marginalize_updates()
}

const EVENT_HEADER: &str = "location,feature,gd,ld,count";

/// Reads the canonical event CSV (`location,feature,gd,ld,count`).
pub fn read_events_csv(path: &Path) -> Result<Vec<UpdateEvent>> {
    let text = std::fs::read_to_string(path)?;
    let mut out = Vec::new();
    let mut lines = text.lines().enumerate();
    match lines.next() {
        Some((_, header)) if header.trim() == EVENT_HEADER => {}
        Some((_, header)) => {
            return Err(Error::Csv {
                path: path.display().to_string(),
                line: 1,
                msg: format!("expected header `{EVENT_HEADER}`, got `{header}`"),
            })
        }
        None => return Ok(out),
    }
    for (lineno, line) in lines {
        let line = line.trim();
        if line.is_empty() {
            continue;
        }
        let parts: Vec<&str> = line.split(',').collect();
        if parts.len() != 5 {
            return Err(Error::Csv {
                path: path.display().to_string(),
                line: lineno + 1,
                msg: format!("expected 5 fields, got {}", parts.len()),
            });
        }
        let err = |what: &str, val: &str| Error::Csv {
            path: path.display().to_string(),
            line: lineno + 1,
            msg: format!("bad {what}: {val}"),
        };
        out.push(UpdateEvent {
            location: parts[0]
                .trim()
                .parse()
                .map_err(|_| err("location", parts[0]))?,
            feature: parts[1]
                .trim()
                .parse()
                .map_err(|_| err("feature", parts[1]))?,
            gd: parts[2].trim().parse().map_err(|_| err("gd", parts[2]))?,
            ld: parts[3].trim().parse().map_err(|_| err("ld", parts[3]))?,
            count: parts[4]
                .trim()
                .parse()
                .map_err(|_| err("count", parts[4]))?,
        });
    }
    Ok(out)
}

pub fn write_events_csv(path: &Path, events: &[UpdateEvent]) -> Result<()> {
    let mut out = String::from(EVENT_HEADER);
    out.push('\n');
    for ev in events {
        out.push_str(&format!(
            "{},{},{},{},{}\n",
            ev.location, ev.feature, ev.gd, ev.ld, ev.count
        ));
    }
    std::fs::write(path, out)?;
    Ok(())
}
