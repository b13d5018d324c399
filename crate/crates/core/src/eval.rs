//! Accuracy and availability metrics against ground truth.
//!
//! Availability follows the usual service definition: the share of all
//! ground-truth epochs that have an estimate within a given 3D error.
//! Epochs without any estimate (cold start, suspended outages) count as
//! unavailable.

use std::path::Path;

use nalgebra::Vector3;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::engine::{OutputEstimate, OutputSource};
use crate::io::{self, GtSample, IoError, TrajectoryRow};
use crate::state::GnssFix;

pub const DEFAULT_THRESHOLDS: [f64; 9] = [1.0, 2.0, 5.0, 10.0, 15.0, 20.0, 30.0, 50.0, 100.0];

pub const METRICS_FILE: &str = "metrics.json";
pub const TIMING_FILE: &str = "timing.json";
pub const TRAJECTORY_FILE: &str = "trajectory.csv";
pub const AVAILABILITY_FILE: &str = "availability.csv";

#[derive(Debug, Error)]
pub enum EvalError {
    #[error("no estimate overlaps the ground-truth span")]
    EmptyOverlap,
    #[error("no samples to evaluate")]
    EmptyInput,
    #[error(transparent)]
    Io(#[from] IoError),
}

/// Position estimate reduced to what the metrics need.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EstimatePoint {
    pub t: f64,
    pub p: Vector3<f64>,
    pub propagated: bool,
}

impl From<&OutputEstimate> for EstimatePoint {
    fn from(o: &OutputEstimate) -> Self {
        Self {
            t: o.t,
            p: o.state.p,
            propagated: o.source == OutputSource::ImuPropagated,
        }
    }
}

impl From<&TrajectoryRow> for EstimatePoint {
    fn from(r: &TrajectoryRow) -> Self {
        Self {
            t: r.t_gpst_s,
            p: Vector3::new(r.east_m, r.north_m, r.up_m),
            propagated: r.source == OutputSource::ImuPropagated,
        }
    }
}

impl From<&GnssFix> for EstimatePoint {
    fn from(f: &GnssFix) -> Self {
        Self {
            t: f.t,
            p: f.p,
            propagated: false,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Pair {
    pub t: f64,
    pub est: Vector3<f64>,
    pub gt: Vector3<f64>,
    pub propagated: bool,
}

impl Pair {
    pub fn error(&self) -> Vector3<f64> {
        self.est - self.gt
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Aligned {
    pub pairs: Vec<Pair>,
    /// Estimates outside the ground-truth span.
    pub dropped: usize,
}

/// Ground-truth position at `t` by linear interpolation, `None` outside the
/// sampled span.
pub fn interpolate_gt(gt: &[GtSample], t: f64) -> Option<Vector3<f64>> {
    let (first, last) = (gt.first()?, gt.last()?);
    if t < first.t || t > last.t {
        return None;
    }
    let i = gt.partition_point(|s| s.t <= t);
    if i == 0 {
        return Some(first.p());
    }
    let a = &gt[i - 1];
    if a.t == t || i == gt.len() {
        return Some(a.p());
    }
    let b = &gt[i];
    let w = (t - a.t) / (b.t - a.t);
    Some(a.p() + (b.p() - a.p()) * w)
}

pub fn align_to_ground_truth(estimates: &[EstimatePoint], gt: &[GtSample]) -> Result<Aligned, EvalError> {
    let mut pairs = Vec::with_capacity(estimates.len());
    let mut dropped = 0;
    for e in estimates {
        match interpolate_gt(gt, e.t) {
            Some(g) => pairs.push(Pair {
                t: e.t,
                est: e.p,
                gt: g,
                propagated: e.propagated,
            }),
            None => dropped += 1,
        }
    }
    if pairs.is_empty() {
        return Err(EvalError::EmptyOverlap);
    }
    Ok(Aligned { pairs, dropped })
}

pub fn rmse_3d(pairs: &[Pair]) -> Result<f64, EvalError> {
    if pairs.is_empty() {
        return Err(EvalError::EmptyInput);
    }
    let sum: f64 = pairs.iter().map(|p| p.error().norm_squared()).sum();
    Ok((sum / pairs.len() as f64).sqrt())
}

/// Per-axis RMSE in east, north, up.
pub fn rmse_enu(pairs: &[Pair]) -> Result<[f64; 3], EvalError> {
    if pairs.is_empty() {
        return Err(EvalError::EmptyInput);
    }
    let n = pairs.len() as f64;
    let mut out = [0.0; 3];
    for (i, o) in out.iter_mut().enumerate() {
        *o = (pairs.iter().map(|p| p.error()[i].powi(2)).sum::<f64>() / n).sqrt();
    }
    Ok(out)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AvailabilityPoint {
    pub theta_m: f64,
    pub availability_pct: f64,
}

/// Median spacing of the ground-truth grid.
fn grid_period(gt: &[GtSample]) -> f64 {
    let mut d: Vec<f64> = gt.windows(2).map(|w| w[1].t - w[0].t).collect();
    if d.is_empty() {
        return 1.0;
    }
    d.sort_by(f64::total_cmp);
    d[d.len() / 2]
}

/// 3D error of the estimate assigned to each ground-truth epoch (the one
/// nearest in time, within half a grid period), or `None`.
pub fn epoch_errors(estimates: &[EstimatePoint], gt: &[GtSample]) -> Vec<Option<f64>> {
    let mut sorted: Vec<&EstimatePoint> = estimates.iter().collect();
    sorted.sort_by(|a, b| a.t.total_cmp(&b.t));
    let half = 0.5 * grid_period(gt) * (1.0 + 1e-9);
    gt.iter()
        .map(|g| {
            let i = sorted.partition_point(|e| e.t < g.t);
            let candidates = [i.checked_sub(1), Some(i)];
            candidates
                .iter()
                .flatten()
                .filter_map(|&k| sorted.get(k))
                .filter(|e| (e.t - g.t).abs() <= half)
                .min_by(|a, b| (a.t - g.t).abs().total_cmp(&(b.t - g.t).abs()))
                .and_then(|e| interpolate_gt(gt, e.t).map(|truth| (e.p - truth).norm()))
        })
        .collect()
}

/// `A(θ)` in percent for every threshold.
pub fn service_availability(estimates: &[EstimatePoint], gt: &[GtSample], thresholds: &[f64]) -> Vec<AvailabilityPoint> {
    let errors = epoch_errors(estimates, gt);
    let total = gt.len().max(1) as f64;
    thresholds
        .iter()
        .map(|&theta| {
            let n = errors.iter().flatten().filter(|e| **e <= theta).count();
            AvailabilityPoint {
                theta_m: theta,
                availability_pct: 100.0 * n as f64 / total,
            }
        })
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Counts {
    pub estimates: usize,
    pub optimized: usize,
    pub propagated: usize,
    pub gt_epochs: usize,
    /// Ground-truth epochs without any estimate.
    pub gap_epochs: usize,
    /// Estimates outside the ground-truth span.
    pub dropped: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvaluationReport {
    pub rmse_3d_m: f64,
    pub rmse_east_m: f64,
    pub rmse_north_m: f64,
    pub rmse_up_m: f64,
    pub availability: Vec<AvailabilityPoint>,
    pub counts: Counts,
}

pub fn evaluate(estimates: &[EstimatePoint], gt: &[GtSample], thresholds: &[f64]) -> Result<EvaluationReport, EvalError> {
    let aligned = align_to_ground_truth(estimates, gt)?;
    let rmse = rmse_3d(&aligned.pairs)?;
    let [e, n, u] = rmse_enu(&aligned.pairs)?;
    let errors = epoch_errors(estimates, gt);
    let propagated = estimates.iter().filter(|e| e.propagated).count();
    Ok(EvaluationReport {
        rmse_3d_m: rmse,
        rmse_east_m: e,
        rmse_north_m: n,
        rmse_up_m: u,
        availability: service_availability(estimates, gt, thresholds),
        counts: Counts {
            estimates: estimates.len(),
            optimized: estimates.len() - propagated,
            propagated,
            gt_epochs: gt.len(),
            gap_epochs: errors.iter().filter(|e| e.is_none()).count(),
            dropped: aligned.dropped,
        },
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TimingStats {
    pub count: usize,
    pub mean_ms: f64,
    pub p95_ms: f64,
    pub max_ms: f64,
}

impl TimingStats {
    /// Nearest-rank statistics; `None` for an empty sample.
    pub fn from_samples(ms: &[f64]) -> Option<Self> {
        if ms.is_empty() {
            return None;
        }
        let mut s = ms.to_vec();
        s.sort_by(f64::total_cmp);
        let rank = ((0.95 * s.len() as f64).ceil() as usize).clamp(1, s.len());
        Some(Self {
            count: s.len(),
            mean_ms: s.iter().sum::<f64>() / s.len() as f64,
            p95_ms: s[rank - 1],
            max_ms: s[s.len() - 1],
        })
    }
}

/// Writes `metrics.json` and `availability.csv`, plus `timing.json` when
/// timing is given. Timing is kept apart so the metrics file stays
/// identical across reruns.
pub fn emit_report(report: &EvaluationReport, timing: Option<&TimingStats>, out: &Path) -> Result<(), EvalError> {
    std::fs::create_dir_all(out).map_err(|e| IoError::File {
        path: out.to_path_buf(),
        source: e,
    })?;
    io::write_json(&out.join(METRICS_FILE), report)?;
    write_availability(&out.join(AVAILABILITY_FILE), &report.availability)?;
    if let Some(t) = timing {
        io::write_json(&out.join(TIMING_FILE), t)?;
    }
    Ok(())
}

pub fn write_availability(path: &Path, curve: &[AvailabilityPoint]) -> Result<(), IoError> {
    let file = std::fs::File::create(path).map_err(|e| IoError::File {
        path: path.to_path_buf(),
        source: e,
    })?;
    let mut w = csv::WriterBuilder::new().has_headers(false).from_writer(file);
    let csv_err = |e| IoError::Csv {
        path: path.to_path_buf(),
        source: e,
    };
    w.write_record(["theta_m", "availability_pct"]).map_err(csv_err)?;
    for p in curve {
        w.serialize(p).map_err(csv_err)?;
    }
    w.flush().map_err(|e| IoError::File {
        path: path.to_path_buf(),
        source: e,
    })
}
