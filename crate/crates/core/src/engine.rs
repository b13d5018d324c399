//! Streaming fusion engine: sliding-window graph maintenance, cold start,
//! smoothing latency, IMU-only propagation and marginalization.
//!
//! The smoothing latency `τ` counts GNSS epochs, not seconds: with `τ = 2`
//! the state of fix `k − 2` is released when fix `k` is processed. In
//! outage-heavy data GNSS epochs are irregular, so the delay in seconds
//! varies along the run.

use std::collections::{BTreeMap, VecDeque};
use std::time::Instant;

use log::{debug, warn};
use nalgebra::{DMatrix, Matrix3, Vector3};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::graph::{
    BiasWalkFactor, EpochIndex, FactorGraph, GnssFactor, GraphError, ImuFactor, PriorFactor, Values,
};
use crate::lie::Rotation;
use crate::preintegration::{preintegrate_span, PreintegratedImu, PreintegrationError};
use crate::solver::{marginalize, optimize_with_lambda, SolverConfig, SolverError};
use crate::state::{GnssFix, ImuBias, ImuNoiseParams, ImuSample, NavState};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum EngineError {
    #[error("{stream} time went backwards: {t} after {prev}")]
    NonMonotonicTime { stream: &'static str, prev: f64, t: f64 },
    #[error("horizontal displacement {displacement:.2} m is too small to initialize")]
    InsufficientMotion { displacement: f64 },
    #[error("IMU data does not cover the interval [{t0}, {t1}]")]
    InsufficientImu { t0: f64, t1: f64 },
    #[error("non-finite measurement at t = {0}")]
    NonFinite(f64),
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error(transparent)]
    Solver(#[from] SolverError),
    #[error(transparent)]
    Graph(#[from] GraphError),
    #[error(transparent)]
    Preintegration(#[from] PreintegrationError),
}

impl EngineError {
    /// True for failures of the estimator itself rather than of the input.
    pub fn is_numerical(&self) -> bool {
        matches!(self, EngineError::Solver(_) | EngineError::Graph(_))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EngineConfig {
    /// Number of future GNSS epochs to wait before releasing a state.
    pub smoothing_latency_tau: u64,
    /// Seconds of history kept in the graph; `None` keeps everything.
    pub marginalization_lag: Option<f64>,
    /// Longest IMU-only propagation after the last fix, s.
    pub max_imu_propagation: f64,
    pub cold_start_fix_count: usize,
    pub gnss_cov_scale: f64,
    /// Grid rate of propagated outputs, Hz.
    pub output_rate: f64,
    pub imu_noise: ImuNoiseParams,
    pub solver: SolverConfig,
    /// Emit IMU-propagated states between fixes (only with `τ = 0`).
    pub propagate_outputs: bool,
    /// Expected GNSS fix interval, s. A longer silence counts as an outage.
    pub gnss_nominal_period: f64,
    /// Horizontal displacement required across the cold-start fixes, m.
    pub init_min_displacement: f64,
    /// Initial attitude uncertainty (nav frame), rad.
    pub init_roll_pitch_std: f64,
    pub init_yaw_std: f64,
    pub init_position_std: f64,
    pub init_velocity_std: f64,
    pub init_accel_bias_std: f64,
    pub init_gyro_bias_std: f64,
}

impl Default for EngineConfig {
    fn default() -> Self {
        Self {
            smoothing_latency_tau: 0,
            marginalization_lag: None,
            max_imu_propagation: 4.0,
            cold_start_fix_count: 4,
            gnss_cov_scale: 2.0,
            output_rate: 1.0,
            imu_noise: ImuNoiseParams::default(),
            solver: SolverConfig::default(),
            propagate_outputs: true,
            gnss_nominal_period: 1.0,
            init_min_displacement: 1.0,
            init_roll_pitch_std: 0.05,
            init_yaw_std: 0.3,
            init_position_std: 10.0,
            init_velocity_std: 3.0,
            init_accel_bias_std: 0.1,
            init_gyro_bias_std: 0.01,
        }
    }
}

impl EngineConfig {
    /// Batch settings: nothing is released before the end of the stream,
    /// nothing is marginalized and no IMU-only outputs are produced.
    pub fn batch(mut self) -> Self {
        self.smoothing_latency_tau = u64::MAX;
        self.marginalization_lag = None;
        self.propagate_outputs = false;
        self
    }

    pub fn validate(&self) -> Result<(), EngineError> {
        let err = |m: &str| Err(EngineError::Config(m.to_string()));
        if !(self.max_imu_propagation > 0.0) {
            return err("max_imu_propagation must be positive");
        }
        if self.cold_start_fix_count < 2 {
            return err("cold_start_fix_count must be at least 2");
        }
        if !(self.gnss_cov_scale > 0.0) {
            return err("gnss_cov_scale must be positive");
        }
        if !(self.output_rate > 0.0) {
            return err("output_rate must be positive");
        }
        if let Some(lag) = self.marginalization_lag {
            if !(lag > 0.0) {
                return err("marginalization_lag must be positive");
            }
        }
        if !(self.gnss_nominal_period > 0.0) {
            return err("gnss_nominal_period must be positive");
        }
        let stds = [
            self.init_roll_pitch_std,
            self.init_yaw_std,
            self.init_position_std,
            self.init_velocity_std,
            self.init_accel_bias_std,
            self.init_gyro_bias_std,
        ];
        if stds.iter().any(|s| !(s.is_finite() && *s > 0.0)) {
            return err("initial standard deviations must be positive");
        }
        self.imu_noise.validate(false).map_err(EngineError::Config)?;
        self.solver.validate().map_err(EngineError::Config)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OutputSource {
    Optimized,
    ImuPropagated,
}

#[derive(Debug, Clone, PartialEq)]
pub struct OutputEstimate {
    pub t: f64,
    pub state: NavState,
    pub source: OutputSource,
    /// Data time elapsed between the state and its release, s.
    pub latency: f64,
    /// Graph epoch of optimized outputs.
    pub epoch: Option<EpochIndex>,
    /// Cost of the factors attached to the state at release time.
    pub cost: Option<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EngineMode {
    ColdStart,
    Tracking,
    OutagePropagation,
    OutageSuspended,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EngineStatus {
    pub mode: EngineMode,
    pub epochs_in_graph: usize,
    pub last_gnss_t: Option<f64>,
    pub last_imu_t: Option<f64>,
}

/// Compass heading (clockwise from north) of a horizontal ENU direction,
/// degrees in `[0, 360)`.
pub fn heading_deg(v: &Vector3<f64>) -> f64 {
    v.x.atan2(v.y).to_degrees().rem_euclid(360.0)
}

/// Least-squares straight-line fit of the fixes: position at the first fix
/// time and constant velocity.
fn fit_line(fixes: &[GnssFix]) -> (Vector3<f64>, Vector3<f64>) {
    let t0 = fixes[0].t;
    let n = fixes.len() as f64;
    let tm = fixes.iter().map(|f| f.t - t0).sum::<f64>() / n;
    let pm = fixes.iter().map(|f| f.p).sum::<Vector3<f64>>() / n;
    let stt: f64 = fixes.iter().map(|f| (f.t - t0 - tm).powi(2)).sum();
    let v = if stt > 0.0 {
        fixes.iter().map(|f| (f.p - pm) * (f.t - t0 - tm)).sum::<Vector3<f64>>() / stt
    } else {
        Vector3::zeros()
    };
    (pm - v * tm, v)
}

/// Initial state at the first buffered fix and the prior that anchors it.
///
/// Position and velocity come from a line fit through the fixes, yaw from
/// the direction of travel, roll and pitch from the mean specific force.
/// Biases start at zero.
pub fn initialize_cold_start(
    fixes: &[GnssFix],
    imu: &[ImuSample],
    config: &EngineConfig,
) -> Result<(NavState, PriorFactor), EngineError> {
    let (first, last) = match (fixes.first(), fixes.last()) {
        (Some(f), Some(l)) if fixes.len() >= 2 => (f, l),
        _ => return Err(EngineError::InsufficientMotion { displacement: 0.0 }),
    };
    let d = last.p - first.p;
    let displacement = d.xy().norm();
    if !(displacement >= config.init_min_displacement) || !(last.t > first.t) {
        return Err(EngineError::InsufficientMotion { displacement });
    }
    let (p0, v) = fit_line(fixes);
    let dir = if v.xy().norm() > 1e-9 { v } else { d };
    let yaw = dir.y.atan2(dir.x);

    let window: Vec<&ImuSample> = imu.iter().filter(|s| s.t >= first.t && s.t <= last.t).collect();
    let (roll, pitch) = if window.is_empty() {
        (0.0, 0.0)
    } else {
        let f = window.iter().map(|s| s.accel()).sum::<Vector3<f64>>() / window.len() as f64;
        (f.y.atan2(f.z), (-f.x).atan2(f.y.hypot(f.z)))
    };
    let rot = Rotation::from_euler(roll, pitch, yaw);
    let state = NavState {
        t: first.t,
        rot,
        p: p0,
        v,
        bias: ImuBias::default(),
    };

    let mut cov = DMatrix::zeros(15, 15);
    let nav_att = Matrix3::from_diagonal(&Vector3::new(
        config.init_roll_pitch_std.powi(2),
        config.init_roll_pitch_std.powi(2),
        config.init_yaw_std.powi(2),
    ));
    let r = rot.matrix();
    cov.view_mut((0, 0), (3, 3)).copy_from(&(r.transpose() * nav_att * r));
    let diag = [
        (3, config.init_position_std),
        (6, config.init_velocity_std),
        (9, config.init_accel_bias_std),
        (12, config.init_gyro_bias_std),
    ];
    for (off, std) in diag {
        for i in 0..3 {
            cov[(off + i, off + i)] = std * std;
        }
    }
    let prior = PriorFactor::full(0, state.clone(), cov)?;
    Ok((state, prior))
}

/// The fusion engine. Feed measurements in time order through
/// [`Engine::push_imu`] and [`Engine::push_gnss`]; when a fix and an IMU
/// sample share a timestamp, push the fix first.
#[derive(Debug, Clone)]
pub struct Engine {
    config: EngineConfig,
    mode: EngineMode,
    graph: FactorGraph,
    values: Values,
    next_epoch: EpochIndex,
    last_epoch: Option<EpochIndex>,

    cold_fixes: VecDeque<GnssFix>,
    cold_imu: Vec<ImuSample>,

    accum: PreintegratedImu,
    accum_valid: bool,
    /// Latest IMU sample, held constant from `held_from` onwards.
    held: Option<ImuSample>,
    held_from: f64,

    last_imu_t: Option<f64>,
    last_gnss_t: Option<f64>,
    last_emitted_t: Option<f64>,

    pending: VecDeque<EpochIndex>,
    snapshots: BTreeMap<EpochIndex, NavState>,
    optimize_ms: Vec<f64>,
    optimize_iterations: Vec<usize>,
    /// Damping carried between consecutive solves of the sliding window.
    lambda: Option<f64>,
}

impl Engine {
    pub fn new(config: EngineConfig) -> Result<Self, EngineError> {
        config.validate()?;
        Ok(Self {
            config,
            mode: EngineMode::ColdStart,
            graph: FactorGraph::new(),
            values: Values::new(),
            next_epoch: 0,
            last_epoch: None,
            cold_fixes: VecDeque::new(),
            cold_imu: Vec::new(),
            accum: PreintegratedImu::new(ImuBias::default()),
            accum_valid: false,
            held: None,
            held_from: 0.0,
            last_imu_t: None,
            last_gnss_t: None,
            last_emitted_t: None,
            pending: VecDeque::new(),
            snapshots: BTreeMap::new(),
            optimize_ms: Vec::new(),
            optimize_iterations: Vec::new(),
            lambda: None,
        })
    }

    pub fn config(&self) -> &EngineConfig {
        &self.config
    }
    pub fn graph(&self) -> &FactorGraph {
        &self.graph
    }
    pub fn values(&self) -> &Values {
        &self.values
    }
    pub fn mode(&self) -> EngineMode {
        self.mode
    }
    pub fn status(&self) -> EngineStatus {
        EngineStatus {
            mode: self.mode,
            epochs_in_graph: self.graph.epochs().len(),
            last_gnss_t: self.last_gnss_t,
            last_imu_t: self.last_imu_t,
        }
    }
    /// Wall-clock duration of every optimize call, ms.
    pub fn optimize_times_ms(&self) -> &[f64] {
        &self.optimize_ms
    }
    pub fn optimize_iterations(&self) -> &[usize] {
        &self.optimize_iterations
    }

    pub fn push_imu(&mut self, sample: ImuSample) -> Result<Option<OutputEstimate>, EngineError> {
        if !sample.is_finite() {
            return Err(EngineError::NonFinite(sample.t));
        }
        if let Some(prev) = self.last_imu_t {
            if sample.t <= prev {
                return Err(EngineError::NonMonotonicTime {
                    stream: "IMU",
                    prev,
                    t: sample.t,
                });
            }
        }
        self.last_imu_t = Some(sample.t);

        if self.mode == EngineMode::ColdStart {
            self.cold_imu.push(sample);
            self.trim_cold_imu();
            return Ok(None);
        }

        let out = self.propagated_output(&sample);
        if let Some(o) = &out {
            self.last_emitted_t = Some(o.t);
        }
        self.advance_accumulator(sample);

        if let Some(last) = self.last_gnss_t {
            let gap = sample.t - last;
            if gap > self.config.max_imu_propagation {
                self.mode = EngineMode::OutageSuspended;
            } else if gap > self.config.gnss_nominal_period {
                self.mode = EngineMode::OutagePropagation;
            }
        }
        Ok(out)
    }

    pub fn push_gnss(&mut self, fix: GnssFix) -> Result<Vec<OutputEstimate>, EngineError> {
        if !(fix.t.is_finite() && fix.p.iter().chain(fix.cov.iter()).all(|x| x.is_finite())) {
            return Err(EngineError::NonFinite(fix.t));
        }
        if let Some(prev) = self.last_gnss_t.or(self.cold_fixes.back().map(|f| f.t)) {
            if fix.t < prev {
                return Err(EngineError::NonMonotonicTime {
                    stream: "GNSS",
                    prev,
                    t: fix.t,
                });
            }
            if fix.t == prev {
                warn!("dropping duplicate GNSS fix at t = {}", fix.t);
                return Ok(Vec::new());
            }
        }
        let fix = GnssFix {
            cov: fix.cov * self.config.gnss_cov_scale,
            ..fix
        };

        if self.mode == EngineMode::ColdStart {
            return self.cold_start_step(fix);
        }

        if self.accum_valid {
            if let Some(held) = self.held {
                let dt = fix.t - self.held_from;
                if dt > 0.0 {
                    if let Err(e) = self.accum.integrate(&held, dt, &self.config.imu_noise) {
                        warn!("IMU accumulator invalidated: {e}");
                        self.accum_valid = false;
                    }
                }
            }
        }
        let last = self.last_epoch.expect("tracking without an epoch");
        let span = fix.t - self.values.get(last).map_or(fix.t, |s| s.t);
        let covered = self.accum_valid && (self.accum.delta_t - span).abs() <= self.config.imu_noise.max_imu_gap;
        if !covered {
            debug!("stale IMU accumulator at t = {}; re-initializing", fix.t);
            let mut out = self.flush();
            self.reset();
            out.extend(self.cold_start_step(fix)?);
            return Ok(out);
        }

        let epoch = self.next_epoch;
        self.next_epoch += 1;
        let prev = self.values.get(last).cloned().ok_or(GraphError::MissingEstimate(last))?;
        let mut initial = self.accum.predict(&prev, &self.config.imu_noise.gravity_vector());
        initial.t = fix.t;
        self.graph.add_epoch(epoch, &initial)?;
        self.values.insert(epoch, initial);
        let preint = std::mem::replace(&mut self.accum, PreintegratedImu::new(prev.bias));
        self.add_motion_factors(last, epoch, preint, span)?;
        self.graph.add_factor(GnssFactor::new(epoch, fix.p, fix.cov)?)?;
        self.last_epoch = Some(epoch);
        self.pending.push_back(epoch);

        self.solve()?;
        self.marginalize_old(fix.t)?;

        let bias = self.values.get(epoch).map(|s| s.bias).unwrap_or_default();
        self.accum = PreintegratedImu::new(bias);
        self.held_from = fix.t;
        self.last_gnss_t = Some(fix.t);
        self.mode = EngineMode::Tracking;
        Ok(self.release(fix.t))
    }

    /// Emits every state still held back by the smoothing latency.
    pub fn finalize(&mut self) -> Vec<OutputEstimate> {
        self.flush()
    }

    fn flush(&mut self) -> Vec<OutputEstimate> {
        let now = self.last_gnss_t.unwrap_or(0.0);
        let mut out = Vec::new();
        while let Some(e) = self.pending.pop_front() {
            out.extend(self.emit_epoch(e, now));
        }
        out
    }

    fn reset(&mut self) {
        self.graph = FactorGraph::new();
        self.values = Values::new();
        self.snapshots.clear();
        self.pending.clear();
        self.last_epoch = None;
        self.accum_valid = false;
        self.lambda = None;
        self.cold_fixes.clear();
        self.cold_imu = self.held.into_iter().collect();
        self.held = None;
        self.mode = EngineMode::ColdStart;
    }

    fn trim_cold_imu(&mut self) {
        let anchor = match self.cold_fixes.front() {
            Some(f) => f.t,
            None => f64::INFINITY,
        };
        // Keep the last sample at or before the first fix for the hold.
        let keep_from = self.cold_imu.partition_point(|s| s.t <= anchor).saturating_sub(1);
        if keep_from > 0 {
            self.cold_imu.drain(..keep_from);
        }
    }

    fn cold_start_step(&mut self, fix: GnssFix) -> Result<Vec<OutputEstimate>, EngineError> {
        self.cold_fixes.push_back(fix);
        while self.cold_fixes.len() > self.config.cold_start_fix_count {
            self.cold_fixes.pop_front();
        }
        self.trim_cold_imu();
        self.last_gnss_t = Some(fix.t);
        if self.cold_fixes.len() < self.config.cold_start_fix_count {
            return Ok(Vec::new());
        }
        let fixes: Vec<GnssFix> = self.cold_fixes.iter().copied().collect();
        match self.build_initial_window(&fixes) {
            Ok(()) => {}
            Err(EngineError::InsufficientMotion { displacement }) => {
                debug!("cold start waiting for motion ({displacement:.2} m)");
                return Ok(Vec::new());
            }
            Err(EngineError::InsufficientImu { t0, t1 }) => {
                debug!("cold start lacks IMU coverage over [{t0}, {t1}]; dropping buffered fixes");
                self.cold_fixes.drain(..self.cold_fixes.len() - 1);
                self.trim_cold_imu();
                return Ok(Vec::new());
            }
            Err(e) => return Err(e),
        }
        Ok(self.release(fix.t))
    }

    fn build_initial_window(&mut self, fixes: &[GnssFix]) -> Result<(), EngineError> {
        let (state0, prior) = initialize_cold_start(fixes, &self.cold_imu, &self.config)?;
        let noise = self.config.imu_noise;
        let gravity = noise.gravity_vector();

        let mut preints = Vec::with_capacity(fixes.len() - 1);
        for w in fixes.windows(2) {
            let p = preintegrate_span(&self.cold_imu, w[0].t, w[1].t, ImuBias::default(), &noise)
                .map_err(|_| EngineError::InsufficientImu { t0: w[0].t, t1: w[1].t })?;
            if (p.delta_t - (w[1].t - w[0].t)).abs() > noise.max_imu_gap {
                return Err(EngineError::InsufficientImu { t0: w[0].t, t1: w[1].t });
            }
            preints.push(p);
        }

        let base = self.next_epoch;
        let mut graph = FactorGraph::new();
        let mut values = Values::new();
        let mut state = state0.clone();
        for (k, fix) in fixes.iter().enumerate() {
            let e = base + k as EpochIndex;
            if k > 0 {
                state = preints[k - 1].predict(&state, &gravity);
                state.t = fix.t;
            }
            graph.add_epoch(e, &state)?;
            values.insert(e, state.clone());
            graph.add_factor(GnssFactor::new(e, fix.p, fix.cov)?)?;
        }
        graph.add_factor(PriorFactor::full(base, prior.mean, prior.cov)?)?;

        self.graph = graph;
        self.values = values;
        for (k, p) in preints.into_iter().enumerate() {
            let (i, j) = (base + k as EpochIndex, base + k as EpochIndex + 1);
            let dt = fixes[k + 1].t - fixes[k].t;
            self.add_motion_factors(i, j, p, dt)?;
        }
        let n = fixes.len() as EpochIndex;
        self.next_epoch = base + n;
        let last = base + n - 1;
        self.last_epoch = Some(last);
        self.mode = EngineMode::Tracking;

        // Epochs whose release deadline already passed are never emitted.
        let tau = self.config.smoothing_latency_tau;
        for e in base..base + n {
            if last - e <= tau {
                self.pending.push_back(e);
            }
        }

        self.solve()?;
        let t_last = fixes[fixes.len() - 1].t;
        self.marginalize_old(t_last)?;

        // Hand the buffered IMU tail over to the tracking accumulator.
        let bias = self.values.get(last).map(|s| s.bias).unwrap_or_default();
        self.accum = PreintegratedImu::new(bias);
        self.accum_valid = true;
        self.held_from = t_last;
        let split = self.cold_imu.partition_point(|s| s.t <= t_last);
        self.held = split.checked_sub(1).map(|i| self.cold_imu[i]);
        let tail: Vec<ImuSample> = self.cold_imu.drain(..).skip(split).collect();
        for s in tail {
            self.advance_accumulator(s);
        }
        self.cold_fixes.clear();
        Ok(())
    }

    fn add_motion_factors(
        &mut self,
        from: EpochIndex,
        to: EpochIndex,
        preint: PreintegratedImu,
        dt: f64,
    ) -> Result<(), EngineError> {
        let noise = &self.config.imu_noise;
        self.graph
            .add_factor(ImuFactor::new(from, to, preint, noise.gravity_vector())?)?;
        self.graph.add_factor(BiasWalkFactor::from_random_walk(
            from,
            to,
            noise.accel_bias_rw,
            noise.gyro_bias_rw,
            dt,
        )?)?;
        Ok(())
    }

    /// Integrates the held sample up to `sample.t` and holds `sample`.
    fn advance_accumulator(&mut self, sample: ImuSample) {
        if let Some(held) = self.held {
            let dt = sample.t - self.held_from;
            if self.accum_valid && dt > 0.0 {
                if let Err(e) = self.accum.integrate(&held, dt, &self.config.imu_noise) {
                    warn!("IMU accumulator invalidated: {e}");
                    self.accum_valid = false;
                }
            }
        }
        self.held = Some(sample);
        self.held_from = self.held_from.max(sample.t);
    }

    /// IMU-only estimate on the output grid, if one falls in
    /// `(held_from, sample.t]`.
    fn propagated_output(&self, sample: &ImuSample) -> Option<OutputEstimate> {
        let cfg = &self.config;
        if cfg.smoothing_latency_tau != 0 || !cfg.propagate_outputs || !self.accum_valid {
            return None;
        }
        let held = self.held?;
        let last_gnss = self.last_gnss_t?;
        let period = 1.0 / cfg.output_rate;
        let k = (self.held_from * cfg.output_rate).floor() + 1.0;
        let g = k * period;
        if g > sample.t || g <= last_gnss || g - last_gnss > cfg.max_imu_propagation {
            return None;
        }
        if self.last_emitted_t.is_some_and(|t| g <= t) {
            return None;
        }
        let mut acc = self.accum.clone();
        let dt = g - self.held_from;
        if dt > 0.0 && acc.integrate(&held, dt, &cfg.imu_noise).is_err() {
            return None;
        }
        let base = self.values.get(self.last_epoch?)?;
        let mut state = acc.predict(base, &cfg.imu_noise.gravity_vector());
        state.t = g;
        Some(OutputEstimate {
            t: g,
            state,
            source: OutputSource::ImuPropagated,
            latency: sample.t - g,
            epoch: None,
            cost: None,
        })
    }

    fn solve(&mut self) -> Result<(), EngineError> {
        let start = Instant::now();
        let solver = &self.config.solver;
        let lambda = self.lambda.map_or(solver.lm_initial_lambda, |l| {
            (l * solver.lm_lambda_factor).min(solver.lm_initial_lambda)
        });
        let result = optimize_with_lambda(&self.graph, &self.values, solver, lambda)?;
        self.lambda = Some(result.final_lambda);
        self.optimize_ms.push(start.elapsed().as_secs_f64() * 1e3);
        self.optimize_iterations.push(result.iterations);
        if !result.converged {
            debug!("optimizer stopped after {} iterations", result.iterations);
        }
        self.values = result.values;
        Ok(())
    }

    fn marginalize_old(&mut self, now: f64) -> Result<(), EngineError> {
        let Some(lag) = self.config.marginalization_lag else {
            return Ok(());
        };
        let result = marginalize(&mut self.graph, &mut self.values, now - lag)?;
        for (e, state) in result.removed_estimates {
            if self.pending.contains(&e) {
                self.snapshots.insert(e, state);
            }
        }
        Ok(())
    }

    fn release(&mut self, now: f64) -> Vec<OutputEstimate> {
        let tau = self.config.smoothing_latency_tau;
        let mut out = Vec::new();
        while self.pending.len() as u64 > tau {
            let Some(e) = self.pending.pop_front() else { break };
            out.extend(self.emit_epoch(e, now));
        }
        out
    }

    fn emit_epoch(&mut self, epoch: EpochIndex, now: f64) -> Option<OutputEstimate> {
        let (state, cost) = match self.snapshots.remove(&epoch) {
            Some(s) => (s, None),
            None => {
                let s = self.values.get(epoch)?.clone();
                (s, self.graph.cost_around(epoch, &self.values).ok())
            }
        };
        if self.last_emitted_t.is_some_and(|t| state.t <= t) {
            return None;
        }
        self.last_emitted_t = Some(state.t);
        Some(OutputEstimate {
            t: state.t,
            latency: (now - state.t).max(0.0),
            state,
            source: OutputSource::Optimized,
            epoch: Some(epoch),
            cost,
        })
    }
}

/// Result of streaming a whole dataset through an engine.
#[derive(Debug, Clone)]
pub struct RunOutput {
    pub estimates: Vec<OutputEstimate>,
    pub optimize_ms: Vec<f64>,
}

/// Feeds both streams through a fresh engine in time order (fixes before
/// IMU samples with the same timestamp) and finalizes it.
pub fn run_streams(config: &EngineConfig, imu: &[ImuSample], gnss: &[GnssFix]) -> Result<RunOutput, EngineError> {
    let mut engine = Engine::new(config.clone())?;
    let mut estimates = Vec::new();
    let (mut i, mut g) = (0, 0);
    while i < imu.len() || g < gnss.len() {
        let take_gnss = match (imu.get(i), gnss.get(g)) {
            (Some(s), Some(f)) => f.t <= s.t,
            (None, Some(_)) => true,
            _ => false,
        };
        if take_gnss {
            estimates.extend(engine.push_gnss(gnss[g])?);
            g += 1;
        } else {
            estimates.extend(engine.push_imu(imu[i])?);
            i += 1;
        }
    }
    estimates.extend(engine.finalize());
    Ok(RunOutput {
        estimates,
        optimize_ms: engine.optimize_ms,
    })
}
