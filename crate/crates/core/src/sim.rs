//! Synthetic trajectories and measurement streams.
//!
//! Trajectories are chains of analytic phases with constant longitudinal
//! acceleration and constant yaw rate on flat ground, so position, velocity,
//! attitude, specific force and angular rate are all available in closed
//! form.

use std::path::Path;

use nalgebra::{Matrix3, Vector3};
use num_complex::Complex64;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::io::Anchor;
use crate::lie::Rotation;
use crate::state::{GnssFix, GnssQuality, ImuBias, ImuNoiseParams, ImuSample, NavState};

/// Variance floor attached to simulated fixes, m².
pub const GNSS_COV_FLOOR: f64 = 1e-4;

#[derive(Debug, Error)]
pub enum SimError {
    #[error("invalid specification: {0}")]
    InvalidSpec(String),
    #[error("unknown scenario '{0}'")]
    UnknownScenario(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum Motion {
    Straight { speed: f64 },
    Arc { speed: f64, yaw_rate: f64 },
    Stop,
}

impl Motion {
    fn speed(&self) -> f64 {
        match *self {
            Motion::Straight { speed } | Motion::Arc { speed, .. } => speed,
            Motion::Stop => 0.0,
        }
    }
    fn yaw_rate(&self) -> f64 {
        match *self {
            Motion::Arc { yaw_rate, .. } => yaw_rate,
            _ => 0.0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Segment {
    /// s
    pub duration: f64,
    #[serde(flatten)]
    pub motion: Motion,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrajectorySpec {
    pub segments: Vec<Segment>,
    /// ENU, m
    #[serde(default)]
    pub initial_position: [f64; 3],
    /// Counter-clockwise from east, rad.
    #[serde(default)]
    pub initial_yaw: f64,
    /// Speed at the start; defaults to the first segment's speed.
    #[serde(default)]
    pub initial_speed: Option<f64>,
    /// GPST of the first state, s.
    #[serde(default)]
    pub start_time: f64,
    /// Ground-truth sample rate, Hz.
    #[serde(default = "default_gt_rate")]
    pub rate: f64,
    /// Longitudinal acceleration used for speed changes between segments,
    /// m/s².
    #[serde(default = "default_accel_limit")]
    pub accel_limit: f64,
}

fn default_gt_rate() -> f64 {
    1.0
}
fn default_accel_limit() -> f64 {
    1.0
}

impl TrajectorySpec {
    pub fn new(segments: Vec<Segment>) -> Self {
        Self {
            segments,
            initial_position: [0.0; 3],
            initial_yaw: 0.0,
            initial_speed: None,
            start_time: 0.0,
            rate: default_gt_rate(),
            accel_limit: default_accel_limit(),
        }
    }

    pub fn duration(&self) -> f64 {
        self.segments.iter().map(|s| s.duration).sum()
    }
}

/// One constant-acceleration, constant-yaw-rate piece of a trajectory.
#[derive(Debug, Clone, Copy, PartialEq)]
struct Phase {
    t0: f64,
    duration: f64,
    p0: Vector3<f64>,
    speed0: f64,
    accel: f64,
    yaw0: f64,
    yaw_rate: f64,
}

impl Phase {
    /// Horizontal displacement after `tau` seconds, as a complex number
    /// `east + i·north`.
    fn displacement(&self, tau: f64) -> Complex64 {
        let (s0, a, w) = (self.speed0, self.accel, self.yaw_rate);
        let heading = Complex64::from_polar(1.0, self.yaw0);
        if (w * tau).abs() < 1e-9 {
            return heading * (s0 * tau + 0.5 * a * tau * tau);
        }
        let iw = Complex64::new(0.0, w);
        let e = Complex64::from_polar(1.0, w * tau);
        // ∫₀^τ (s0 + a u) e^{iwu} du
        let i0 = (e - 1.0) / iw;
        let i1 = tau * e / iw - (e - 1.0) / (iw * iw);
        heading * (s0 * i0 + a * i1)
    }

    fn kinematics(&self, tau: f64) -> Kinematics {
        let d = self.displacement(tau);
        let yaw = self.yaw0 + self.yaw_rate * tau;
        let speed = self.speed0 + self.accel * tau;
        let (s, c) = yaw.sin_cos();
        let dir = Vector3::new(c, s, 0.0);
        let left = Vector3::new(-s, c, 0.0);
        Kinematics {
            p: self.p0 + Vector3::new(d.re, d.im, 0.0),
            v: dir * speed,
            yaw,
            accel: dir * self.accel + left * (speed * self.yaw_rate),
            yaw_rate: self.yaw_rate,
        }
    }
}

/// Exact motion quantities at one instant.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Kinematics {
    pub p: Vector3<f64>,
    pub v: Vector3<f64>,
    pub yaw: f64,
    /// Navigation-frame acceleration, m/s².
    pub accel: Vector3<f64>,
    /// rad/s about the up axis.
    pub yaw_rate: f64,
}

impl Kinematics {
    pub fn rotation(&self) -> Rotation {
        Rotation::from_yaw(self.yaw)
    }

    pub fn nav_state(&self, t: f64) -> NavState {
        NavState {
            t,
            rot: self.rotation(),
            p: self.p,
            v: self.v,
            bias: ImuBias::default(),
        }
    }

    /// Error-free body-frame specific force and angular rate.
    pub fn imu(&self, gravity: &Vector3<f64>) -> (Vector3<f64>, Vector3<f64>) {
        let r = self.rotation();
        (r.inverse() * (self.accel - gravity), Vector3::new(0.0, 0.0, self.yaw_rate))
    }
}

/// Analytic ground-truth trajectory plus its samples at the configured sample rate.
#[derive(Debug, Clone, PartialEq)]
pub struct GroundTruth {
    phases: Vec<Phase>,
    pub states: Vec<NavState>,
}

impl GroundTruth {
    pub fn start_time(&self) -> f64 {
        self.phases[0].t0
    }

    pub fn end_time(&self) -> f64 {
        let last = self.phases[self.phases.len() - 1];
        last.t0 + last.duration
    }

    /// Exact kinematics at `t`; past the end the last phase continues.
    pub fn kinematics_at(&self, t: f64) -> Kinematics {
        let idx = self.phases.partition_point(|p| p.t0 <= t).saturating_sub(1);
        let ph = &self.phases[idx];
        let upper = if idx + 1 == self.phases.len() { f64::INFINITY } else { ph.duration };
        ph.kinematics((t - ph.t0).clamp(0.0, upper))
    }

    pub fn state_at(&self, t: f64) -> NavState {
        self.kinematics_at(t).nav_state(t)
    }
}

/// Samples `t0 + k/rate` for `k = 0, 1, …` up to `t1` inclusive (with a
/// small tolerance for rounding).
fn time_grid(t0: f64, t1: f64, rate: f64) -> impl Iterator<Item = f64> {
    let n = ((t1 - t0) * rate + 1e-9).floor() as usize;
    (0..=n).map(move |k| t0 + k as f64 / rate)
}

pub fn generate_trajectory(spec: &TrajectorySpec) -> Result<GroundTruth, SimError> {
    if spec.segments.is_empty() {
        return Err(SimError::InvalidSpec("no segments".into()));
    }
    if !(spec.rate > 0.0) || !(spec.accel_limit > 0.0) {
        return Err(SimError::InvalidSpec("rate and accel_limit must be positive".into()));
    }
    for s in &spec.segments {
        if !(s.duration > 0.0 && s.duration.is_finite()) {
            return Err(SimError::InvalidSpec("segment durations must be positive".into()));
        }
        if !(s.motion.speed() >= 0.0) {
            return Err(SimError::InvalidSpec("speeds must be non-negative".into()));
        }
    }

    let mut phases = Vec::new();
    let mut t = spec.start_time;
    let mut p = Vector3::from(spec.initial_position);
    let mut yaw = spec.initial_yaw;
    let mut speed = spec.initial_speed.unwrap_or(spec.segments[0].motion.speed());
    for seg in &spec.segments {
        let target = seg.motion.speed();
        let w = seg.motion.yaw_rate();
        let dv = target - speed;
        let ramp = (dv.abs() / spec.accel_limit).min(seg.duration);
        let mut pieces = Vec::new();
        if ramp > 0.0 {
            pieces.push((ramp, dv / ramp));
        }
        if seg.duration - ramp > 0.0 {
            pieces.push((seg.duration - ramp, 0.0));
        }
        for (duration, accel) in pieces {
            let ph = Phase {
                t0: t,
                duration,
                p0: p,
                speed0: speed,
                accel,
                yaw0: yaw,
                yaw_rate: w,
            };
            let k = ph.kinematics(duration);
            p = k.p;
            yaw = k.yaw;
            speed = ph.speed0 + accel * duration;
            t += duration;
            phases.push(ph);
        }
        speed = target;
    }

    let mut gt = GroundTruth {
        phases,
        states: Vec::new(),
    };
    gt.states = time_grid(spec.start_time, gt.end_time(), spec.rate)
        .map(|t| gt.state_at(t))
        .collect();
    Ok(gt)
}

fn normal(std: f64) -> Normal<f64> {
    Normal::new(0.0, std.max(0.0)).expect("finite standard deviation")
}

/// Measured IMU stream plus constant bias and white noise of standard
/// deviation `density · √rate`.
///
/// Sample `k` reports the mean specific force and angular rate over
/// `[t_k, t_k + 1/rate)`, resolved in the body frame at `t_k`, the way an
/// integrating IMU reports velocity and angle increments. Holding each
/// sample over its interval then reproduces the true velocity and attitude
/// increments, including intervals where the motion changes phase.
pub fn simulate_imu(
    gt: &GroundTruth,
    params: &ImuNoiseParams,
    true_bias: &ImuBias,
    rate: f64,
    seed: u64,
) -> Result<Vec<ImuSample>, SimError> {
    let gt_rate = gt_rate(gt);
    if !(rate > 0.0) || rate < 2.0 * gt_rate {
        return Err(SimError::InvalidSpec(format!(
            "IMU rate {rate} Hz must be at least twice the ground-truth rate {gt_rate} Hz"
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let na = normal(params.accel_noise_density * rate.sqrt());
    let ng = normal(params.gyro_noise_density * rate.sqrt());
    let g = params.gravity_vector();
    let dt = 1.0 / rate;
    Ok(time_grid(gt.start_time(), gt.end_time(), rate)
        .map(|t| {
            let k0 = gt.kinematics_at(t);
            let k1 = gt.kinematics_at(t + dt);
            let f = k0.rotation().inverse() * ((k1.v - k0.v) / dt - g);
            let w = Vector3::new(0.0, 0.0, (k1.yaw - k0.yaw) / dt);
            let nf = Vector3::from_fn(|_, _| na.sample(&mut rng));
            let nw = Vector3::from_fn(|_, _| ng.sample(&mut rng));
            ImuSample::new(t, f + true_bias.acc + nf, w + true_bias.gyro + nw)
        })
        .collect())
}

fn gt_rate(gt: &GroundTruth) -> f64 {
    match gt.states.as_slice() {
        [a, b, ..] => 1.0 / (b.t - a.t),
        _ => 0.0,
    }
}

/// GNSS outages: fixes are suppressed for `start ≤ t < end`.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct OutagePattern {
    pub intervals: Vec<(f64, f64)>,
    /// Availability the pattern was generated for, if any.
    #[serde(default)]
    pub target_availability: Option<f64>,
}

impl OutagePattern {
    pub fn none() -> Self {
        Self::default()
    }

    pub fn new(mut intervals: Vec<(f64, f64)>) -> Result<Self, SimError> {
        intervals.sort_by(|a, b| a.0.total_cmp(&b.0));
        for w in intervals.windows(2) {
            if w[1].0 < w[0].1 {
                return Err(SimError::InvalidSpec("outage intervals overlap".into()));
            }
        }
        if intervals.iter().any(|(s, e)| !(e > s)) {
            return Err(SimError::InvalidSpec("outage intervals must have positive length".into()));
        }
        Ok(Self {
            intervals,
            target_availability: None,
        })
    }

    pub fn contains(&self, t: f64) -> bool {
        let i = self.intervals.partition_point(|(s, _)| *s <= t);
        i > 0 && t < self.intervals[i - 1].1
    }

    /// Random bursts on the fix grid `t0 + k/rate` such that the fraction
    /// of surviving grid epochs matches `availability` to within one fix.
    /// Burst lengths are log-uniform in `burst_range` seconds and the first
    /// `clear_start` seconds stay free of outages.
    pub fn generate(
        t0: f64,
        t1: f64,
        rate: f64,
        availability: f64,
        burst_range: (f64, f64),
        clear_start: f64,
        seed: u64,
    ) -> Result<Self, SimError> {
        if !(0.0..=1.0).contains(&availability) {
            return Err(SimError::InvalidSpec("availability must lie in [0, 1]".into()));
        }
        let (lo, hi) = burst_range;
        if !(lo > 0.0 && hi >= lo) {
            return Err(SimError::InvalidSpec("invalid burst range".into()));
        }
        let total = time_grid(t0, t1, rate).count();
        let first = ((clear_start * rate).ceil() as usize).min(total);
        let outage_target = ((1.0 - availability) * total as f64).round() as usize;
        let outage_target = outage_target.min(total - first);

        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut bursts = Vec::new();
        let mut remaining = outage_target;
        while remaining > 0 {
            let len_s = (lo.ln() + rng.random::<f64>() * (hi.ln() - lo.ln())).exp();
            let len = ((len_s * rate).round() as usize).clamp(1, remaining);
            bursts.push(len);
            remaining -= len;
        }

        // Spread the free epochs over the gaps before, between and after
        // the bursts; every inner gap keeps at least one fix.
        let free = total - first - outage_target;
        let gaps_n = bursts.len() + 1;
        let mut gaps = vec![0usize; gaps_n];
        let inner = bursts.len().saturating_sub(1);
        let mut spare = free;
        if spare >= inner {
            for g in gaps.iter_mut().take(bursts.len()).skip(1) {
                *g = 1;
            }
            spare -= inner;
        }
        let mut cuts: Vec<usize> = (0..gaps_n - 1).map(|_| rng.random_range(0..=spare)).collect();
        cuts.sort_unstable();
        let mut prev = 0;
        for (i, c) in cuts.iter().chain(std::iter::once(&spare)).enumerate() {
            gaps[i] += c - prev;
            prev = *c;
        }

        let half = 0.5 / rate;
        let mut k = first;
        let mut intervals = Vec::with_capacity(bursts.len());
        for (i, len) in bursts.iter().enumerate() {
            k += gaps[i];
            let start = t0 + k as f64 / rate - half;
            intervals.push((start, start + *len as f64 / rate));
            k += len;
        }
        let mut pattern = Self::new(intervals)?;
        pattern.target_availability = Some(availability);
        Ok(pattern)
    }
}

/// GNSS fixes on the grid `t0 + k/rate`: true position plus Gaussian noise,
/// with the configured diagonal covariance (floored at
/// [`GNSS_COV_FLOOR`]).
pub fn simulate_gnss(
    gt: &GroundTruth,
    sigma: &Vector3<f64>,
    pattern: &OutagePattern,
    rate: f64,
    seed: u64,
) -> Result<Vec<GnssFix>, SimError> {
    if !(rate > 0.0) || rate > gt_rate(gt) + 1e-9 {
        return Err(SimError::InvalidSpec(format!(
            "GNSS rate {rate} Hz must be positive and not exceed the ground-truth rate"
        )));
    }
    if sigma.iter().any(|s| !(*s >= 0.0)) {
        return Err(SimError::InvalidSpec("GNSS sigma must be non-negative".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let dists: Vec<Normal<f64>> = sigma.iter().map(|s| normal(*s)).collect();
    let cov = Matrix3::from_diagonal(&sigma.map(|s| (s * s).max(GNSS_COV_FLOOR)));
    let mut fixes = Vec::new();
    for t in time_grid(gt.start_time(), gt.end_time(), rate) {
        // Draw noise for every grid epoch so outages do not shift the
        // random sequence.
        let n = Vector3::from_fn(|i, _| dists[i].sample(&mut rng));
        if pattern.contains(t) {
            continue;
        }
        fixes.push(GnssFix {
            t,
            p: gt.state_at(t).p + n,
            cov,
            quality: GnssQuality::Single,
        });
    }
    Ok(fixes)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ImuSimConfig {
    /// Hz
    pub rate: f64,
    #[serde(default)]
    pub params: ImuNoiseParams,
    /// True constant biases `[acc (m/s²), gyro (rad/s)]`.
    #[serde(default)]
    pub bias_acc: [f64; 3],
    #[serde(default)]
    pub bias_gyro: [f64; 3],
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GnssSimConfig {
    /// Hz
    pub rate: f64,
    /// ENU standard deviations, m.
    pub sigma: [f64; 3],
    /// Fraction of grid epochs with a fix; `1.0` disables outages.
    #[serde(default = "one")]
    pub availability: f64,
    /// Outage burst length range, s.
    #[serde(default = "default_bursts")]
    pub burst_range: (f64, f64),
    /// Initial outage-free period, s.
    #[serde(default)]
    pub clear_start: f64,
}

fn one() -> f64 {
    1.0
}
fn default_bursts() -> (f64, f64) {
    (5.0, 30.0)
}

/// Everything needed to synthesize a dataset.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Scenario {
    pub name: String,
    pub trajectory: TrajectorySpec,
    pub imu: ImuSimConfig,
    pub gnss: GnssSimConfig,
    #[serde(default)]
    pub anchor: Anchor,
}

/// Synthetic streams of one scenario run.
#[derive(Debug, Clone, PartialEq)]
pub struct SimulatedData {
    pub gt: GroundTruth,
    pub imu: Vec<ImuSample>,
    pub gnss: Vec<GnssFix>,
    pub outages: OutagePattern,
    pub imu_params: ImuNoiseParams,
    pub anchor: Anchor,
}

const BUILTIN: &[(&str, &str)] = &[
    ("urban", include_str!("../scenarios/urban.json")),
    ("short60", include_str!("../scenarios/short60.json")),
];

impl Scenario {
    pub fn builtin_names() -> Vec<&'static str> {
        BUILTIN.iter().map(|(n, _)| *n).collect()
    }

    pub fn builtin(name: &str) -> Result<Self, SimError> {
        let (_, text) = BUILTIN
            .iter()
            .find(|(n, _)| *n == name)
            .ok_or_else(|| SimError::UnknownScenario(name.to_string()))?;
        Ok(serde_json::from_str(text)?)
    }

    /// A built-in scenario name or a path to a scenario JSON file.
    pub fn load(name_or_path: &str) -> Result<Self, SimError> {
        if BUILTIN.iter().any(|(n, _)| *n == name_or_path) {
            return Self::builtin(name_or_path);
        }
        let path = Path::new(name_or_path);
        if !path.exists() {
            return Err(SimError::UnknownScenario(name_or_path.to_string()));
        }
        Ok(serde_json::from_str(&std::fs::read_to_string(path)?)?)
    }

    pub fn simulate(&self, seed: u64) -> Result<SimulatedData, SimError> {
        let gt = generate_trajectory(&self.trajectory)?;
        let bias = ImuBias::new(Vector3::from(self.imu.bias_acc), Vector3::from(self.imu.bias_gyro));
        // Independent streams per generator.
        let mut seeds = ChaCha8Rng::seed_from_u64(seed);
        let (imu_seed, gnss_seed, outage_seed) = (seeds.random(), seeds.random(), seeds.random());
        let imu = simulate_imu(&gt, &self.imu.params, &bias, self.imu.rate, imu_seed)?;
        let g = &self.gnss;
        let outages = if g.availability < 1.0 {
            OutagePattern::generate(
                gt.start_time(),
                gt.end_time(),
                g.rate,
                g.availability,
                g.burst_range,
                g.clear_start,
                outage_seed,
            )?
        } else {
            OutagePattern::none()
        };
        let gnss = simulate_gnss(&gt, &Vector3::from(g.sigma), &outages, g.rate, gnss_seed)?;
        Ok(SimulatedData {
            gt,
            imu,
            gnss,
            outages,
            imu_params: self.imu.params,
            anchor: self.anchor,
        })
    }
}
