#![allow(dead_code)]

use nalgebra::{DMatrix, DVector, Matrix3, Vector3};
use rtfgo::graph::{BiasWalkFactor, GnssFactor, MarginalPriorFactor, PriorFactor, VariableKind};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use rtfgo::graph::{Factor, FactorGraph, Ordering, Values};
use rtfgo::lie::so3_exp;
use rtfgo::preintegration::PreintegratedImu;
use rtfgo::{ImuBias, ImuNoiseParams, ImuSample, NavState};

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn gaussian3(rng: &mut impl Rng, sigma: f64) -> Vector3<f64> {
    Vector3::from_fn(|_, _| rng.sample::<f64, _>(StandardNormal) * sigma)
}

/// Arbitrary state with attitude spread over the whole rotation group.
pub fn random_state(rng: &mut impl Rng, t: f64) -> NavState {
    let axis = gaussian3(rng, 1.0).normalize();
    let angle = rng.random_range(-3.0..3.0);
    NavState {
        t,
        rot: so3_exp(&(axis * angle)),
        p: gaussian3(rng, 50.0),
        v: gaussian3(rng, 5.0),
        bias: ImuBias::new(gaussian3(rng, 0.1), gaussian3(rng, 0.01)),
    }
}

/// Random SPD matrix with eigenvalues spread over two decades.
pub fn random_spd(rng: &mut impl Rng, n: usize, scale: f64) -> DMatrix<f64> {
    let a = DMatrix::from_fn(n, n, |_, _| rng.sample::<f64, _>(StandardNormal));
    let q = a.qr().q();
    let d = DVector::from_fn(n, |_, _| scale * 10f64.powf(rng.random_range(-1.0..1.0)));
    &q * DMatrix::from_diagonal(&d) * q.transpose()
}

/// Preintegrates `n` random samples at `rate` Hz around `lin_bias`.
pub fn random_preintegration(rng: &mut impl Rng, n: usize, rate: f64, lin_bias: ImuBias) -> PreintegratedImu {
    let params = ImuNoiseParams::default();
    let mut pim = PreintegratedImu::new(lin_bias);
    let mut acc = gaussian3(rng, 2.0) + Vector3::new(0.0, 0.0, 9.8);
    let mut gyro = gaussian3(rng, 0.3);
    for k in 0..n {
        acc += gaussian3(rng, 0.2);
        gyro += gaussian3(rng, 0.02);
        let sample = ImuSample::new(k as f64 / rate, acc, gyro);
        pim.integrate(&sample, 1.0 / rate, &params).unwrap();
    }
    pim
}

pub fn gravity() -> Vector3<f64> {
    Vector3::new(0.0, 0.0, -9.80665)
}

pub fn diag3(sigma: f64) -> Matrix3<f64> {
    Matrix3::identity() * sigma * sigma
}

/// Unwhitened Jacobian of a factor laid out by `ordering`.
pub fn analytic_jacobian(factor: &Factor, values: &Values, ordering: &Ordering) -> DMatrix<f64> {
    let (r, blocks) = factor.unwhitened(values).unwrap();
    let mut j = DMatrix::zeros(r.len(), ordering.dim());
    for (key, block) in blocks {
        let col = ordering.column(&key).unwrap();
        j.view_mut((0, col), block.shape()).copy_from(&block);
    }
    j
}

/// Central-difference Jacobian of the unwhitened residual.
pub fn numeric_jacobian(factor: &Factor, values: &Values, ordering: &Ordering, step: f64) -> DMatrix<f64> {
    let rows = factor.unwhitened(values).unwrap().0.len();
    let mut j = DMatrix::zeros(rows, ordering.dim());
    for c in 0..ordering.dim() {
        let mut d = DVector::zeros(ordering.dim());
        d[c] = step;
        let plus = factor.unwhitened(&values.retract(ordering, &d)).unwrap().0;
        let minus = factor.unwhitened(&values.retract(ordering, &(-d))).unwrap().0;
        j.set_column(c, &((plus - minus) / (2.0 * step)));
    }
    j
}

/// Reference solver: Levenberg–Marquardt on dense normal equations with
/// identity damping, then Gauss–Newton steps solved by QR on the Jacobian
/// until the step reaches its roundoff floor. The cost alone cannot resolve
/// the optimum of these ill-conditioned problems to micrometres; the
/// stationarity of the QR step can.
pub fn dense_map(graph: &FactorGraph, initial: &Values) -> Values {
    let mut values = initial.clone();
    let mut cost = graph.total_cost(&values).unwrap();
    let mut lambda = 1e-6;
    for _ in 0..500 {
        let system = graph.linearize(&values).unwrap();
        let (j, r) = system.to_dense();
        let h = j.transpose() * &j;
        let g = j.transpose() * &r;
        let n = h.nrows();
        let damped = &h + DMatrix::<f64>::identity(n, n) * lambda;
        let delta = -damped.lu().solve(&g).unwrap();
        let candidate = values.retract(&system.ordering, &delta);
        let new_cost = graph.total_cost(&candidate).unwrap();
        if new_cost <= cost {
            let done = delta.amax() < 1e-13 || cost - new_cost <= 1e-15 * cost;
            values = candidate;
            cost = new_cost;
            lambda = (lambda * 0.1).max(1e-14);
            if done {
                break;
            }
        } else {
            lambda *= 10.0;
            if lambda > 1e10 {
                break;
            }
        }
    }
    for _ in 0..20 {
        let system = graph.linearize(&values).unwrap();
        let (j, r) = system.to_dense();
        let qr = j.qr();
        let rhs = qr.q().transpose() * r;
        let delta = -qr.r().solve_upper_triangular(&rhs).unwrap();
        values = values.retract(&system.ordering, &delta);
        // Steps settle at a roundoff floor near 1e-10.
        if delta.amax() < 1e-9 {
            break;
        }
    }
    values
}

/// Batch-mode engine fed with the first `fixes` GNSS epochs of a built-in
/// scenario; returns its graph and current estimates.
pub fn batch_problem(scenario: &str, seed: u64, fixes: usize) -> (FactorGraph, Values) {
    let data = rtfgo::sim::Scenario::builtin(scenario).unwrap().simulate(seed).unwrap();
    let config = rtfgo::EngineConfig {
        imu_noise: data.imu_params,
        ..Default::default()
    }
    .batch();
    let mut engine = rtfgo::Engine::new(config).unwrap();
    let (mut i, mut g) = (0, 0);
    while g < fixes.min(data.gnss.len()) {
        if i < data.imu.len() && data.imu[i].t < data.gnss[g].t {
            engine.push_imu(data.imu[i]).unwrap();
            i += 1;
        } else {
            engine.push_gnss(data.gnss[g]).unwrap();
            g += 1;
        }
    }
    (engine.graph().clone(), engine.values().clone())
}

/// Applies the same random tangent offset size to every variable.
pub fn jitter(values: &Values, rng: &mut impl Rng, scale: f64) -> Values {
    let keys: Vec<rtfgo::graph::VariableKey> = values
        .epochs()
        .flat_map(|e| rtfgo::graph::VariableKind::ALL.map(|k| rtfgo::graph::VariableKey::new(e, k)))
        .collect();
    let ordering = Ordering::new(&keys);
    let d = DVector::from_fn(ordering.dim(), |i, _| {
        let s = if i % 15 < 3 { 0.01 } else if i % 15 >= 9 { 1e-3 } else { 1.0 };
        rng.random_range(-scale..scale) * s
    });
    values.retract(&ordering, &d)
}

pub fn state(t: f64, p: Vector3<f64>) -> NavState {
    NavState { t, p, ..Default::default() }
}

/// Chain whose factors are linear in every coordinate that moves: rotations
/// sit at their prior means and no factor pulls them away.
pub fn linear_chain(n: usize, seed: u64) -> (FactorGraph, Values) {
    let mut rng = rng(seed);
    let mut graph = FactorGraph::new();
    let mut values = Values::new();
    for k in 0..n as u64 {
        let x = state(k as f64, gaussian3(&mut rng, 10.0));
        graph.add_epoch(k, &x).unwrap();
        values.insert(k, x.clone());
        let kinds = if k == 0 { VariableKind::ALL.to_vec() } else { vec![VariableKind::Pose] };
        let dim = kinds.iter().map(|k| k.dim()).sum();
        let mut cov = DMatrix::identity(dim, dim) * 1e-2;
        cov.view_mut((3, 3), (3, 3)).fill_with_identity();
        cov.view_mut((3, 3), (3, 3)).scale_mut(1e4);
        graph.add_factor(PriorFactor::new(k, &kinds, state(k as f64, Vector3::zeros()), cov).unwrap()).unwrap();
        graph.add_factor(GnssFactor::new(k, gaussian3(&mut rng, 5.0), diag3(3.0)).unwrap()).unwrap();
        if k > 0 {
            graph.add_factor(BiasWalkFactor::from_random_walk(k - 1, k, 1e-3, 1e-4, 1.0).unwrap()).unwrap();
            // Velocity tied to neighbouring positions through a linear prior.
            let a = DMatrix::from_fn(6, 30, |r, c| match (r, c) {
                (0..=2, _) if c == 3 + r => -1.0,
                (0..=2, _) if c == 18 + r => 1.0,
                (0..=2, _) if c == 6 + r => -1.0,
                (3..=5, _) if c == 21 + r - 3 => 1.0,
                (3..=5, _) if c == 6 + r - 3 => -1.0,
                _ => 0.0,
            });
            let lin = vec![values.get(k - 1).unwrap().clone(), x.clone()];
            let e = DVector::from_fn(6, |_, _| 0.1);
            graph.add_factor(MarginalPriorFactor::new(vec![k - 1, k], lin, a, e).unwrap()).unwrap();
        }
    }
    (graph, values)
}

