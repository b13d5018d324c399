//! Levenberg–Marquardt over the navigation manifold, sparse normal-equation
//! solves and fixed-lag marginalization.
//!
//! The normal equations are stored in skyline (variable band) form with the
//! variables ordered chronologically. For the chain-structured graphs built
//! by the engine this keeps the Cholesky factor inside a narrow band.

use std::collections::{BTreeMap, BTreeSet};
use std::ops::AddAssign;

use nalgebra::{DMatrix, DVector, SymmetricEigen};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::graph::{
    EpochIndex, Factor, FactorGraph, FactorId, GraphError, LinearSystem, MarginalPriorFactor, Ordering, VariableKey,
    VariableKind, Values,
};
use crate::state::NavState;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum SolverError {
    #[error("graph has no prior; the problem is not gauge fixed")]
    NotGaugeFixed,
    #[error("normal equations could not be factorized")]
    LinearSolveFailure,
    #[error("marginalization would leave the graph empty")]
    EmptyGraphAfterMarginalization,
    #[error(transparent)]
    Graph(#[from] GraphError),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SolverConfig {
    pub max_iterations: usize,
    pub cost_rel_tol: f64,
    pub delta_norm_tol: f64,
    pub lm_initial_lambda: f64,
    pub lm_lambda_factor: f64,
}

impl Default for SolverConfig {
    fn default() -> Self {
        Self {
            max_iterations: 20,
            cost_rel_tol: 1e-6,
            delta_norm_tol: 1e-8,
            lm_initial_lambda: 1e-4,
            lm_lambda_factor: 10.0,
        }
    }
}

impl SolverConfig {
    pub fn validate(&self) -> Result<(), String> {
        let ok = self.max_iterations > 0
            && self.cost_rel_tol > 0.0
            && self.delta_norm_tol > 0.0
            && self.lm_initial_lambda > 0.0
            && self.lm_lambda_factor > 1.0;
        if ok {
            Ok(())
        } else {
            Err("solver settings must be positive (and the lambda factor > 1)".into())
        }
    }
}

/// Lower triangle of a symmetric matrix in skyline storage: row `i` holds
/// columns `first[i]..=i` contiguously.
#[derive(Debug, Clone, PartialEq)]
pub struct SkylineMatrix {
    first: Vec<usize>,
    start: Vec<usize>,
    data: Vec<f64>,
}

impl SkylineMatrix {
    pub fn with_profile(first: Vec<usize>) -> Self {
        let mut start = Vec::with_capacity(first.len() + 1);
        let mut len = 0;
        for (i, &f) in first.iter().enumerate() {
            assert!(f <= i, "profile must stay in the lower triangle");
            start.push(len);
            len += i - f + 1;
        }
        start.push(len);
        Self {
            first,
            start,
            data: vec![0.0; len],
        }
    }

    pub fn dim(&self) -> usize {
        self.first.len()
    }

    /// Number of stored entries.
    pub fn stored(&self) -> usize {
        self.data.len()
    }

    #[inline]
    fn row(&self, i: usize) -> &[f64] {
        &self.data[self.start[i]..self.start[i + 1]]
    }

    /// Entry `(i, j)` of the symmetric matrix.
    pub fn get(&self, i: usize, j: usize) -> f64 {
        let (i, j) = if i >= j { (i, j) } else { (j, i) };
        if j < self.first[i] {
            0.0
        } else {
            self.data[self.start[i] + j - self.first[i]]
        }
    }

    /// Adds to the lower-triangle entry `(i, j)`, `j ≤ i`.
    #[inline]
    pub fn add(&mut self, i: usize, j: usize, v: f64) {
        debug_assert!(j <= i && j >= self.first[i]);
        self.data[self.start[i] + j - self.first[i]] += v;
    }

    pub fn diagonal(&self) -> DVector<f64> {
        DVector::from_fn(self.dim(), |i, _| self.data[self.start[i + 1] - 1])
    }

    pub fn add_diagonal(&mut self, d: &DVector<f64>) {
        for i in 0..self.dim() {
            self.data[self.start[i + 1] - 1] += d[i];
        }
    }

    pub fn mul_vec(&self, x: &DVector<f64>) -> DVector<f64> {
        let mut y = DVector::zeros(self.dim());
        for i in 0..self.dim() {
            let f = self.first[i];
            for (k, &a) in self.row(i).iter().enumerate() {
                let j = f + k;
                y[i] += a * x[j];
                if j != i {
                    y[j] += a * x[i];
                }
            }
        }
        y
    }

    pub fn to_dense(&self) -> DMatrix<f64> {
        DMatrix::from_fn(self.dim(), self.dim(), |i, j| self.get(i, j))
    }

    /// In-profile Cholesky factor `L` with `LLᵀ = self`.
    pub fn cholesky(&self) -> Option<SkylineMatrix> {
        let n = self.dim();
        let mut l = SkylineMatrix {
            first: self.first.clone(),
            start: self.start.clone(),
            data: vec![0.0; self.data.len()],
        };
        for i in 0..n {
            let fi = self.first[i];
            for j in fi..=i {
                let fj = self.first[j];
                let k0 = fi.max(fj);
                let ri = &l.data[l.start[i] + (k0 - fi)..l.start[i] + (j - fi)];
                let rj = &l.data[l.start[j] + (k0 - fj)..l.start[j] + (j - fj)];
                let dot: f64 = ri.iter().zip(rj).map(|(a, b)| a * b).sum();
                let s = self.data[self.start[i] + j - fi] - dot;
                if j == i {
                    if !(s > 0.0) || !s.is_finite() {
                        return None;
                    }
                    l.data[l.start[i] + j - fi] = s.sqrt();
                } else {
                    let djj = l.data[l.start[j + 1] - 1];
                    l.data[l.start[i] + j - fi] = s / djj;
                }
            }
        }
        Some(l)
    }

    /// Solves `LLᵀx = b` where `self` is a factor from [`Self::cholesky`].
    pub fn cholesky_solve(&self, b: &DVector<f64>) -> DVector<f64> {
        let n = self.dim();
        let mut y = b.clone();
        for i in 0..n {
            let f = self.first[i];
            let row = self.row(i);
            let mut s = y[i];
            for (k, &a) in row[..row.len() - 1].iter().enumerate() {
                s -= a * y[f + k];
            }
            y[i] = s / row[row.len() - 1];
        }
        for i in (0..n).rev() {
            let f = self.first[i];
            let row = self.row(i);
            y[i] /= row[row.len() - 1];
            let yi = y[i];
            for (k, &a) in row[..row.len() - 1].iter().enumerate() {
                y[f + k] -= a * yi;
            }
        }
        y
    }
}

/// `H = JᵀJ` and `g = Jᵀr` of a linearized graph.
#[derive(Debug, Clone)]
pub struct NormalEquations {
    pub hessian: SkylineMatrix,
    pub gradient: DVector<f64>,
}

impl NormalEquations {
    pub fn assemble(system: &LinearSystem) -> Self {
        let ordering = &system.ordering;
        let n = ordering.dim();
        let mut first: Vec<usize> = (0..n).collect();
        let mut placed: Vec<Vec<(usize, usize)>> = Vec::with_capacity(system.factors.len());
        for f in &system.factors {
            let cols: Vec<(usize, usize)> = f
                .blocks
                .iter()
                .enumerate()
                .filter_map(|(b, (key, _))| ordering.column(key).map(|c| (b, c)))
                .collect();
            if let Some(min_col) = cols.iter().map(|(_, c)| *c).min() {
                for (b, c) in &cols {
                    for row in *c..*c + f.blocks[*b].0.kind.dim() {
                        first[row] = first[row].min(min_col);
                    }
                }
            }
            placed.push(cols);
        }

        let mut hessian = SkylineMatrix::with_profile(first);
        let mut gradient = DVector::zeros(n);
        for (f, cols) in system.factors.iter().zip(&placed) {
            // One Gram product per factor over its stacked blocks.
            let spans: Vec<(usize, usize, usize)> = cols
                .iter()
                .scan(0, |offset, &(b, c)| {
                    let w = f.blocks[b].1.ncols();
                    *offset += w;
                    Some((*offset - w, c, w))
                })
                .collect();
            let width = spans.last().map_or(0, |(o, _, w)| o + w);
            let mut jf = DMatrix::zeros(f.residual.len(), width);
            for (&(b, _), &(o, _, w)) in cols.iter().zip(&spans) {
                jf.columns_mut(o, w).copy_from(&f.blocks[b].1);
            }
            let hf = jf.tr_mul(&jf);
            let gf = jf.tr_mul(&f.residual);
            for &(oa, ca, wa) in &spans {
                gradient.rows_mut(ca, wa).add_assign(&gf.rows(oa, wa));
                for &(ob, cb, wb) in &spans {
                    if cb > ca {
                        continue;
                    }
                    for r in 0..wa {
                        for c in 0..wb {
                            let (i, j) = (ca + r, cb + c);
                            if j <= i {
                                hessian.add(i, j, hf[(oa + r, ob + c)]);
                            }
                        }
                    }
                }
            }
        }
        Self { hessian, gradient }
    }

    /// Solves `(H + λ·diag(H)) δ = −g`.
    pub fn solve(&self, lambda: f64) -> Result<DVector<f64>, SolverError> {
        let mut h = self.hessian.clone();
        if lambda > 0.0 {
            h.add_diagonal(&(self.hessian.diagonal() * lambda));
        }
        let l = h.cholesky().ok_or(SolverError::LinearSolveFailure)?;
        let delta = l.cholesky_solve(&(-&self.gradient));
        if delta.iter().all(|x| x.is_finite()) {
            Ok(delta)
        } else {
            Err(SolverError::LinearSolveFailure)
        }
    }
}

/// One damped Gauss–Newton step on a linearized system.
pub fn solve_normal_equations(system: &LinearSystem, lambda: f64) -> Result<DVector<f64>, SolverError> {
    NormalEquations::assemble(system).solve(lambda)
}

#[derive(Debug, Clone)]
pub struct OptimizeResult {
    pub values: Values,
    pub cost: f64,
    pub initial_cost: f64,
    pub iterations: usize,
    pub converged: bool,
    /// Cost after every accepted step, starting with the initial cost.
    pub cost_history: Vec<f64>,
    /// Damping in force when the iteration stopped.
    pub final_lambda: f64,
}

const MAX_LAMBDA: f64 = 1e12;
const MIN_LAMBDA: f64 = 1e-15;
const UNDAMPED_LAMBDA: f64 = 1e-12;

/// Relative size below which cost differences are floating-point noise.
const COST_RESOLUTION: f64 = 1e-10;
const MAX_REFINE_STEPS: usize = 6;

/// Refined estimates if the undamped model predicts less than the relative
/// tolerance left to gain, `None` otherwise.
fn stationary(
    graph: &FactorGraph,
    values: &Values,
    cost: f64,
    ordering: &Ordering,
    normal: &NormalEquations,
    config: &SolverConfig,
) -> Result<Option<(Values, f64)>, SolverError> {
    let Ok(step) = normal.solve(UNDAMPED_LAMBDA) else {
        return Ok(Some((values.clone(), cost)));
    };
    let remaining = -normal.gradient.dot(&step);
    if remaining >= config.cost_rel_tol * cost {
        return Ok(None);
    }
    refine(graph, values.clone(), cost, ordering, step, remaining, config).map(Some)
}

/// Newton refinement once the damped iteration has converged. Undamped steps
/// converge quadratically here; once the predicted change drops below the
/// cost's own resolution the cost can no longer arbitrate, and steps are
/// accepted on stationarity alone until the step itself is negligible.
fn refine(
    graph: &FactorGraph,
    mut values: Values,
    mut cost: f64,
    ordering: &Ordering,
    mut step: DVector<f64>,
    mut remaining: f64,
    config: &SolverConfig,
) -> Result<(Values, f64), SolverError> {
    let mut ordering = ordering.clone();
    for _ in 0..MAX_REFINE_STEPS {
        let negligible = remaining <= COST_RESOLUTION * cost;
        let candidate = values.retract(&ordering, &step);
        let new_cost = graph.total_cost(&candidate)?;
        let within_resolution = negligible && new_cost <= cost * (1.0 + COST_RESOLUTION);
        if !(new_cost <= cost || within_resolution) {
            break;
        }
        values = candidate;
        cost = new_cost;
        if step.norm() < config.delta_norm_tol {
            break;
        }
        let system = graph.linearize(&values)?;
        let normal = NormalEquations::assemble(&system);
        let Ok(next) = normal.solve(UNDAMPED_LAMBDA) else { break };
        remaining = -normal.gradient.dot(&next);
        step = next;
        ordering = system.ordering;
    }
    Ok((values, cost))
}

/// Minimizes the graph cost starting from `initial`.
pub fn optimize(graph: &FactorGraph, initial: &Values, config: &SolverConfig) -> Result<OptimizeResult, SolverError> {
    optimize_with_lambda(graph, initial, config, config.lm_initial_lambda)
}

/// [`optimize`] starting from damping `lambda` instead of the configured
/// initial value; incremental callers pass the damping a previous solve ended
/// with.
pub fn optimize_with_lambda(
    graph: &FactorGraph,
    initial: &Values,
    config: &SolverConfig,
    lambda: f64,
) -> Result<OptimizeResult, SolverError> {
    if !graph.is_gauge_fixed() {
        return Err(SolverError::NotGaugeFixed);
    }
    let mut values = initial.clone();
    let mut cost = graph.total_cost(&values)?;
    let initial_cost = cost;
    let mut history = vec![cost];
    let mut lambda = lambda.clamp(MIN_LAMBDA, MAX_LAMBDA);
    let mut converged = false;
    let mut iterations = 0;
    let mut check_decrement = false;

    'outer: while iterations < config.max_iterations {
        iterations += 1;
        let system = graph.linearize(&values)?;
        let normal = NormalEquations::assemble(&system);
        // A heavily damped step can stall along weakly constrained
        // directions, so a small decrease only counts as convergence when the
        // undamped model agrees that little is left to gain.
        if std::mem::take(&mut check_decrement) {
            if let Some(done) = stationary(graph, &values, cost, &system.ordering, &normal, config)? {
                (values, cost) = done;
                converged = true;
                break;
            }
        }
        loop {
            let delta = match normal.solve(lambda) {
                Ok(d) => d,
                Err(e) => {
                    lambda *= config.lm_lambda_factor;
                    if lambda > MAX_LAMBDA {
                        return Err(e);
                    }
                    continue;
                }
            };
            if delta.norm() < config.delta_norm_tol {
                if lambda <= UNDAMPED_LAMBDA {
                    converged = true;
                    break 'outer;
                }
                if let Some(done) = stationary(graph, &values, cost, &system.ordering, &normal, config)? {
                    (values, cost) = done;
                    converged = true;
                    break 'outer;
                }
                lambda = (lambda / config.lm_lambda_factor).max(UNDAMPED_LAMBDA);
                continue;
            }
            let candidate = values.retract(&system.ordering, &delta);
            let new_cost = graph.total_cost(&candidate)?;
            if new_cost.is_finite() && new_cost <= cost {
                debug_assert!(new_cost <= cost);
                let rel = if cost > f64::MIN_POSITIVE {
                    (cost - new_cost) / cost
                } else {
                    0.0
                };
                values = candidate;
                cost = new_cost;
                history.push(cost);
                lambda = (lambda / config.lm_lambda_factor).max(MIN_LAMBDA);
                check_decrement = rel < config.cost_rel_tol;
                break;
            }
            lambda *= config.lm_lambda_factor;
            if lambda > MAX_LAMBDA {
                // No descent direction left at machine precision.
                converged = true;
                break 'outer;
            }
        }
    }

    Ok(OptimizeResult {
        values,
        cost,
        initial_cost,
        iterations,
        converged,
        cost_history: history,
        final_lambda: lambda,
    })
}

/// Outcome of removing every epoch older than a cutoff.
#[derive(Debug, Clone, Default)]
pub struct MarginalizationResult {
    pub prior: Option<MarginalPriorFactor>,
    pub prior_id: Option<FactorId>,
    pub removed_keys: Vec<VariableKey>,
    pub removed_factors: Vec<FactorId>,
    /// Final estimates of the removed epochs.
    pub removed_estimates: Vec<(EpochIndex, NavState)>,
}

impl MarginalizationResult {
    pub fn is_noop(&self) -> bool {
        self.removed_keys.is_empty()
    }
}

/// Inverse of a symmetric positive semidefinite matrix, falling back to the
/// pseudo-inverse when Cholesky fails.
fn spd_inverse(m: &DMatrix<f64>) -> DMatrix<f64> {
    let sym = (m + m.transpose()) * 0.5;
    if let Some(ch) = sym.clone().cholesky() {
        return ch.inverse();
    }
    let eig = SymmetricEigen::new(sym);
    let max = eig.eigenvalues.iter().fold(0.0f64, |a, b| a.max(b.abs()));
    let inv = eig
        .eigenvalues
        .map(|l| if l > 1e-12 * max { 1.0 / l } else { 0.0 });
    &eig.eigenvectors * DMatrix::from_diagonal(&inv) * eig.eigenvectors.transpose()
}

/// Square-root form `(A, e)` of a quadratic `δᵀHδ + 2gᵀδ`.
fn sqrt_form(h: &DMatrix<f64>, g: &DVector<f64>) -> (DMatrix<f64>, DVector<f64>) {
    let eig = SymmetricEigen::new((h + h.transpose()) * 0.5);
    let max = eig.eigenvalues.iter().fold(0.0f64, |a, b| a.max(*b));
    let keep: Vec<usize> = (0..eig.eigenvalues.len())
        .filter(|&i| eig.eigenvalues[i] > 1e-12 * max && eig.eigenvalues[i] > 0.0)
        .collect();
    let n = h.nrows();
    let mut a = DMatrix::zeros(keep.len(), n);
    let mut e = DVector::zeros(keep.len());
    for (row, &i) in keep.iter().enumerate() {
        let s = eig.eigenvalues[i].sqrt();
        let v = eig.eigenvectors.column(i);
        a.row_mut(row).copy_from(&(v.transpose() * s));
        e[row] = v.dot(g) / s;
    }
    (a, e)
}

/// Removes every epoch whose timestamp is older than `cutoff_time`,
/// replacing the factors that touched it with one linear prior on the
/// remaining neighbours, frozen at the current estimates.
pub fn marginalize(
    graph: &mut FactorGraph,
    values: &mut Values,
    cutoff_time: f64,
) -> Result<MarginalizationResult, SolverError> {
    let epochs = graph.epochs();
    let mut removed_epochs = BTreeSet::new();
    for &e in &epochs {
        let state = values.get(e).ok_or(GraphError::MissingEstimate(e))?;
        if state.t < cutoff_time {
            removed_epochs.insert(e);
        }
    }
    if removed_epochs.is_empty() {
        return Ok(MarginalizationResult::default());
    }
    if removed_epochs.len() == epochs.len() {
        return Err(SolverError::EmptyGraphAfterMarginalization);
    }

    let removed_keys: Vec<VariableKey> = graph
        .variables()
        .filter(|k| removed_epochs.contains(&k.epoch))
        .copied()
        .collect();
    let involved: Vec<(FactorId, Factor)> = graph
        .factors()
        .filter(|(_, f)| f.keys().iter().any(|k| removed_epochs.contains(&k.epoch)))
        .map(|(id, f)| (id, f.clone()))
        .collect();
    let boundary: BTreeSet<EpochIndex> = involved
        .iter()
        .flat_map(|(_, f)| f.epochs())
        .filter(|e| !removed_epochs.contains(e))
        .collect();

    // Local ordering: removed keys first, then full boundary epochs.
    let mut column: BTreeMap<VariableKey, usize> = BTreeMap::new();
    let mut m = 0;
    for k in &removed_keys {
        column.insert(*k, m);
        m += k.kind.dim();
    }
    for (bi, &e) in boundary.iter().enumerate() {
        for kind in VariableKind::ALL {
            column.insert(VariableKey::new(e, kind), m + 15 * bi + kind.offset());
        }
    }
    let b = 15 * boundary.len();
    let n = m + b;
    let mut h = DMatrix::zeros(n, n);
    let mut g = DVector::zeros(n);
    for (_, f) in &involved {
        let lin = f.linearize(values)?;
        for (ka, ja) in &lin.blocks {
            let ca = column[ka];
            let mut gv = g.rows_mut(ca, ja.ncols());
            gv += ja.transpose() * &lin.residual;
            for (kb, jb) in &lin.blocks {
                let cb = column[kb];
                let mut hv = h.view_mut((ca, cb), (ja.ncols(), jb.ncols()));
                hv += ja.transpose() * jb;
            }
        }
    }

    let mut result = MarginalizationResult {
        removed_keys: removed_keys.clone(),
        removed_factors: involved.iter().map(|(id, _)| *id).collect(),
        ..Default::default()
    };

    if b > 0 {
        let h_mm = h.view((0, 0), (m, m)).into_owned();
        let h_bm = h.view((m, 0), (b, m)).into_owned();
        let h_bb = h.view((m, m), (b, b)).into_owned();
        let g_m = g.rows(0, m).into_owned();
        let g_b = g.rows(m, b).into_owned();
        let h_mm_inv = spd_inverse(&h_mm);
        let k = &h_bm * &h_mm_inv;
        let h_schur = &h_bb - &k * h_bm.transpose();
        let g_schur = &g_b - &k * g_m;
        let (a, e) = sqrt_form(&h_schur, &g_schur);
        let lin_points: Vec<NavState> = boundary
            .iter()
            .map(|e| values.get(*e).cloned().ok_or(GraphError::MissingEstimate(*e)))
            .collect::<Result<_, _>>()?;
        let prior = MarginalPriorFactor::new(boundary.iter().copied().collect(), lin_points, a, e)?;
        result.prior = Some(prior);
    }

    for (id, _) in &involved {
        graph.remove_factor(*id);
    }
    for k in &removed_keys {
        graph.remove_variable(k);
    }
    for e in &removed_epochs {
        if let Some(s) = values.remove(*e) {
            result.removed_estimates.push((*e, s));
        }
    }
    if let Some(prior) = &result.prior {
        if prior.residual.len() > 0 {
            result.prior_id = Some(graph.add_factor(prior.clone())?);
        }
    }
    Ok(result)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::graph::{GnssFactor, PriorFactor};
    use approx::assert_relative_eq;
    use nalgebra::{Matrix3, Vector3};

    #[test]
    fn skyline_cholesky_matches_dense() {
        // Banded SPD matrix with a ragged profile.
        let n = 12;
        let first: Vec<usize> = (0..n).map(|i: usize| i.saturating_sub(1 + i % 3)).collect();
        let mut s = SkylineMatrix::with_profile(first.clone());
        for i in 0..n {
            for j in first[i]..=i {
                let v = if i == j { 10.0 + i as f64 } else { 1.0 / (1.0 + (i + j) as f64) };
                s.add(i, j, v);
            }
        }
        let dense = s.to_dense();
        let b = DVector::from_fn(n, |i, _| (i as f64).sin());
        let x = s.cholesky().unwrap().cholesky_solve(&b);
        let expected = dense.clone().cholesky().unwrap().solve(&b);
        assert!((x - expected).norm() < 1e-12);
        assert!((s.mul_vec(&b) - &dense * &b).norm() < 1e-12);
    }

    #[test]
    fn identity_system_step() {
        let mut g = FactorGraph::new();
        g.add_variable(VariableKey::pose(0), &NavState::default()).unwrap();
        g.add_factor(GnssFactor::new(0, Vector3::new(-1.0, 0.0, 0.0), Matrix3::identity()).unwrap())
            .unwrap();
        let values: Values = [(0, NavState::default())].into_iter().collect();
        let sys = g.linearize(&values).unwrap();
        // r = p − z = e₁ on the position block.
        let delta = solve_normal_equations(&sys, 0.0);
        // Attitude columns are unconstrained, so the system is singular.
        assert_eq!(delta, Err(SolverError::LinearSolveFailure));
    }

    #[test]
    fn prior_only_converges_immediately() {
        let mut g = FactorGraph::new();
        let mean = NavState::default();
        g.add_epoch(0, &mean).unwrap();
        g.add_factor(PriorFactor::full(0, mean.clone(), DMatrix::identity(15, 15)).unwrap())
            .unwrap();
        let values: Values = [(0, mean)].into_iter().collect();
        let res = optimize(&g, &values, &SolverConfig::default()).unwrap();
        assert_eq!(res.iterations, 1);
        assert!(res.converged);
        assert_eq!(res.cost, 0.0);
    }

    #[test]
    fn prior_and_gnss_meet_in_the_middle() {
        let mut g = FactorGraph::new();
        let mean = NavState::default();
        g.add_variable(VariableKey::pose(0), &mean).unwrap();
        g.add_factor(PriorFactor::new(0, &[VariableKind::Pose], mean.clone(), DMatrix::identity(6, 6)).unwrap())
            .unwrap();
        g.add_factor(GnssFactor::new(0, Vector3::new(2.0, 0.0, 0.0), Matrix3::identity()).unwrap())
            .unwrap();
        let values: Values = [(0, mean)].into_iter().collect();
        let res = optimize(&g, &values, &SolverConfig::default()).unwrap();
        assert!(res.converged);
        assert_relative_eq!(res.cost, 2.0, epsilon = 1e-9);
        assert_relative_eq!(res.values.get(0).unwrap().p.x, 1.0, epsilon = 1e-6);
        assert!(res.cost_history.windows(2).all(|w| w[1] <= w[0]));
    }

    #[test]
    fn missing_prior_is_reported() {
        let mut g = FactorGraph::new();
        g.add_variable(VariableKey::pose(0), &NavState::default()).unwrap();
        g.add_factor(GnssFactor::new(0, Vector3::zeros(), Matrix3::identity()).unwrap())
            .unwrap();
        let values: Values = [(0, NavState::default())].into_iter().collect();
        assert_eq!(
            optimize(&g, &values, &SolverConfig::default()).err(),
            Some(SolverError::NotGaugeFixed)
        );
    }

    #[test]
    fn cutoff_before_first_epoch_is_noop() {
        let mut g = FactorGraph::new();
        let s = NavState { t: 5.0, ..NavState::default() };
        g.add_epoch(0, &s).unwrap();
        g.add_factor(PriorFactor::full(0, s.clone(), DMatrix::identity(15, 15)).unwrap())
            .unwrap();
        let mut values: Values = [(0, s)].into_iter().collect();
        let res = marginalize(&mut g, &mut values, 1.0).unwrap();
        assert!(res.is_noop());
        assert!(res.removed_factors.is_empty());
        assert_eq!(g.variable_count(), 3);
        assert_eq!(
            marginalize(&mut g, &mut values, 10.0).err(),
            Some(SolverError::EmptyGraphAfterMarginalization)
        );
    }
}
