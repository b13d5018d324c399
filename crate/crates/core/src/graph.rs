//! Factor graph over per-epoch pose, velocity and bias variables.
//!
//! Every factor whitens its residual with the inverse Cholesky factor of its
//! covariance, so the graph cost is a plain sum of squares and the Jacobians
//! handed to the solver are already weighted.

use std::collections::{BTreeMap, BTreeSet};

use nalgebra::{DMatrix, DVector, Matrix3, Vector3};
use thiserror::Error;

use crate::lie::so3_right_jacobian_inv;
use crate::par::{self, Exec};
use crate::preintegration::PreintegratedImu;
use crate::state::NavState;

pub type EpochIndex = u64;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum GraphError {
    #[error("variable {0:?} already exists")]
    DuplicateKey(VariableKey),
    #[error("factor references unknown variable {0:?}")]
    UnknownKey(VariableKey),
    #[error("covariance is not positive definite")]
    NonPositiveDefinite,
    #[error("no estimate for epoch {0}")]
    MissingEstimate(EpochIndex),
    #[error("dimension mismatch: {0}")]
    Dimension(String),
}

/// The three variable nodes an epoch is split into.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum VariableKind {
    /// Attitude and position, `(δθ, δp)`.
    Pose,
    Velocity,
    /// `(δb_a, δb_g)`
    Bias,
}

impl VariableKind {
    pub const ALL: [VariableKind; 3] = [VariableKind::Pose, VariableKind::Velocity, VariableKind::Bias];

    pub const fn dim(self) -> usize {
        match self {
            VariableKind::Pose => 6,
            VariableKind::Velocity => 3,
            VariableKind::Bias => 6,
        }
    }

    /// Column offset inside the 15-dim epoch tangent space.
    pub const fn offset(self) -> usize {
        match self {
            VariableKind::Pose => 0,
            VariableKind::Velocity => 6,
            VariableKind::Bias => 9,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct VariableKey {
    pub epoch: EpochIndex,
    pub kind: VariableKind,
}

impl VariableKey {
    pub const fn new(epoch: EpochIndex, kind: VariableKind) -> Self {
        Self { epoch, kind }
    }
    pub const fn pose(epoch: EpochIndex) -> Self {
        Self::new(epoch, VariableKind::Pose)
    }
    pub const fn velocity(epoch: EpochIndex) -> Self {
        Self::new(epoch, VariableKind::Velocity)
    }
    pub const fn bias(epoch: EpochIndex) -> Self {
        Self::new(epoch, VariableKind::Bias)
    }
}

/// Current estimate of every epoch in a graph.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Values(BTreeMap<EpochIndex, NavState>);

impl Values {
    pub fn new() -> Self {
        Self::default()
    }
    pub fn get(&self, epoch: EpochIndex) -> Option<&NavState> {
        self.0.get(&epoch)
    }
    pub fn get_mut(&mut self, epoch: EpochIndex) -> Option<&mut NavState> {
        self.0.get_mut(&epoch)
    }
    pub fn insert(&mut self, epoch: EpochIndex, state: NavState) -> Option<NavState> {
        self.0.insert(epoch, state)
    }
    pub fn remove(&mut self, epoch: EpochIndex) -> Option<NavState> {
        self.0.remove(&epoch)
    }
    pub fn len(&self) -> usize {
        self.0.len()
    }
    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }
    pub fn iter(&self) -> impl Iterator<Item = (&EpochIndex, &NavState)> {
        self.0.iter()
    }
    pub fn epochs(&self) -> impl Iterator<Item = EpochIndex> + '_ {
        self.0.keys().copied()
    }
    pub fn last(&self) -> Option<(EpochIndex, &NavState)> {
        self.0.iter().next_back().map(|(k, v)| (*k, v))
    }
    fn require(&self, epoch: EpochIndex) -> Result<&NavState, GraphError> {
        self.get(epoch).ok_or(GraphError::MissingEstimate(epoch))
    }

    /// Applies a tangent update laid out by `ordering`.
    pub fn retract(&self, ordering: &Ordering, delta: &DVector<f64>) -> Values {
        let mut out = self.clone();
        for (key, col) in ordering.iter() {
            let Some(s) = out.0.get_mut(&key.epoch) else { continue };
            let d = delta.rows(col, key.kind.dim());
            match key.kind {
                VariableKind::Pose => {
                    s.rot = s.rot.plus(&Vector3::new(d[0], d[1], d[2]));
                    s.p += Vector3::new(d[3], d[4], d[5]);
                }
                VariableKind::Velocity => s.v += Vector3::new(d[0], d[1], d[2]),
                VariableKind::Bias => {
                    s.bias.acc += Vector3::new(d[0], d[1], d[2]);
                    s.bias.gyro += Vector3::new(d[3], d[4], d[5]);
                }
            }
        }
        out
    }
}

impl FromIterator<(EpochIndex, NavState)> for Values {
    fn from_iter<T: IntoIterator<Item = (EpochIndex, NavState)>>(iter: T) -> Self {
        Self(iter.into_iter().collect())
    }
}

/// Maps variables to contiguous column ranges, oldest epoch first.
#[derive(Debug, Clone, PartialEq)]
pub struct Ordering {
    columns: BTreeMap<VariableKey, usize>,
    dim: usize,
}

impl Ordering {
    pub fn new<'a>(keys: impl IntoIterator<Item = &'a VariableKey>) -> Self {
        let sorted: BTreeSet<VariableKey> = keys.into_iter().copied().collect();
        let mut columns = BTreeMap::new();
        let mut dim = 0;
        for key in sorted {
            columns.insert(key, dim);
            dim += key.kind.dim();
        }
        Self { columns, dim }
    }
    pub fn dim(&self) -> usize {
        self.dim
    }
    pub fn column(&self, key: &VariableKey) -> Option<usize> {
        self.columns.get(key).copied()
    }
    pub fn iter(&self) -> impl Iterator<Item = (VariableKey, usize)> + '_ {
        self.columns.iter().map(|(k, c)| (*k, *c))
    }
}

/// Lower-triangular `W = L⁻¹` (with `Σ = LLᵀ`), so that `WᵀW = Σ⁻¹`.
#[derive(Debug, Clone, PartialEq)]
pub struct Whitener(DMatrix<f64>);

impl Whitener {
    pub fn from_covariance(cov: &DMatrix<f64>) -> Result<Self, GraphError> {
        if !cov.is_square() {
            return Err(GraphError::Dimension("covariance must be square".into()));
        }
        if cov.iter().any(|x| !x.is_finite()) {
            return Err(GraphError::NonPositiveDefinite);
        }
        let sym = (cov + cov.transpose()) * 0.5;
        let chol = sym.cholesky().ok_or(GraphError::NonPositiveDefinite)?;
        let l = chol.l();
        let n = l.nrows();
        // Reject numerically singular covariances.
        let diag_max = (0..n).map(|i| l[(i, i)]).fold(0.0, f64::max);
        let diag_min = (0..n).map(|i| l[(i, i)]).fold(f64::INFINITY, f64::min);
        if !(diag_min > 1e-12 * diag_max.max(1e-300)) {
            return Err(GraphError::NonPositiveDefinite);
        }
        let l_inv = l
            .solve_lower_triangular(&DMatrix::identity(n, n))
            .ok_or(GraphError::NonPositiveDefinite)?;
        Ok(Self(l_inv))
    }

    /// Builds a whitener from an already whitened square-root information
    /// matrix.
    pub fn from_sqrt_information(sqrt_info: DMatrix<f64>) -> Self {
        Self(sqrt_info)
    }

    pub fn matrix(&self) -> &DMatrix<f64> {
        &self.0
    }
    pub fn dim(&self) -> usize {
        self.0.nrows()
    }
    pub fn whiten(&self, r: &DVector<f64>) -> DVector<f64> {
        &self.0 * r
    }
    pub fn whiten_matrix(&self, j: &DMatrix<f64>) -> DMatrix<f64> {
        &self.0 * j
    }
}

/// Whitened residual and per-variable Jacobian blocks of one factor.
#[derive(Debug, Clone, PartialEq)]
pub struct LinearizedFactor {
    pub residual: DVector<f64>,
    pub blocks: Vec<(VariableKey, DMatrix<f64>)>,
}

impl LinearizedFactor {
    pub fn cost(&self) -> f64 {
        self.residual.norm_squared()
    }
}

fn block3(m: &mut DMatrix<f64>, r: usize, c: usize, b: &Matrix3<f64>) {
    m.view_mut((r, c), (3, 3)).copy_from(b);
}

/// Gaussian prior on any subset of an epoch's variables.
#[derive(Debug, Clone, PartialEq)]
pub struct PriorFactor {
    pub epoch: EpochIndex,
    pub kinds: Vec<VariableKind>,
    pub mean: NavState,
    pub cov: DMatrix<f64>,
    whitener: Whitener,
}

impl PriorFactor {
    /// `cov` spans the concatenated local coordinates of `kinds` in
    /// `Pose, Velocity, Bias` order.
    pub fn new(
        epoch: EpochIndex,
        kinds: &[VariableKind],
        mean: NavState,
        cov: DMatrix<f64>,
    ) -> Result<Self, GraphError> {
        let mut kinds = kinds.to_vec();
        kinds.sort();
        kinds.dedup();
        let dim: usize = kinds.iter().map(|k| k.dim()).sum();
        if kinds.is_empty() || cov.nrows() != dim || cov.ncols() != dim {
            return Err(GraphError::Dimension(format!(
                "prior over {kinds:?} needs a {dim}×{dim} covariance"
            )));
        }
        let whitener = Whitener::from_covariance(&cov)?;
        Ok(Self {
            epoch,
            kinds,
            mean,
            cov,
            whitener,
        })
    }

    /// Prior over all three variables of the epoch.
    pub fn full(epoch: EpochIndex, mean: NavState, cov: DMatrix<f64>) -> Result<Self, GraphError> {
        Self::new(epoch, &VariableKind::ALL, mean, cov)
    }

    fn dim(&self) -> usize {
        self.whitener.dim()
    }

    fn raw(&self, values: &Values) -> Result<(DVector<f64>, Vec<(VariableKey, DMatrix<f64>)>), GraphError> {
        let x = values.require(self.epoch)?;
        let mut r = DVector::zeros(self.dim());
        let mut blocks = Vec::with_capacity(self.kinds.len());
        let mut row = 0;
        for kind in &self.kinds {
            let n = kind.dim();
            let mut j = DMatrix::zeros(self.dim(), n);
            match kind {
                VariableKind::Pose => {
                    let dtheta = self.mean.rot.minus(&x.rot);
                    r.fixed_rows_mut::<3>(row).copy_from(&dtheta);
                    r.fixed_rows_mut::<3>(row + 3).copy_from(&(x.p - self.mean.p));
                    block3(&mut j, row, 0, &so3_right_jacobian_inv(&dtheta));
                    block3(&mut j, row + 3, 3, &Matrix3::identity());
                }
                VariableKind::Velocity => {
                    r.fixed_rows_mut::<3>(row).copy_from(&(x.v - self.mean.v));
                    block3(&mut j, row, 0, &Matrix3::identity());
                }
                VariableKind::Bias => {
                    r.fixed_rows_mut::<3>(row).copy_from(&(x.bias.acc - self.mean.bias.acc));
                    r.fixed_rows_mut::<3>(row + 3).copy_from(&(x.bias.gyro - self.mean.bias.gyro));
                    block3(&mut j, row, 0, &Matrix3::identity());
                    block3(&mut j, row + 3, 3, &Matrix3::identity());
                }
            }
            blocks.push((VariableKey::new(self.epoch, *kind), j));
            row += n;
        }
        Ok((r, blocks))
    }
}

/// Preintegrated IMU constraint between consecutive epochs.
#[derive(Debug, Clone, PartialEq)]
pub struct ImuFactor {
    pub from: EpochIndex,
    pub to: EpochIndex,
    pub preint: PreintegratedImu,
    pub gravity: Vector3<f64>,
    whitener: Whitener,
}

impl ImuFactor {
    pub fn new(
        from: EpochIndex,
        to: EpochIndex,
        preint: PreintegratedImu,
        gravity: Vector3<f64>,
    ) -> Result<Self, GraphError> {
        let cov = DMatrix::from_iterator(9, 9, preint.cov.iter().copied());
        let whitener = Whitener::from_covariance(&cov)?;
        Ok(Self {
            from,
            to,
            preint,
            gravity,
            whitener,
        })
    }

    fn raw(&self, values: &Values) -> Result<(DVector<f64>, Vec<(VariableKey, DMatrix<f64>)>), GraphError> {
        let xi = values.require(self.from)?;
        let xj = values.require(self.to)?;
        let (r, ji, jj) = self.preint.residual_and_jacobians(xi, xj, &self.gravity);
        let take = |j: &nalgebra::SMatrix<f64, 9, 15>, kind: VariableKind| {
            DMatrix::from_fn(9, kind.dim(), |row, col| j[(row, kind.offset() + col)])
        };
        let blocks = vec![
            (VariableKey::pose(self.from), take(&ji, VariableKind::Pose)),
            (VariableKey::velocity(self.from), take(&ji, VariableKind::Velocity)),
            (VariableKey::bias(self.from), take(&ji, VariableKind::Bias)),
            (VariableKey::pose(self.to), take(&jj, VariableKind::Pose)),
            (VariableKey::velocity(self.to), take(&jj, VariableKind::Velocity)),
        ];
        Ok((DVector::from_column_slice(r.as_slice()), blocks))
    }
}

/// Random-walk constraint between the biases of consecutive epochs.
#[derive(Debug, Clone, PartialEq)]
pub struct BiasWalkFactor {
    pub from: EpochIndex,
    pub to: EpochIndex,
    pub cov: DMatrix<f64>,
    whitener: Whitener,
}

impl BiasWalkFactor {
    /// Covariance `diag(σ_a² Δt, σ_g² Δt)` from continuous random-walk
    /// densities.
    pub fn from_random_walk(
        from: EpochIndex,
        to: EpochIndex,
        accel_bias_rw: f64,
        gyro_bias_rw: f64,
        dt: f64,
    ) -> Result<Self, GraphError> {
        let mut cov = DMatrix::zeros(6, 6);
        for i in 0..3 {
            cov[(i, i)] = accel_bias_rw.powi(2) * dt;
            cov[(i + 3, i + 3)] = gyro_bias_rw.powi(2) * dt;
        }
        Self::new(from, to, cov)
    }

    pub fn new(from: EpochIndex, to: EpochIndex, cov: DMatrix<f64>) -> Result<Self, GraphError> {
        if cov.shape() != (6, 6) {
            return Err(GraphError::Dimension("bias walk covariance must be 6×6".into()));
        }
        let whitener = Whitener::from_covariance(&cov)?;
        Ok(Self { from, to, cov, whitener })
    }

    fn raw(&self, values: &Values) -> Result<(DVector<f64>, Vec<(VariableKey, DMatrix<f64>)>), GraphError> {
        let bi = values.require(self.from)?.bias;
        let bj = values.require(self.to)?.bias;
        let mut r = DVector::zeros(6);
        r.fixed_rows_mut::<3>(0).copy_from(&(bj.acc - bi.acc));
        r.fixed_rows_mut::<3>(3).copy_from(&(bj.gyro - bi.gyro));
        let eye = DMatrix::<f64>::identity(6, 6);
        Ok((
            r,
            vec![
                (VariableKey::bias(self.from), -eye.clone()),
                (VariableKey::bias(self.to), eye),
            ],
        ))
    }
}

/// Loosely coupled GNSS position constraint.
#[derive(Debug, Clone, PartialEq)]
pub struct GnssFactor {
    pub epoch: EpochIndex,
    pub position: Vector3<f64>,
    pub cov: Matrix3<f64>,
    whitener: Whitener,
}

impl GnssFactor {
    pub fn new(epoch: EpochIndex, position: Vector3<f64>, cov: Matrix3<f64>) -> Result<Self, GraphError> {
        let whitener = Whitener::from_covariance(&DMatrix::from_iterator(3, 3, cov.iter().copied()))?;
        Ok(Self {
            epoch,
            position,
            cov,
            whitener,
        })
    }

    fn raw(&self, values: &Values) -> Result<(DVector<f64>, Vec<(VariableKey, DMatrix<f64>)>), GraphError> {
        let x = values.require(self.epoch)?;
        let r = x.p - self.position;
        let mut j = DMatrix::zeros(3, 6);
        block3(&mut j, 0, 3, &Matrix3::identity());
        Ok((
            DVector::from_column_slice(r.as_slice()),
            vec![(VariableKey::pose(self.epoch), j)],
        ))
    }
}

/// Linear Gaussian prior left behind by marginalization, expressed in the
/// local coordinates of a frozen linearization point:
/// `r(x) = e + A · local(x_lin, x)`.
#[derive(Debug, Clone, PartialEq)]
pub struct MarginalPriorFactor {
    pub epochs: Vec<EpochIndex>,
    pub linearization_point: Vec<NavState>,
    /// Whitened square-root information `A` (rows × 15·epochs).
    pub sqrt_information: DMatrix<f64>,
    /// Whitened residual `e` at the linearization point.
    pub residual: DVector<f64>,
}

impl MarginalPriorFactor {
    pub fn new(
        epochs: Vec<EpochIndex>,
        linearization_point: Vec<NavState>,
        sqrt_information: DMatrix<f64>,
        residual: DVector<f64>,
    ) -> Result<Self, GraphError> {
        if epochs.len() != linearization_point.len()
            || sqrt_information.ncols() != 15 * epochs.len()
            || sqrt_information.nrows() != residual.len()
        {
            return Err(GraphError::Dimension("inconsistent marginal prior".into()));
        }
        Ok(Self {
            epochs,
            linearization_point,
            sqrt_information,
            residual,
        })
    }

    /// Condensed information matrix `AᵀA`.
    pub fn information(&self) -> DMatrix<f64> {
        self.sqrt_information.transpose() * &self.sqrt_information
    }

    /// Gradient `Aᵀe` of half the cost at the linearization point.
    pub fn gradient(&self) -> DVector<f64> {
        self.sqrt_information.transpose() * &self.residual
    }

    fn raw(&self, values: &Values) -> Result<(DVector<f64>, Vec<(VariableKey, DMatrix<f64>)>), GraphError> {
        let n = self.epochs.len();
        let mut delta = DVector::zeros(15 * n);
        let mut local_jac = DMatrix::<f64>::identity(15 * n, 15 * n);
        for (k, (&epoch, lin)) in self.epochs.iter().zip(&self.linearization_point).enumerate() {
            let x = values.require(epoch)?;
            let d = crate::lie::local(lin, x);
            delta.rows_mut(15 * k, 15).copy_from(&d);
            let dtheta = d.fixed_rows::<3>(0).into_owned();
            block3(&mut local_jac, 15 * k, 15 * k, &so3_right_jacobian_inv(&dtheta));
        }
        let r = &self.residual + &self.sqrt_information * delta;
        let full = &self.sqrt_information * local_jac;
        let mut blocks = Vec::with_capacity(3 * n);
        for (k, &epoch) in self.epochs.iter().enumerate() {
            for kind in VariableKind::ALL {
                let cols = full.columns(15 * k + kind.offset(), kind.dim()).into_owned();
                blocks.push((VariableKey::new(epoch, kind), cols));
            }
        }
        Ok((r, blocks))
    }
}

/// The five concrete factor types of the fusion problem.
#[derive(Debug, Clone, PartialEq)]
pub enum Factor {
    Prior(PriorFactor),
    Imu(ImuFactor),
    BiasWalk(BiasWalkFactor),
    Gnss(GnssFactor),
    MarginalPrior(MarginalPriorFactor),
}

impl Factor {
    pub fn keys(&self) -> Vec<VariableKey> {
        match self {
            Factor::Prior(f) => f.kinds.iter().map(|k| VariableKey::new(f.epoch, *k)).collect(),
            Factor::Imu(f) => vec![
                VariableKey::pose(f.from),
                VariableKey::velocity(f.from),
                VariableKey::bias(f.from),
                VariableKey::pose(f.to),
                VariableKey::velocity(f.to),
            ],
            Factor::BiasWalk(f) => vec![VariableKey::bias(f.from), VariableKey::bias(f.to)],
            Factor::Gnss(f) => vec![VariableKey::pose(f.epoch)],
            Factor::MarginalPrior(f) => f
                .epochs
                .iter()
                .flat_map(|e| VariableKind::ALL.map(|k| VariableKey::new(*e, k)))
                .collect(),
        }
    }

    pub fn epochs(&self) -> BTreeSet<EpochIndex> {
        self.keys().into_iter().map(|k| k.epoch).collect()
    }

    pub fn is_prior(&self) -> bool {
        matches!(self, Factor::Prior(_) | Factor::MarginalPrior(_))
    }

    pub fn dim(&self) -> usize {
        match self {
            Factor::Prior(f) => f.dim(),
            Factor::Imu(_) => 9,
            Factor::BiasWalk(_) => 6,
            Factor::Gnss(_) => 3,
            Factor::MarginalPrior(f) => f.residual.len(),
        }
    }

    /// Unwhitened residual with unwhitened Jacobian blocks.
    pub fn unwhitened(&self, values: &Values) -> Result<(DVector<f64>, Vec<(VariableKey, DMatrix<f64>)>), GraphError> {
        match self {
            Factor::Prior(f) => f.raw(values),
            Factor::Imu(f) => f.raw(values),
            Factor::BiasWalk(f) => f.raw(values),
            Factor::Gnss(f) => f.raw(values),
            Factor::MarginalPrior(f) => f.raw(values),
        }
    }

    fn whitener(&self) -> Option<&Whitener> {
        match self {
            Factor::Prior(f) => Some(&f.whitener),
            Factor::Imu(f) => Some(&f.whitener),
            Factor::BiasWalk(f) => Some(&f.whitener),
            Factor::Gnss(f) => Some(&f.whitener),
            Factor::MarginalPrior(_) => None,
        }
    }

    pub fn linearize(&self, values: &Values) -> Result<LinearizedFactor, GraphError> {
        let (r, blocks) = self.unwhitened(values)?;
        Ok(match self.whitener() {
            Some(w) => LinearizedFactor {
                residual: w.whiten(&r),
                blocks: blocks.into_iter().map(|(k, j)| (k, w.whiten_matrix(&j))).collect(),
            },
            None => LinearizedFactor { residual: r, blocks },
        })
    }

    /// Whitened residual only.
    pub fn residual(&self, values: &Values) -> Result<DVector<f64>, GraphError> {
        let (r, _) = self.unwhitened(values)?;
        Ok(match self.whitener() {
            Some(w) => w.whiten(&r),
            None => r,
        })
    }

    /// Squared Mahalanobis norm of the residual.
    pub fn cost(&self, values: &Values) -> Result<f64, GraphError> {
        Ok(self.residual(values)?.norm_squared())
    }
}

macro_rules! impl_from_factor {
    ($($t:ident => $v:ident),*) => {
        $(impl From<$t> for Factor {
            fn from(f: $t) -> Self {
                Factor::$v(f)
            }
        })*
    };
}
impl_from_factor!(
    PriorFactor => Prior,
    ImuFactor => Imu,
    BiasWalkFactor => BiasWalk,
    GnssFactor => Gnss,
    MarginalPriorFactor => MarginalPrior
);

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct FactorId(pub u64);

/// Whitened Jacobian and residual of a whole graph.
#[derive(Debug, Clone)]
pub struct LinearSystem {
    pub ordering: Ordering,
    pub factors: Vec<LinearizedFactor>,
}

impl LinearSystem {
    pub fn residual_norm_squared(&self) -> f64 {
        self.factors.iter().map(|f| f.cost()).sum()
    }

    pub fn rows(&self) -> usize {
        self.factors.iter().map(|f| f.residual.len()).sum()
    }

    /// Dense `(J, r)`; meant for small problems and reference checks.
    pub fn to_dense(&self) -> (DMatrix<f64>, DVector<f64>) {
        let mut j = DMatrix::zeros(self.rows(), self.ordering.dim());
        let mut r = DVector::zeros(self.rows());
        let mut row = 0;
        for f in &self.factors {
            let m = f.residual.len();
            r.rows_mut(row, m).copy_from(&f.residual);
            for (key, block) in &f.blocks {
                if let Some(col) = self.ordering.column(key) {
                    let mut dst = j.view_mut((row, col), (m, key.kind.dim()));
                    dst += block;
                }
            }
            row += m;
        }
        (j, r)
    }
}

#[derive(Debug, Clone, Default)]
pub struct FactorGraph {
    variables: BTreeSet<VariableKey>,
    initial: Values,
    factors: BTreeMap<FactorId, Factor>,
    next_id: u64,
}

impl FactorGraph {
    pub fn new() -> Self {
        Self::default()
    }

    /// Registers a variable and records the matching part of `initial` as
    /// its starting estimate.
    pub fn add_variable(&mut self, key: VariableKey, initial: &NavState) -> Result<(), GraphError> {
        if self.variables.contains(&key) {
            return Err(GraphError::DuplicateKey(key));
        }
        self.variables.insert(key);
        let entry = match self.initial.get_mut(key.epoch) {
            Some(e) => e,
            None => {
                self.initial.insert(key.epoch, initial.clone());
                return Ok(());
            }
        };
        entry.t = initial.t;
        match key.kind {
            VariableKind::Pose => {
                entry.rot = initial.rot;
                entry.p = initial.p;
            }
            VariableKind::Velocity => entry.v = initial.v,
            VariableKind::Bias => entry.bias = initial.bias,
        }
        Ok(())
    }

    /// Adds the pose, velocity and bias variables of one epoch.
    pub fn add_epoch(&mut self, epoch: EpochIndex, initial: &NavState) -> Result<(), GraphError> {
        for kind in VariableKind::ALL {
            if self.variables.contains(&VariableKey::new(epoch, kind)) {
                return Err(GraphError::DuplicateKey(VariableKey::new(epoch, kind)));
            }
        }
        for kind in VariableKind::ALL {
            self.add_variable(VariableKey::new(epoch, kind), initial)?;
        }
        Ok(())
    }

    pub fn add_factor(&mut self, factor: impl Into<Factor>) -> Result<FactorId, GraphError> {
        let factor = factor.into();
        for key in factor.keys() {
            if !self.variables.contains(&key) {
                return Err(GraphError::UnknownKey(key));
            }
        }
        let id = FactorId(self.next_id);
        self.next_id += 1;
        self.factors.insert(id, factor);
        Ok(id)
    }

    pub fn remove_factor(&mut self, id: FactorId) -> Option<Factor> {
        self.factors.remove(&id)
    }

    /// Drops a variable. Factors referencing it must be removed first.
    pub fn remove_variable(&mut self, key: &VariableKey) -> bool {
        let removed = self.variables.remove(key);
        if removed && !VariableKind::ALL.iter().any(|k| self.variables.contains(&VariableKey::new(key.epoch, *k))) {
            self.initial.remove(key.epoch);
        }
        removed
    }

    pub fn variable_count(&self) -> usize {
        self.variables.len()
    }
    pub fn factor_count(&self) -> usize {
        self.factors.len()
    }
    pub fn variables(&self) -> impl Iterator<Item = &VariableKey> {
        self.variables.iter()
    }
    pub fn contains(&self, key: &VariableKey) -> bool {
        self.variables.contains(key)
    }
    pub fn epochs(&self) -> BTreeSet<EpochIndex> {
        self.variables.iter().map(|k| k.epoch).collect()
    }
    pub fn factors(&self) -> impl Iterator<Item = (FactorId, &Factor)> {
        self.factors.iter().map(|(id, f)| (*id, f))
    }
    pub fn factor(&self, id: FactorId) -> Option<&Factor> {
        self.factors.get(&id)
    }
    /// Starting estimates recorded by [`Self::add_variable`].
    pub fn initial_values(&self) -> &Values {
        &self.initial
    }
    pub fn is_gauge_fixed(&self) -> bool {
        self.factors.values().any(Factor::is_prior)
    }

    fn check_estimates(&self, values: &Values) -> Result<(), GraphError> {
        for key in &self.variables {
            values.require(key.epoch)?;
        }
        Ok(())
    }

    /// Sum of squared Mahalanobis residuals over all factors.
    pub fn total_cost(&self, values: &Values) -> Result<f64, GraphError> {
        self.check_estimates(values)?;
        let costs = par::map(Exec::default(), &self.factor_list(), |f| f.cost(values));
        costs.into_iter().sum()
    }

    /// Sum of the costs of the factors touching `epoch`.
    pub fn cost_around(&self, epoch: EpochIndex, values: &Values) -> Result<f64, GraphError> {
        self.factors
            .values()
            .filter(|f| f.epochs().contains(&epoch))
            .map(|f| f.cost(values))
            .sum()
    }

    fn factor_list(&self) -> Vec<&Factor> {
        self.factors.values().collect()
    }

    pub fn ordering(&self) -> Ordering {
        Ordering::new(self.variables.iter())
    }

    pub fn linearize(&self, values: &Values) -> Result<LinearSystem, GraphError> {
        self.linearize_with(values, Exec::default())
    }

    pub fn linearize_with(&self, values: &Values, exec: Exec) -> Result<LinearSystem, GraphError> {
        self.check_estimates(values)?;
        let factors: Result<Vec<_>, _> =
            par::map(exec, &self.factor_list(), |f| f.linearize(values)).into_iter().collect();
        Ok(LinearSystem {
            ordering: self.ordering(),
            factors: factors?,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::lie::so3_exp;
    use approx::assert_relative_eq;

    fn state_at(t: f64, p: Vector3<f64>) -> NavState {
        NavState {
            t,
            p,
            ..NavState::default()
        }
    }

    #[test]
    fn add_variable_and_duplicates() {
        let mut g = FactorGraph::new();
        g.add_variable(VariableKey::pose(0), &NavState::default()).unwrap();
        assert_eq!(g.variable_count(), 1);
        assert_eq!(
            g.add_variable(VariableKey::pose(0), &NavState::default()),
            Err(GraphError::DuplicateKey(VariableKey::pose(0)))
        );
    }

    #[test]
    fn thousand_variables() {
        let mut g = FactorGraph::new();
        for e in 0..1000 {
            g.add_variable(VariableKey::pose(e), &NavState::default()).unwrap();
        }
        assert_eq!(g.variable_count(), 1000);
        assert_eq!(g.ordering().dim(), 6000);
    }

    #[test]
    fn unknown_key_and_singular_cov() {
        let mut g = FactorGraph::new();
        let f = GnssFactor::new(3, Vector3::zeros(), Matrix3::identity()).unwrap();
        assert_eq!(g.add_factor(f), Err(GraphError::UnknownKey(VariableKey::pose(3))));
        let singular = Matrix3::new(1.0, 0.0, 0.0, 0.0, 1.0, 0.0, 0.0, 0.0, 0.0);
        assert_eq!(
            GnssFactor::new(0, Vector3::zeros(), singular).err(),
            Some(GraphError::NonPositiveDefinite)
        );
    }

    #[test]
    fn prior_cost_zero_at_mean() {
        let mut g = FactorGraph::new();
        let mean = NavState {
            rot: so3_exp(&Vector3::new(0.1, 0.2, -0.3)),
            p: Vector3::new(1.0, 2.0, 3.0),
            ..NavState::default()
        };
        g.add_epoch(0, &mean).unwrap();
        g.add_factor(PriorFactor::full(0, mean.clone(), DMatrix::identity(15, 15)).unwrap())
            .unwrap();
        let values: Values = [(0, mean)].into_iter().collect();
        assert!(g.total_cost(&values).unwrap() < 1e-25);
        let sys = g.linearize(&values).unwrap();
        let (j, r) = sys.to_dense();
        assert!(r.norm() < 1e-15);
        assert!((j - DMatrix::<f64>::identity(15, 15)).norm() < 1e-12);
    }

    #[test]
    fn gnss_three_four_five() {
        let mut g = FactorGraph::new();
        g.add_variable(VariableKey::pose(0), &NavState::default()).unwrap();
        g.add_factor(GnssFactor::new(0, Vector3::zeros(), Matrix3::identity()).unwrap())
            .unwrap();
        let values: Values = [(0, state_at(0.0, Vector3::new(3.0, 4.0, 0.0)))].into_iter().collect();
        assert_relative_eq!(g.total_cost(&values).unwrap(), 25.0, epsilon = 1e-12);

        let mut g = FactorGraph::new();
        g.add_variable(VariableKey::pose(0), &NavState::default()).unwrap();
        g.add_factor(GnssFactor::new(0, Vector3::zeros(), Matrix3::identity() * 4.0).unwrap())
            .unwrap();
        assert_relative_eq!(g.total_cost(&values).unwrap(), 25.0 / 4.0, epsilon = 1e-12);
    }

    #[test]
    fn missing_estimate() {
        let mut g = FactorGraph::new();
        g.add_epoch(2, &NavState::default()).unwrap();
        assert_eq!(g.total_cost(&Values::new()), Err(GraphError::MissingEstimate(2)));
    }

    #[test]
    fn whitening_matches_mahalanobis() {
        let a = DMatrix::from_row_slice(3, 3, &[2.0, 0.3, -0.1, 0.0, 1.5, 0.4, 0.2, 0.0, 0.7]);
        let cov = &a * a.transpose();
        let w = Whitener::from_covariance(&cov).unwrap();
        let r = DVector::from_row_slice(&[0.3, -1.2, 2.0]);
        let expected = (r.transpose() * cov.clone().try_inverse().unwrap() * &r)[0];
        assert_relative_eq!(w.whiten(&r).norm_squared(), expected, epsilon = 1e-10);
    }

    #[test]
    fn factor_order_does_not_change_cost() {
        let build = |rev: bool| {
            let mut g = FactorGraph::new();
            g.add_epoch(0, &NavState::default()).unwrap();
            let mut fs: Vec<Factor> = vec![
                GnssFactor::new(0, Vector3::new(1.0, 0.0, 0.0), Matrix3::identity()).unwrap().into(),
                GnssFactor::new(0, Vector3::new(0.0, 2.0, 0.0), Matrix3::identity() * 2.0).unwrap().into(),
                PriorFactor::new(0, &[VariableKind::Velocity], NavState::default(), DMatrix::identity(3, 3))
                    .unwrap()
                    .into(),
            ];
            if rev {
                fs.reverse();
            }
            for f in fs {
                g.add_factor(f).unwrap();
            }
            g
        };
        let values: Values = [(0, state_at(0.0, Vector3::new(0.5, 0.5, 0.5)))].into_iter().collect();
        assert_eq!(
            build(false).total_cost(&values).unwrap(),
            build(true).total_cost(&values).unwrap()
        );
    }
}
