//! SO(3) rotation algebra and the product-manifold retraction used by the
//! solver.
//!
//! Rotations are perturbed on the right (body frame):
//! `R ⊕ δθ = R · exp(δθ)`. Every 15-dimensional tangent vector in the crate
//! uses the ordering `(δθ, δp, δv, δb_a, δb_g)`.

use std::f64::consts::PI;
use std::ops::Mul;

use nalgebra::{Matrix3, SVector, Vector3};

use crate::state::NavState;

/// 15-dimensional local coordinates `(δθ, δp, δv, δb_a, δb_g)`.
pub type Vector15 = SVector<f64, 15>;

/// Below this angle `exp` switches to its Taylor expansion.
pub const EXP_TAYLOR_THRESHOLD: f64 = 1e-8;
/// Below this angle the right Jacobian switches to its Taylor expansion.
pub const JR_TAYLOR_THRESHOLD: f64 = 1e-6;
/// Below this angle the inverse right Jacobian switches to its series.
pub const JR_INV_TAYLOR_THRESHOLD: f64 = 1e-4;
/// Within this distance of π the logarithm recovers the axis from the
/// symmetric part of the rotation.
pub const LOG_NEAR_PI_THRESHOLD: f64 = 1e-4;

/// Skew-symmetric (cross-product) matrix `[v]×`.
#[inline]
pub fn skew(v: &Vector3<f64>) -> Matrix3<f64> {
    Matrix3::new(0.0, -v.z, v.y, v.z, 0.0, -v.x, -v.y, v.x, 0.0)
}

/// Inverse of [`skew`] on the skew-symmetric part of `m`.
#[inline]
pub fn vee(m: &Matrix3<f64>) -> Vector3<f64> {
    Vector3::new(m[(2, 1)] - m[(1, 2)], m[(0, 2)] - m[(2, 0)], m[(1, 0)] - m[(0, 1)]) * 0.5
}

/// An element of SO(3), stored as an orthonormal 3×3 matrix.
///
/// Composition re-orthonormalizes the product so that `RᵀR = I` and
/// `det R = +1` hold to machine precision no matter how many operations
/// are chained.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Rotation(Matrix3<f64>);

impl Default for Rotation {
    fn default() -> Self {
        Self::identity()
    }
}

impl Rotation {
    pub fn identity() -> Self {
        Self(Matrix3::identity())
    }

    /// Wraps a matrix that is already (numerically) a rotation and projects
    /// it back onto SO(3).
    pub fn from_matrix(m: Matrix3<f64>) -> Self {
        Self(m).renormalized()
    }

    /// Wraps a matrix without re-orthonormalization. Intended for tests that
    /// want to observe drift.
    pub fn from_matrix_unchecked(m: Matrix3<f64>) -> Self {
        Self(m)
    }

    /// Rotation about the z (up) axis.
    pub fn from_yaw(yaw: f64) -> Self {
        so3_exp(&Vector3::new(0.0, 0.0, yaw))
    }

    /// `Rz(yaw) · Ry(pitch) · Rx(roll)`.
    pub fn from_euler(roll: f64, pitch: f64, yaw: f64) -> Self {
        let rx = so3_exp(&Vector3::new(roll, 0.0, 0.0));
        let ry = so3_exp(&Vector3::new(0.0, pitch, 0.0));
        let rz = so3_exp(&Vector3::new(0.0, 0.0, yaw));
        rz * ry * rx
    }

    /// `(roll, pitch, yaw)` for the `Rz·Ry·Rx` convention.
    pub fn euler_angles(&self) -> (f64, f64, f64) {
        let m = &self.0;
        let pitch = (-m[(2, 0)]).clamp(-1.0, 1.0).asin();
        let roll = m[(2, 1)].atan2(m[(2, 2)]);
        let yaw = m[(1, 0)].atan2(m[(0, 0)]);
        (roll, pitch, yaw)
    }

    #[inline]
    pub fn matrix(&self) -> &Matrix3<f64> {
        &self.0
    }

    #[inline]
    pub fn inverse(&self) -> Self {
        Self(self.0.transpose())
    }

    /// Gram–Schmidt projection onto SO(3).
    pub fn renormalized(self) -> Self {
        let m = self.0;
        let x = m.column(0).normalize();
        let y0 = m.column(1) - x * x.dot(&m.column(1));
        let y = y0.normalize();
        let z = x.cross(&y);
        Self(Matrix3::from_columns(&[x, y, z]))
    }

    /// `‖RᵀR − I‖_F`.
    pub fn orthonormality_error(&self) -> f64 {
        (self.0.transpose() * self.0 - Matrix3::identity()).norm()
    }

    pub fn determinant(&self) -> f64 {
        self.0.determinant()
    }

    /// Right perturbation `R · exp(δθ)`.
    #[inline]
    pub fn plus(&self, delta: &Vector3<f64>) -> Self {
        *self * so3_exp(delta)
    }

    /// `log(selfᵀ · other)`, so that `self.plus(&self.minus(other)) == other`.
    #[inline]
    pub fn minus(&self, other: &Rotation) -> Vector3<f64> {
        so3_log(&(self.inverse() * *other))
    }
}

impl Mul for Rotation {
    type Output = Rotation;

    fn mul(self, rhs: Rotation) -> Rotation {
        Rotation(self.0 * rhs.0).renormalized()
    }
}

impl Mul<Vector3<f64>> for Rotation {
    type Output = Vector3<f64>;

    fn mul(self, rhs: Vector3<f64>) -> Vector3<f64> {
        self.0 * rhs
    }
}

impl Mul<&Vector3<f64>> for &Rotation {
    type Output = Vector3<f64>;

    fn mul(self, rhs: &Vector3<f64>) -> Vector3<f64> {
        self.0 * rhs
    }
}

/// Exponential map (Rodrigues' formula).
pub fn so3_exp(omega: &Vector3<f64>) -> Rotation {
    let theta2 = omega.norm_squared();
    let k = skew(omega);
    if theta2 < EXP_TAYLOR_THRESHOLD * EXP_TAYLOR_THRESHOLD {
        let m = Matrix3::identity() + k + k * k * 0.5;
        return Rotation(m).renormalized();
    }
    let theta = theta2.sqrt();
    let a = theta.sin() / theta;
    let half = 0.5 * theta;
    let b = 2.0 * (half.sin() / theta).powi(2);
    Rotation(Matrix3::identity() + k * a + k * k * b)
}

/// Logarithm map, returning the principal axis-angle vector with norm in
/// `[0, π]`.
///
/// At exactly π the axis is recovered from `(R + Rᵀ)/2` and its sign is
/// chosen so that the component along the largest diagonal entry is
/// positive. A half turn about `+z` therefore maps to `[0, 0, π]`.
pub fn so3_log(r: &Rotation) -> Vector3<f64> {
    let m = r.matrix();
    let w = vee(m);
    let s = w.norm();
    let c = 0.5 * (m.trace() - 1.0);
    let theta = s.atan2(c);

    if theta < EXP_TAYLOR_THRESHOLD {
        // θ/sinθ ≈ 1 + θ²/6
        return w * (1.0 + theta * theta / 6.0);
    }
    if PI - theta > LOG_NEAR_PI_THRESHOLD {
        return w * (theta / s);
    }

    // Near π: aaᵀ = (sym(R) − cosθ I) / (1 − cosθ).
    let sym = (m + m.transpose()) * 0.5;
    let aat = (sym - Matrix3::identity() * c) / (1.0 - c);
    let mut k = 0;
    for i in 1..3 {
        if aat[(i, i)] > aat[(k, k)] {
            k = i;
        }
    }
    let mut axis: Vector3<f64> = aat.column(k).into();
    axis /= aat[(k, k)].max(0.0).sqrt();
    axis.normalize_mut();
    if axis.dot(&w) < 0.0 {
        axis = -axis;
    }
    axis * theta
}

/// Right Jacobian of SO(3): `exp(ω + δ) ≈ exp(ω) · exp(Jr(ω) δ)`.
pub fn so3_right_jacobian(omega: &Vector3<f64>) -> Matrix3<f64> {
    let theta2 = omega.norm_squared();
    let k = skew(omega);
    if theta2 < JR_TAYLOR_THRESHOLD * JR_TAYLOR_THRESHOLD {
        return Matrix3::identity() - k * 0.5 + k * k / 6.0;
    }
    let theta = theta2.sqrt();
    let half = 0.5 * theta;
    let a = 2.0 * half.sin().powi(2) / theta2;
    let b = (theta - theta.sin()) / (theta2 * theta);
    Matrix3::identity() - k * a + k * k * b
}

/// Inverse of [`so3_right_jacobian`].
pub fn so3_right_jacobian_inv(omega: &Vector3<f64>) -> Matrix3<f64> {
    let theta2 = omega.norm_squared();
    let k = skew(omega);
    let coeff = if theta2 < JR_INV_TAYLOR_THRESHOLD * JR_INV_TAYLOR_THRESHOLD {
        1.0 / 12.0 + theta2 / 720.0
    } else {
        let theta = theta2.sqrt();
        1.0 / theta2 - (1.0 + theta.cos()) / (2.0 * theta * theta.sin())
    };
    Matrix3::identity() + k * 0.5 + k * k * coeff
}

/// Manifold update of a full navigation state. The rotation is perturbed on
/// the right, every vector part additively.
pub fn retract(state: &NavState, delta: &Vector15) -> NavState {
    let dtheta = delta.fixed_rows::<3>(0).into_owned();
    let mut out = state.clone();
    out.rot = state.rot.plus(&dtheta);
    out.p += delta.fixed_rows::<3>(3);
    out.v += delta.fixed_rows::<3>(6);
    out.bias.acc += delta.fixed_rows::<3>(9);
    out.bias.gyro += delta.fixed_rows::<3>(12);
    out
}

/// Inverse of [`retract`]: the tangent vector taking `from` to `to`.
pub fn local(from: &NavState, to: &NavState) -> Vector15 {
    let mut d = Vector15::zeros();
    d.fixed_rows_mut::<3>(0).copy_from(&from.rot.minus(&to.rot));
    d.fixed_rows_mut::<3>(3).copy_from(&(to.p - from.p));
    d.fixed_rows_mut::<3>(6).copy_from(&(to.v - from.v));
    d.fixed_rows_mut::<3>(9).copy_from(&(to.bias.acc - from.bias.acc));
    d.fixed_rows_mut::<3>(12).copy_from(&(to.bias.gyro - from.bias.gyro));
    d
}
