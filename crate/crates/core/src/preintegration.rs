//! On-manifold IMU preintegration between two consecutive graph states.
//!
//! Samples are integrated with a first-order Euler step on SO(3). Alongside
//! the relative-motion deltas the accumulator propagates the 9×9 covariance
//! of `(δθ, δv, δp)` and the 9×6 Jacobian of the deltas with respect to the
//! bias `(b_a, b_g)` at which they were integrated.

use log::{debug, warn};
use nalgebra::{Matrix3, SMatrix, SVector, Vector3};
use thiserror::Error;

use crate::lie::{skew, so3_exp, so3_log, so3_right_jacobian, so3_right_jacobian_inv, Rotation};
use crate::state::{ImuBias, ImuNoiseParams, ImuSample, NavState};

pub type Matrix9 = SMatrix<f64, 9, 9>;
pub type Matrix9x6 = SMatrix<f64, 9, 6>;
pub type Matrix9x15 = SMatrix<f64, 9, 15>;
pub type Vector9 = SVector<f64, 9>;

/// Bias deviation beyond which first-order correction is flagged as
/// unreliable.
pub const BIAS_CORRECTION_WARN: f64 = 0.1;

// Row offsets inside the 9-dim preintegration error state.
const R: usize = 0;
const V: usize = 3;
const P: usize = 6;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum PreintegrationError {
    #[error("IMU time went backwards: {t} after {prev}")]
    NonMonotonicTime { prev: f64, t: f64 },
    #[error("IMU gap of {dt} s exceeds the {max} s limit")]
    ExcessiveGap { dt: f64, max: f64 },
    #[error("integration step must be positive, got {0}")]
    NonPositiveStep(f64),
    #[error("non-finite IMU sample at t = {0}")]
    NonFinite(f64),
}

/// Relative motion summary between two states.
#[derive(Debug, Clone, PartialEq)]
pub struct PreintegratedImu {
    pub delta_rot: Rotation,
    pub delta_v: Vector3<f64>,
    pub delta_p: Vector3<f64>,
    pub delta_t: f64,
    /// Covariance of `(δθ, δv, δp)`.
    pub cov: Matrix9,
    /// `∂(δθ, δv, δp) / ∂(b_a, b_g)`.
    pub bias_jacobian: Matrix9x6,
    pub lin_bias: ImuBias,
    pub sample_count: usize,
    last_sample_t: Option<f64>,
}

impl PreintegratedImu {
    pub fn new(lin_bias: ImuBias) -> Self {
        Self {
            delta_rot: Rotation::identity(),
            delta_v: Vector3::zeros(),
            delta_p: Vector3::zeros(),
            delta_t: 0.0,
            cov: Matrix9::zeros(),
            bias_jacobian: Matrix9x6::zeros(),
            lin_bias,
            sample_count: 0,
            last_sample_t: None,
        }
    }

    pub fn is_empty(&self) -> bool {
        self.sample_count == 0
    }

    pub fn last_sample_time(&self) -> Option<f64> {
        self.last_sample_t
    }

    #[inline]
    fn jac(&self, row: usize, col: usize) -> Matrix3<f64> {
        self.bias_jacobian.fixed_view::<3, 3>(row, col).into_owned()
    }

    /// Integrates one sample held constant over `dt` seconds.
    pub fn integrate(
        &mut self,
        sample: &ImuSample,
        dt: f64,
        params: &ImuNoiseParams,
    ) -> Result<(), PreintegrationError> {
        if let Some(prev) = self.last_sample_t {
            if sample.t < prev {
                return Err(PreintegrationError::NonMonotonicTime { prev, t: sample.t });
            }
        }
        if !sample.is_finite() {
            return Err(PreintegrationError::NonFinite(sample.t));
        }
        if !(dt > 0.0) {
            return Err(PreintegrationError::NonPositiveStep(dt));
        }
        if dt > params.max_imu_gap {
            return Err(PreintegrationError::ExcessiveGap {
                dt,
                max: params.max_imu_gap,
            });
        }

        let acc = sample.accel() - self.lin_bias.acc;
        let omega = sample.gyro() - self.lin_bias.gyro;
        let dt2 = dt * dt;
        let rot = *self.delta_rot.matrix();
        let acc_skew = skew(&acc);
        let step = so3_exp(&(omega * dt));
        let jr = so3_right_jacobian(&(omega * dt));

        // Bias Jacobians, position first since it reads the old velocity terms.
        let jr_g = self.jac(R, 3);
        let jv_a = self.jac(V, 0);
        let jv_g = self.jac(V, 3);
        let jp_a = self.jac(P, 0);
        let jp_g = self.jac(P, 3);
        let mut bj = self.bias_jacobian;
        bj.fixed_view_mut::<3, 3>(P, 0)
            .copy_from(&(jp_a + jv_a * dt - rot * (0.5 * dt2)));
        bj.fixed_view_mut::<3, 3>(P, 3)
            .copy_from(&(jp_g + jv_g * dt - rot * acc_skew * jr_g * (0.5 * dt2)));
        bj.fixed_view_mut::<3, 3>(V, 0).copy_from(&(jv_a - rot * dt));
        bj.fixed_view_mut::<3, 3>(V, 3)
            .copy_from(&(jv_g - rot * acc_skew * jr_g * dt));
        bj.fixed_view_mut::<3, 3>(R, 3)
            .copy_from(&(step.matrix().transpose() * jr_g - jr * dt));
        self.bias_jacobian = bj;

        // Error-state transition.
        let mut a = Matrix9::identity();
        a.fixed_view_mut::<3, 3>(R, R).copy_from(&step.matrix().transpose());
        a.fixed_view_mut::<3, 3>(V, R).copy_from(&(-rot * acc_skew * dt));
        a.fixed_view_mut::<3, 3>(P, R)
            .copy_from(&(-rot * acc_skew * (0.5 * dt2)));
        a.fixed_view_mut::<3, 3>(P, V)
            .copy_from(&(Matrix3::identity() * dt));

        let mut b = SMatrix::<f64, 9, 6>::zeros();
        b.fixed_view_mut::<3, 3>(R, 0).copy_from(&(jr * dt));
        b.fixed_view_mut::<3, 3>(V, 3).copy_from(&(rot * dt));
        b.fixed_view_mut::<3, 3>(P, 3).copy_from(&(rot * (0.5 * dt2)));

        let qg = params.gyro_noise_density.powi(2) / dt;
        let qa = params.accel_noise_density.powi(2) / dt;
        let mut q = SMatrix::<f64, 6, 6>::zeros();
        for i in 0..3 {
            q[(i, i)] = qg;
            q[(i + 3, i + 3)] = qa;
        }
        let cov = a * self.cov * a.transpose() + b * q * b.transpose();
        self.cov = (cov + cov.transpose()) * 0.5;

        // Deltas.
        let acc_nav = rot * acc;
        self.delta_p += self.delta_v * dt + acc_nav * (0.5 * dt2);
        self.delta_v += acc_nav * dt;
        self.delta_rot = self.delta_rot * step;
        self.delta_t += dt;
        self.sample_count += 1;
        self.last_sample_t = Some(sample.t);
        Ok(())
    }

    /// Larger of the accelerometer and gyro bias offsets from the
    /// linearization point.
    pub fn bias_offset(&self, bias: &ImuBias) -> f64 {
        (bias.acc - self.lin_bias.acc).norm().max((bias.gyro - self.lin_bias.gyro).norm())
    }

    /// Deltas re-expressed for a different bias using the stored first-order
    /// Jacobians. The correction is exact in the accelerometer bias and first
    /// order in the gyro bias.
    pub fn bias_corrected_deltas(&self, bias: &ImuBias) -> (Rotation, Vector3<f64>, Vector3<f64>) {
        let dba = bias.acc - self.lin_bias.acc;
        let dbg = bias.gyro - self.lin_bias.gyro;
        let rot = self.delta_rot * so3_exp(&(self.jac(R, 3) * dbg));
        let v = self.delta_v + self.jac(V, 0) * dba + self.jac(V, 3) * dbg;
        let p = self.delta_p + self.jac(P, 0) * dba + self.jac(P, 3) * dbg;
        (rot, v, p)
    }

    /// IMU-only propagation of `state_i` across the preintegrated interval.
    pub fn predict(&self, state_i: &NavState, gravity: &Vector3<f64>) -> NavState {
        let offset = self.bias_offset(&state_i.bias);
        if offset > BIAS_CORRECTION_WARN {
            warn!("bias moved {offset:.3} from its linearization point; first-order correction is unreliable");
        }
        let (d_rot, d_v, d_p) = self.bias_corrected_deltas(&state_i.bias);
        let dt = self.delta_t;
        NavState {
            t: state_i.t + dt,
            rot: state_i.rot * d_rot,
            p: state_i.p + state_i.v * dt + gravity * (0.5 * dt * dt) + state_i.rot * d_p,
            v: state_i.v + gravity * dt + state_i.rot * d_v,
            bias: state_i.bias,
        }
    }

    /// Residual `(r_θ, r_v, r_p)` between two states and its Jacobians with
    /// respect to the 15-dim local coordinates of each state.
    pub fn residual_and_jacobians(
        &self,
        state_i: &NavState,
        state_j: &NavState,
        gravity: &Vector3<f64>,
    ) -> (Vector9, Matrix9x15, Matrix9x15) {
        let dt = self.delta_t;
        let dbg = state_i.bias.gyro - self.lin_bias.gyro;
        let jr_g = self.jac(R, 3);
        let rot_corr_vec = jr_g * dbg;
        if log::log_enabled!(log::Level::Debug) && self.bias_offset(&state_i.bias) > BIAS_CORRECTION_WARN {
            debug!("IMU residual evaluated {:.3} from its bias linearization point", self.bias_offset(&state_i.bias));
        }
        let (d_rot, d_v, d_p) = self.bias_corrected_deltas(&state_i.bias);

        let ri_t = state_i.rot.matrix().transpose();
        let rj = state_j.rot.matrix();
        let err_rot = d_rot.inverse() * state_i.rot.inverse() * state_j.rot;
        let r_rot = so3_log(&err_rot);
        let dv_world = state_j.v - state_i.v - gravity * dt;
        let dp_world = state_j.p - state_i.p - state_i.v * dt - gravity * (0.5 * dt * dt);
        let r_v = ri_t * dv_world - d_v;
        let r_p = ri_t * dp_world - d_p;

        let mut r = Vector9::zeros();
        r.fixed_rows_mut::<3>(R).copy_from(&r_rot);
        r.fixed_rows_mut::<3>(V).copy_from(&r_v);
        r.fixed_rows_mut::<3>(P).copy_from(&r_p);

        let jr_inv = so3_right_jacobian_inv(&r_rot);
        let mut ji = Matrix9x15::zeros();
        let mut jj = Matrix9x15::zeros();
        // Columns: θ 0, p 3, v 6, b_a 9, b_g 12.
        ji.fixed_view_mut::<3, 3>(R, 0)
            .copy_from(&(-jr_inv * rj.transpose() * state_i.rot.matrix()));
        ji.fixed_view_mut::<3, 3>(R, 12).copy_from(
            &(-jr_inv * err_rot.matrix().transpose() * so3_right_jacobian(&rot_corr_vec) * jr_g),
        );
        ji.fixed_view_mut::<3, 3>(V, 0).copy_from(&skew(&(ri_t * dv_world)));
        ji.fixed_view_mut::<3, 3>(V, 6).copy_from(&(-ri_t));
        ji.fixed_view_mut::<3, 3>(V, 9).copy_from(&(-self.jac(V, 0)));
        ji.fixed_view_mut::<3, 3>(V, 12).copy_from(&(-self.jac(V, 3)));
        ji.fixed_view_mut::<3, 3>(P, 0).copy_from(&skew(&(ri_t * dp_world)));
        ji.fixed_view_mut::<3, 3>(P, 3).copy_from(&(-ri_t));
        ji.fixed_view_mut::<3, 3>(P, 6).copy_from(&(-ri_t * dt));
        ji.fixed_view_mut::<3, 3>(P, 9).copy_from(&(-self.jac(P, 0)));
        ji.fixed_view_mut::<3, 3>(P, 12).copy_from(&(-self.jac(P, 3)));

        jj.fixed_view_mut::<3, 3>(R, 0).copy_from(&jr_inv);
        jj.fixed_view_mut::<3, 3>(V, 6).copy_from(&ri_t);
        jj.fixed_view_mut::<3, 3>(P, 3).copy_from(&ri_t);
        (r, ji, jj)
    }

    /// Concatenates `next`, which must start where `self` ends and share the
    /// same linearization bias.
    pub fn compose(&self, next: &PreintegratedImu) -> PreintegratedImu {
        let ra = *self.delta_rot.matrix();
        let rb_t = next.delta_rot.matrix().transpose();
        let dtb = next.delta_t;
        let dv_skew = skew(&next.delta_v);
        let dp_skew = skew(&next.delta_p);

        let mut f = Matrix9::identity();
        f.fixed_view_mut::<3, 3>(R, R).copy_from(&rb_t);
        f.fixed_view_mut::<3, 3>(V, R).copy_from(&(-ra * dv_skew));
        f.fixed_view_mut::<3, 3>(P, R).copy_from(&(-ra * dp_skew));
        f.fixed_view_mut::<3, 3>(P, V)
            .copy_from(&(Matrix3::identity() * dtb));
        let mut g = Matrix9::identity();
        g.fixed_view_mut::<3, 3>(V, V).copy_from(&ra);
        g.fixed_view_mut::<3, 3>(P, P).copy_from(&ra);

        let cov = f * self.cov * f.transpose() + g * next.cov * g.transpose();
        let bias_jacobian = f * self.bias_jacobian + g * next.bias_jacobian;

        PreintegratedImu {
            delta_rot: self.delta_rot * next.delta_rot,
            delta_v: self.delta_v + ra * next.delta_v,
            delta_p: self.delta_p + self.delta_v * dtb + ra * next.delta_p,
            delta_t: self.delta_t + dtb,
            cov: (cov + cov.transpose()) * 0.5,
            bias_jacobian,
            lin_bias: self.lin_bias,
            sample_count: self.sample_count + next.sample_count,
            last_sample_t: next.last_sample_t.or(self.last_sample_t),
        }
    }
}

/// Integrates a sample stream over `[t0, t1]`, holding each sample constant
/// until the next one. Samples outside the interval only contribute through
/// the hold.
pub fn preintegrate_span(
    samples: &[ImuSample],
    t0: f64,
    t1: f64,
    bias: ImuBias,
    params: &ImuNoiseParams,
) -> Result<PreintegratedImu, PreintegrationError> {
    let mut acc = PreintegratedImu::new(bias);
    let start = samples.partition_point(|s| s.t <= t0).saturating_sub(1);
    for (k, s) in samples.iter().enumerate().skip(start) {
        if s.t >= t1 {
            break;
        }
        let seg_start = s.t.max(t0);
        let seg_end = samples.get(k + 1).map_or(t1, |n| n.t.min(t1));
        let dt = seg_end - seg_start;
        if dt > 0.0 {
            acc.integrate(s, dt, params)?;
        }
    }
    Ok(acc)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::state::GRAVITY_ENU;
    use approx::assert_relative_eq;
    use nalgebra::SymmetricEigen;

    fn g() -> Vector3<f64> {
        Vector3::from(GRAVITY_ENU)
    }

    fn run(samples: impl Iterator<Item = (Vector3<f64>, Vector3<f64>)>, dt: f64, params: &ImuNoiseParams) -> PreintegratedImu {
        let mut acc = PreintegratedImu::new(ImuBias::default());
        for (k, (f, w)) in samples.enumerate() {
            let s = ImuSample::new(k as f64 * dt, f, w);
            acc.integrate(&s, dt, params).unwrap();
        }
        acc
    }

    #[test]
    fn stationary_second_is_static() {
        let params = ImuNoiseParams::default().noiseless();
        let f = -g();
        let acc = run(std::iter::repeat((f, Vector3::zeros())).take(200), 0.005, &params);
        assert_relative_eq!(acc.delta_t, 1.0, epsilon = 1e-12);
        let start = NavState::default();
        let end = acc.predict(&start, &g());
        assert!(end.p.norm() < 1e-9);
        assert!(end.v.norm() < 1e-9);
        assert!((end.rot.matrix() - Matrix3::identity()).norm() < 1e-9);
        assert_eq!(acc.cov, Matrix9::zeros());
    }

    #[test]
    fn constant_yaw_rate_closed_form() {
        let params = ImuNoiseParams::default().noiseless();
        let w = Vector3::new(0.0, 0.0, 0.1);
        let acc = run(std::iter::repeat((Vector3::zeros(), w)).take(2000), 0.005, &params);
        let expected = so3_exp(&Vector3::new(0.0, 0.0, 1.0));
        assert!((acc.delta_rot.matrix() - expected.matrix()).norm() < 1e-6);
    }

    #[test]
    fn constant_forward_acceleration() {
        let params = ImuNoiseParams::default().noiseless();
        let f = Vector3::new(1.0, 0.0, 0.0);
        let acc = run(std::iter::repeat((f, Vector3::zeros())).take(400), 0.005, &params);
        assert_relative_eq!(acc.delta_v, Vector3::new(2.0, 0.0, 0.0), epsilon = 1e-9);
        assert!((acc.delta_p - Vector3::new(2.0, 0.0, 0.0)).norm() < 1e-2);
    }

    #[test]
    fn empty_preintegration_predicts_same_state() {
        let acc = PreintegratedImu::new(ImuBias::default());
        let mut s = NavState::default();
        s.v = Vector3::new(1.0, 2.0, 3.0);
        assert_eq!(acc.predict(&s, &g()), s);
    }

    #[test]
    fn rejects_regressing_time_and_large_gaps() {
        let params = ImuNoiseParams::default();
        let mut acc = PreintegratedImu::new(ImuBias::default());
        acc.integrate(&ImuSample::new(1.0, -g(), Vector3::zeros()), 0.01, &params).unwrap();
        let err = acc.integrate(&ImuSample::new(0.5, -g(), Vector3::zeros()), 0.01, &params);
        assert!(matches!(err, Err(PreintegrationError::NonMonotonicTime { .. })));
        let err = acc.integrate(&ImuSample::new(1.1, -g(), Vector3::zeros()), 0.5, &params);
        assert!(matches!(err, Err(PreintegrationError::ExcessiveGap { .. })));
    }

    #[test]
    fn residual_is_zero_at_prediction() {
        let params = ImuNoiseParams::default();
        let samples = (0..300).map(|k| {
            let t = k as f64 * 0.005;
            (Vector3::new(0.3 * t.sin(), 0.2, 9.7), Vector3::new(0.01, -0.02, 0.1 * t.cos()))
        });
        let mut acc = run(samples, 0.005, &params);
        acc.lin_bias = ImuBias::new(Vector3::new(0.01, 0.0, -0.02), Vector3::new(1e-3, 0.0, 0.0));
        let mut si = NavState::default();
        si.rot = so3_exp(&Vector3::new(0.1, -0.2, 1.3));
        si.v = Vector3::new(3.0, -1.0, 0.2);
        si.bias = ImuBias::new(Vector3::new(0.02, 0.01, 0.0), Vector3::new(2e-3, -1e-3, 0.0));
        let sj = acc.predict(&si, &g());
        let (r, _, _) = acc.residual_and_jacobians(&si, &sj, &g());
        assert!(r.norm() < 1e-10, "{r}");
    }

    #[test]
    fn bias_correction_matches_reintegration() {
        let params = ImuNoiseParams::default().noiseless();
        let samples: Vec<_> = (0..200)
            .map(|k| {
                let t = k as f64 * 0.005;
                ImuSample::new(t, Vector3::new(0.5, 0.1 * t, 9.8), Vector3::new(0.05, 0.2 * t, -0.1))
            })
            .collect();
        let base = preintegrate_span(&samples, 0.0, 1.0, ImuBias::default(), &params).unwrap();
        let new_bias = ImuBias::new(Vector3::zeros(), Vector3::new(1e-4, 0.0, 0.0));
        let (rot, v, p) = base.bias_corrected_deltas(&new_bias);
        let full = preintegrate_span(&samples, 0.0, 1.0, new_bias, &params).unwrap();
        assert!((rot.matrix() - full.delta_rot.matrix()).norm() < 1e-6);
        assert!((v - full.delta_v).norm() < 1e-6);
        assert!((p - full.delta_p).norm() < 1e-6);

        // Unchanged bias leaves deltas untouched.
        let (rot, v, p) = base.bias_corrected_deltas(&ImuBias::default());
        assert_eq!(v, base.delta_v);
        assert_eq!(p, base.delta_p);
        assert!((rot.matrix() - base.delta_rot.matrix()).norm() < 1e-15);

        // Far outside the validity region the result is still finite.
        let big = ImuBias::new(Vector3::repeat(0.5), Vector3::repeat(0.5));
        let (rot, v, p) = base.bias_corrected_deltas(&big);
        assert!(rot.matrix().iter().chain(v.iter()).chain(p.iter()).all(|x| x.is_finite()));
    }

    #[test]
    fn composition_matches_single_accumulator() {
        let params = ImuNoiseParams::default();
        let samples: Vec<_> = (0..400)
            .map(|k| {
                let t = k as f64 * 0.005;
                ImuSample::new(
                    t,
                    Vector3::new(0.4 * (0.7 * t).sin(), 0.3, 9.81),
                    Vector3::new(0.02, -0.01 * t, 0.15),
                )
            })
            .collect();
        let bias = ImuBias::new(Vector3::new(0.01, 0.0, 0.0), Vector3::new(0.0, 1e-3, 0.0));
        let whole = preintegrate_span(&samples, 0.0, 2.0, bias, &params).unwrap();
        let a = preintegrate_span(&samples, 0.0, 1.0, bias, &params).unwrap();
        let b = preintegrate_span(&samples, 1.0, 2.0, bias, &params).unwrap();
        let ab = a.compose(&b);
        assert!((ab.delta_rot.matrix() - whole.delta_rot.matrix()).norm() < 1e-9);
        assert!((ab.delta_v - whole.delta_v).norm() < 1e-9);
        assert!((ab.delta_p - whole.delta_p).norm() < 1e-9);
        assert!((ab.cov - whole.cov).norm() / whole.cov.norm() < 1e-9);
        assert!((ab.bias_jacobian - whole.bias_jacobian).norm() < 1e-9);
    }

    #[test]
    fn covariance_stays_psd_and_grows() {
        let params = ImuNoiseParams::default();
        let mut acc = PreintegratedImu::new(ImuBias::default());
        let mut prev_trace = 0.0;
        for k in 0..400 {
            let t = k as f64 * 0.005;
            let s = ImuSample::new(t, Vector3::new(1.0, (3.0 * t).sin(), 9.8), Vector3::new(0.3, 0.0, -0.4));
            acc.integrate(&s, 0.005, &params).unwrap();
            let eig = SymmetricEigen::new(acc.cov).eigenvalues;
            assert!(eig.min() >= -1e-12);
            assert!(acc.cov.trace() > prev_trace);
            prev_trace = acc.cov.trace();
        }
    }
}
