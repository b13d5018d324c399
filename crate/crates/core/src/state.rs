//! Measurement and state types shared across the crate.

use nalgebra::{Matrix3, Vector3};
use serde::{Deserialize, Serialize};

use crate::lie::Rotation;

/// Standard gravity in the local ENU navigation frame.
pub const GRAVITY_ENU: [f64; 3] = [0.0, 0.0, -9.80665];

/// Accelerometer and gyroscope biases.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct ImuBias {
    /// m/s²
    pub acc: Vector3<f64>,
    /// rad/s
    pub gyro: Vector3<f64>,
}

impl ImuBias {
    pub fn new(acc: Vector3<f64>, gyro: Vector3<f64>) -> Self {
        Self { acc, gyro }
    }

    pub fn is_finite(&self) -> bool {
        self.acc.iter().chain(self.gyro.iter()).all(|x| x.is_finite())
    }

    /// True when both biases stay below the given magnitude bounds.
    pub fn within(&self, max_acc: f64, max_gyro: f64) -> bool {
        self.acc.norm() <= max_acc && self.gyro.norm() <= max_gyro
    }
}

/// Navigation state at one epoch: attitude (body → ENU), position,
/// velocity and IMU biases.
#[derive(Debug, Clone, PartialEq)]
pub struct NavState {
    pub t: f64,
    pub rot: Rotation,
    /// m, ENU
    pub p: Vector3<f64>,
    /// m/s, ENU
    pub v: Vector3<f64>,
    pub bias: ImuBias,
}

impl Default for NavState {
    fn default() -> Self {
        Self {
            t: 0.0,
            rot: Rotation::identity(),
            p: Vector3::zeros(),
            v: Vector3::zeros(),
            bias: ImuBias::default(),
        }
    }
}

impl NavState {
    pub fn is_finite(&self) -> bool {
        self.t.is_finite()
            && self.p.iter().chain(self.v.iter()).all(|x| x.is_finite())
            && self.bias.is_finite()
            && self.rot.matrix().iter().all(|x| x.is_finite())
    }
}

/// One IMU sample: specific force and angular rate in the body frame.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ImuSample {
    #[serde(rename = "t_gpst_s")]
    pub t: f64,
    #[serde(rename = "acc_x")]
    pub ax: f64,
    #[serde(rename = "acc_y")]
    pub ay: f64,
    #[serde(rename = "acc_z")]
    pub az: f64,
    #[serde(rename = "gyr_x")]
    pub gx: f64,
    #[serde(rename = "gyr_y")]
    pub gy: f64,
    #[serde(rename = "gyr_z")]
    pub gz: f64,
}

impl ImuSample {
    pub fn new(t: f64, accel: Vector3<f64>, gyro: Vector3<f64>) -> Self {
        Self {
            t,
            ax: accel.x,
            ay: accel.y,
            az: accel.z,
            gx: gyro.x,
            gy: gyro.y,
            gz: gyro.z,
        }
    }

    #[inline]
    pub fn accel(&self) -> Vector3<f64> {
        Vector3::new(self.ax, self.ay, self.az)
    }

    #[inline]
    pub fn gyro(&self) -> Vector3<f64> {
        Vector3::new(self.gx, self.gy, self.gz)
    }

    pub fn is_finite(&self) -> bool {
        [self.t, self.ax, self.ay, self.az, self.gx, self.gy, self.gz]
            .iter()
            .all(|x| x.is_finite())
    }
}

/// Solution quality reported by the GNSS receiver. Kept for diagnostics; it
/// does not gate fusion.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum GnssQuality {
    Fix,
    Float,
    #[default]
    Single,
}

/// A processed GNSS position with covariance, in the local ENU frame.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GnssFix {
    pub t: f64,
    pub p: Vector3<f64>,
    /// m²
    pub cov: Matrix3<f64>,
    pub quality: GnssQuality,
}

impl GnssFix {
    pub fn new(t: f64, p: Vector3<f64>, cov: Matrix3<f64>) -> Self {
        Self {
            t,
            p,
            cov,
            quality: GnssQuality::Single,
        }
    }
}

/// Continuous-time IMU noise model.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ImuNoiseParams {
    /// m/s²/√Hz
    pub accel_noise_density: f64,
    /// rad/s/√Hz
    pub gyro_noise_density: f64,
    /// m/s³/√Hz
    pub accel_bias_rw: f64,
    /// rad/s²/√Hz
    pub gyro_bias_rw: f64,
    /// m/s², navigation frame
    pub gravity: [f64; 3],
    /// Largest tolerated interval between consecutive IMU samples, s.
    #[serde(default = "default_max_imu_gap")]
    pub max_imu_gap: f64,
}

fn default_max_imu_gap() -> f64 {
    0.1
}

impl Default for ImuNoiseParams {
    /// Placeholder values for an Xsens MTi-10-class MEMS IMU. Confirm them
    /// against the sensor documentation before processing real data.
    fn default() -> Self {
        Self {
            accel_noise_density: 6.0e-4,
            gyro_noise_density: 5.2e-4,
            accel_bias_rw: 1.0e-4,
            gyro_bias_rw: 1.0e-5,
            gravity: GRAVITY_ENU,
            max_imu_gap: default_max_imu_gap(),
        }
    }
}

impl ImuNoiseParams {
    pub fn gravity_vector(&self) -> Vector3<f64> {
        Vector3::from(self.gravity)
    }

    /// Same parameters with every noise density set to zero.
    pub fn noiseless(&self) -> Self {
        Self {
            accel_noise_density: 0.0,
            gyro_noise_density: 0.0,
            accel_bias_rw: 0.0,
            gyro_bias_rw: 0.0,
            ..*self
        }
    }

    /// Checks positivity and the gravity magnitude window. Set
    /// `allow_any_gravity` to accept unusual gravity vectors.
    pub fn validate(&self, allow_any_gravity: bool) -> Result<(), String> {
        let densities = [
            self.accel_noise_density,
            self.gyro_noise_density,
            self.accel_bias_rw,
            self.gyro_bias_rw,
        ];
        if densities.iter().any(|d| !(d.is_finite() && *d > 0.0)) {
            return Err("noise densities must be positive".into());
        }
        let g = self.gravity_vector().norm();
        if !allow_any_gravity && !(9.7..=9.9).contains(&g) {
            return Err(format!("gravity magnitude {g} outside [9.7, 9.9] m/s²"));
        }
        if !(self.max_imu_gap > 0.0) {
            return Err("max_imu_gap must be positive".into());
        }
        Ok(())
    }
}
