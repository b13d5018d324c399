//! Dataset files: CSV streams, anchor metadata and geodetic helpers.
//!
//! A dataset directory holds `imu.csv`, `gnss.csv`, `meta.csv`, optionally
//! `gt.csv` and optionally `imu_params.json`. Positions are ENU metres
//! relative to the anchor declared in `meta.csv`; times are GPST seconds.

use std::fs::File;
use std::io::Write;
use std::path::{Path, PathBuf};

use nalgebra::{Matrix3, Vector3};
use serde::{de::DeserializeOwned, Deserialize, Serialize};
use thiserror::Error;

use crate::engine::{OutputEstimate, OutputSource};
use crate::state::{GnssFix, GnssQuality, ImuNoiseParams, ImuSample};

pub const IMU_FILE: &str = "imu.csv";
pub const GNSS_FILE: &str = "gnss.csv";
pub const GT_FILE: &str = "gt.csv";
pub const META_FILE: &str = "meta.csv";
pub const IMU_PARAMS_FILE: &str = "imu_params.json";

const IMU_HEADER: &[&str] = &["t_gpst_s", "acc_x", "acc_y", "acc_z", "gyr_x", "gyr_y", "gyr_z"];
const GNSS_HEADER: &[&str] = &[
    "t_gpst_s", "east_m", "north_m", "up_m", "cov_ee", "cov_nn", "cov_uu", "cov_en", "cov_eu", "cov_nu", "quality",
];
const GT_HEADER: &[&str] = &["t_gpst_s", "east_m", "north_m", "up_m"];
const META_HEADER: &[&str] = &["anchor_lat_deg", "anchor_lon_deg", "anchor_alt_m"];
const TRAJECTORY_HEADER: &[&str] = &[
    "t_gpst_s", "east_m", "north_m", "up_m", "vel_e", "vel_n", "vel_u", "roll_rad", "pitch_rad", "yaw_rad", "source",
    "latency_s",
];

#[derive(Debug, Error)]
pub enum IoError {
    #[error("{path}:{line}: {reason}")]
    Parse { path: PathBuf, line: u64, reason: String },
    #[error("{path}:{line}: timestamps must increase")]
    NonMonotonicTime { path: PathBuf, line: u64 },
    #[error("{path}: {source}")]
    File { path: PathBuf, source: std::io::Error },
    #[error("{path}: {source}")]
    Json { path: PathBuf, source: serde_json::Error },
    #[error("{path}: {source}")]
    Csv { path: PathBuf, source: csv::Error },
}

impl IoError {
    fn file(path: &Path, source: std::io::Error) -> Self {
        IoError::File {
            path: path.to_path_buf(),
            source,
        }
    }
    fn csv(path: &Path, source: csv::Error) -> Self {
        IoError::Csv {
            path: path.to_path_buf(),
            source,
        }
    }
}

/// Local ENU origin.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Anchor {
    #[serde(rename = "anchor_lat_deg", alias = "lat_deg")]
    pub lat_deg: f64,
    #[serde(rename = "anchor_lon_deg", alias = "lon_deg")]
    pub lon_deg: f64,
    #[serde(rename = "anchor_alt_m", alias = "alt_m")]
    pub alt_m: f64,
}

impl Default for Anchor {
    fn default() -> Self {
        Self {
            lat_deg: 22.3,
            lon_deg: 114.18,
            alt_m: 0.0,
        }
    }
}

const WGS84_A: f64 = 6_378_137.0;
const WGS84_F: f64 = 1.0 / 298.257_223_563;

/// WGS84 geodetic coordinates to ECEF, m.
pub fn geodetic_to_ecef(lat_deg: f64, lon_deg: f64, alt_m: f64) -> Vector3<f64> {
    let e2 = WGS84_F * (2.0 - WGS84_F);
    let (lat, lon) = (lat_deg.to_radians(), lon_deg.to_radians());
    let n = WGS84_A / (1.0 - e2 * lat.sin().powi(2)).sqrt();
    Vector3::new(
        (n + alt_m) * lat.cos() * lon.cos(),
        (n + alt_m) * lat.cos() * lon.sin(),
        (n * (1.0 - e2) + alt_m) * lat.sin(),
    )
}

/// Geodetic point in the local ENU frame of `anchor`.
pub fn geodetic_to_enu(lat_deg: f64, lon_deg: f64, alt_m: f64, anchor: &Anchor) -> Vector3<f64> {
    let d = geodetic_to_ecef(lat_deg, lon_deg, alt_m) - geodetic_to_ecef(anchor.lat_deg, anchor.lon_deg, anchor.alt_m);
    let (lat, lon) = (anchor.lat_deg.to_radians(), anchor.lon_deg.to_radians());
    let (sl, cl) = lat.sin_cos();
    let (so, co) = lon.sin_cos();
    let r = Matrix3::new(-so, co, 0.0, -sl * co, -sl * so, cl, cl * co, cl * so, sl);
    r * d
}

/// One ground-truth position.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GtSample {
    #[serde(rename = "t_gpst_s")]
    pub t: f64,
    #[serde(rename = "east_m")]
    pub east: f64,
    #[serde(rename = "north_m")]
    pub north: f64,
    #[serde(rename = "up_m")]
    pub up: f64,
}

impl GtSample {
    pub fn new(t: f64, p: Vector3<f64>) -> Self {
        Self {
            t,
            east: p.x,
            north: p.y,
            up: p.z,
        }
    }
    pub fn p(&self) -> Vector3<f64> {
        Vector3::new(self.east, self.north, self.up)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
struct GnssRow {
    t_gpst_s: f64,
    east_m: f64,
    north_m: f64,
    up_m: f64,
    cov_ee: f64,
    cov_nn: f64,
    cov_uu: f64,
    cov_en: f64,
    cov_eu: f64,
    cov_nu: f64,
    quality: GnssQuality,
}

impl From<&GnssFix> for GnssRow {
    fn from(f: &GnssFix) -> Self {
        Self {
            t_gpst_s: f.t,
            east_m: f.p.x,
            north_m: f.p.y,
            up_m: f.p.z,
            cov_ee: f.cov[(0, 0)],
            cov_nn: f.cov[(1, 1)],
            cov_uu: f.cov[(2, 2)],
            cov_en: f.cov[(0, 1)],
            cov_eu: f.cov[(0, 2)],
            cov_nu: f.cov[(1, 2)],
            quality: f.quality,
        }
    }
}

impl From<GnssRow> for GnssFix {
    fn from(r: GnssRow) -> Self {
        let cov = Matrix3::new(
            r.cov_ee, r.cov_en, r.cov_eu, r.cov_en, r.cov_nn, r.cov_nu, r.cov_eu, r.cov_nu, r.cov_uu,
        );
        GnssFix {
            t: r.t_gpst_s,
            p: Vector3::new(r.east_m, r.north_m, r.up_m),
            cov,
            quality: r.quality,
        }
    }
}

/// One row of an estimated trajectory file.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TrajectoryRow {
    pub t_gpst_s: f64,
    pub east_m: f64,
    pub north_m: f64,
    pub up_m: f64,
    pub vel_e: f64,
    pub vel_n: f64,
    pub vel_u: f64,
    pub roll_rad: f64,
    pub pitch_rad: f64,
    pub yaw_rad: f64,
    pub source: OutputSource,
    pub latency_s: f64,
}

impl From<&OutputEstimate> for TrajectoryRow {
    fn from(o: &OutputEstimate) -> Self {
        let (roll, pitch, yaw) = o.state.rot.euler_angles();
        Self {
            t_gpst_s: o.t,
            east_m: o.state.p.x,
            north_m: o.state.p.y,
            up_m: o.state.p.z,
            vel_e: o.state.v.x,
            vel_n: o.state.v.y,
            vel_u: o.state.v.z,
            roll_rad: roll,
            pitch_rad: pitch,
            yaw_rad: yaw,
            source: o.source,
            latency_s: o.latency,
        }
    }
}

fn read_rows<T: DeserializeOwned>(path: &Path, header: &[&str]) -> Result<Vec<(u64, T)>, IoError> {
    let file = File::open(path).map_err(|e| IoError::file(path, e))?;
    let mut reader = csv::ReaderBuilder::new().flexible(true).trim(csv::Trim::All).from_reader(file);
    let headers = reader.headers().map_err(|e| IoError::csv(path, e))?.clone();
    if headers.iter().collect::<Vec<_>>() != header {
        return Err(IoError::Parse {
            path: path.to_path_buf(),
            line: 1,
            reason: format!("expected header `{}`", header.join(",")),
        });
    }
    let mut out = Vec::new();
    for record in reader.records() {
        let record = record.map_err(|e| IoError::csv(path, e))?;
        let line = record.position().map_or(0, |p| p.line());
        if record.len() != header.len() {
            return Err(IoError::Parse {
                path: path.to_path_buf(),
                line,
                reason: format!("expected {} fields, found {}", header.len(), record.len()),
            });
        }
        let row: T = record.deserialize(Some(&headers)).map_err(|e| IoError::Parse {
            path: path.to_path_buf(),
            line,
            reason: e.to_string(),
        })?;
        out.push((line, row));
    }
    Ok(out)
}

fn check_times(path: &Path, rows: &[(u64, f64)], strict: bool) -> Result<(), IoError> {
    for w in rows.windows(2) {
        let bad = if strict { w[1].1 <= w[0].1 } else { w[1].1 < w[0].1 };
        if bad || !w[1].1.is_finite() {
            return Err(IoError::NonMonotonicTime {
                path: path.to_path_buf(),
                line: w[1].0,
            });
        }
    }
    Ok(())
}

pub fn read_imu(path: &Path) -> Result<Vec<ImuSample>, IoError> {
    let rows: Vec<(u64, ImuSample)> = read_rows(path, IMU_HEADER)?;
    let times: Vec<(u64, f64)> = rows.iter().map(|(l, r)| (*l, r.t)).collect();
    check_times(path, &times, true)?;
    Ok(rows.into_iter().map(|(_, r)| r).collect())
}

pub fn read_gnss(path: &Path) -> Result<Vec<GnssFix>, IoError> {
    let rows: Vec<(u64, GnssRow)> = read_rows(path, GNSS_HEADER)?;
    let times: Vec<(u64, f64)> = rows.iter().map(|(l, r)| (*l, r.t_gpst_s)).collect();
    check_times(path, &times, false)?;
    Ok(rows.into_iter().map(|(_, r)| r.into()).collect())
}

pub fn read_gt(path: &Path) -> Result<Vec<GtSample>, IoError> {
    let rows: Vec<(u64, GtSample)> = read_rows(path, GT_HEADER)?;
    let times: Vec<(u64, f64)> = rows.iter().map(|(l, r)| (*l, r.t)).collect();
    check_times(path, &times, true)?;
    Ok(rows.into_iter().map(|(_, r)| r).collect())
}

pub fn read_meta(path: &Path) -> Result<Anchor, IoError> {
    let rows: Vec<(u64, Anchor)> = read_rows(path, META_HEADER)?;
    match rows.as_slice() {
        [(_, a)] => Ok(*a),
        _ => Err(IoError::Parse {
            path: path.to_path_buf(),
            line: 2,
            reason: "expected exactly one anchor row".into(),
        }),
    }
}

pub fn read_trajectory(path: &Path) -> Result<Vec<TrajectoryRow>, IoError> {
    let rows: Vec<(u64, TrajectoryRow)> = read_rows(path, TRAJECTORY_HEADER)?;
    let times: Vec<(u64, f64)> = rows.iter().map(|(l, r)| (*l, r.t_gpst_s)).collect();
    check_times(path, &times, false)?;
    Ok(rows.into_iter().map(|(_, r)| r).collect())
}

pub fn read_imu_params(path: &Path) -> Result<ImuNoiseParams, IoError> {
    let text = std::fs::read_to_string(path).map_err(|e| IoError::file(path, e))?;
    serde_json::from_str(&text).map_err(|source| IoError::Json {
        path: path.to_path_buf(),
        source,
    })
}

fn write_rows<T: Serialize>(path: &Path, header: &[&str], rows: impl IntoIterator<Item = T>) -> Result<(), IoError> {
    let file = File::create(path).map_err(|e| IoError::file(path, e))?;
    let mut w = csv::WriterBuilder::new().has_headers(false).from_writer(file);
    w.write_record(header).map_err(|e| IoError::csv(path, e))?;
    for r in rows {
        w.serialize(r).map_err(|e| IoError::csv(path, e))?;
    }
    w.flush().map_err(|e| IoError::file(path, e))
}

pub fn write_imu(path: &Path, imu: &[ImuSample]) -> Result<(), IoError> {
    write_rows(path, IMU_HEADER, imu)
}

pub fn write_gnss(path: &Path, gnss: &[GnssFix]) -> Result<(), IoError> {
    write_rows(path, GNSS_HEADER, gnss.iter().map(GnssRow::from))
}

pub fn write_gt(path: &Path, gt: &[GtSample]) -> Result<(), IoError> {
    write_rows(path, GT_HEADER, gt)
}

pub fn write_meta(path: &Path, anchor: &Anchor) -> Result<(), IoError> {
    write_rows(path, META_HEADER, [anchor])
}

pub fn write_trajectory(path: &Path, estimates: &[OutputEstimate]) -> Result<(), IoError> {
    write_rows(path, TRAJECTORY_HEADER, estimates.iter().map(TrajectoryRow::from))
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<(), IoError> {
    let mut text = serde_json::to_string_pretty(value).map_err(|source| IoError::Json {
        path: path.to_path_buf(),
        source,
    })?;
    text.push('\n');
    let mut f = File::create(path).map_err(|e| IoError::file(path, e))?;
    f.write_all(text.as_bytes()).map_err(|e| IoError::file(path, e))
}

/// Contents of a dataset directory.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub imu: Vec<ImuSample>,
    pub gnss: Vec<GnssFix>,
    /// Empty when the directory has no `gt.csv`.
    pub gt: Vec<GtSample>,
    pub anchor: Anchor,
    pub imu_params: ImuNoiseParams,
}

impl Dataset {
    /// Reads every file of a dataset directory; fails without partial
    /// results on the first malformed file.
    pub fn read(dir: &Path) -> Result<Self, IoError> {
        let imu = read_imu(&dir.join(IMU_FILE))?;
        let gnss = read_gnss(&dir.join(GNSS_FILE))?;
        let gt_path = dir.join(GT_FILE);
        let gt = if gt_path.exists() { read_gt(&gt_path)? } else { Vec::new() };
        let anchor = read_meta(&dir.join(META_FILE))?;
        let params_path = dir.join(IMU_PARAMS_FILE);
        let imu_params = if params_path.exists() {
            read_imu_params(&params_path)?
        } else {
            ImuNoiseParams::default()
        };
        Ok(Self {
            imu,
            gnss,
            gt,
            anchor,
            imu_params,
        })
    }

    pub fn write(&self, dir: &Path) -> Result<(), IoError> {
        std::fs::create_dir_all(dir).map_err(|e| IoError::file(dir, e))?;
        write_imu(&dir.join(IMU_FILE), &self.imu)?;
        write_gnss(&dir.join(GNSS_FILE), &self.gnss)?;
        write_gt(&dir.join(GT_FILE), &self.gt)?;
        write_meta(&dir.join(META_FILE), &self.anchor)?;
        write_json(&dir.join(IMU_PARAMS_FILE), &self.imu_params)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    #[test]
    fn anchor_maps_to_origin() {
        let a = Anchor::default();
        assert!(geodetic_to_enu(a.lat_deg, a.lon_deg, a.alt_m, &a).norm() < 1e-6);
        let up = geodetic_to_enu(a.lat_deg, a.lon_deg, a.alt_m + 10.0, &a);
        assert_relative_eq!(up, Vector3::new(0.0, 0.0, 10.0), epsilon = 1e-6);
        // One arc-second of latitude is roughly 30.7 m near 22°N.
        let north = geodetic_to_enu(a.lat_deg + 1.0 / 3600.0, a.lon_deg, a.alt_m, &a);
        assert!((north.y - 30.7).abs() < 0.2 && north.x.abs() < 1e-6);
    }

    #[test]
    fn short_row_reports_line() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("imu.csv");
        std::fs::write(&path, "t_gpst_s,acc_x,acc_y,acc_z,gyr_x,gyr_y,gyr_z\n0,0,0,9.8,0,0,0\n0.01,0,0,9.8\n").unwrap();
        match read_imu(&path) {
            Err(IoError::Parse { line, .. }) => assert_eq!(line, 3),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn out_of_order_gnss() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("gnss.csv");
        let fixes = vec![
            GnssFix::new(2.0, Vector3::zeros(), Matrix3::identity()),
            GnssFix::new(1.0, Vector3::zeros(), Matrix3::identity()),
        ];
        write_gnss(&path, &fixes).unwrap();
        assert!(matches!(read_gnss(&path), Err(IoError::NonMonotonicTime { line: 3, .. })));
    }

    #[test]
    fn bad_header_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("gt.csv");
        std::fs::write(&path, "t,e,n,u\n0,0,0,0\n").unwrap();
        assert!(matches!(read_gt(&path), Err(IoError::Parse { line: 1, .. })));
    }
}
