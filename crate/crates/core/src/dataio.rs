//! Dataset and trajectory files.
//!
//! A dataset is a directory holding:
//!
//! | file              | columns                                              |
//! |-------------------|------------------------------------------------------|
//! | `dataset.toml`    | metadata descriptor ([`DatasetMeta`])                |
//! | `imu.csv`         | `t,sx,sy,sz,wx,wy,wz` (s, m/s², rad/s, body frame)    |
//! | `mag.csv`         | `t,m0x,m0y,m0z,...`; 3N readings in µT, sensor order |
//! | `groundtruth.csv` | `t,px,py,pz,qw,qx,qy,qz[,vx,vy,vz]` (optional)        |
//! | geometry file     | see [`crate::array`]                                  |
//!
//! Numbers are written with Rust's shortest round-trip formatting, so a
//! write/read cycle reproduces every value bit for bit. `NaN` is accepted in
//! `mag.csv` and marks an unusable reading.
//!
//! The trajectory file written by the filter is a CSV with
//! `t,px,py,pz,qw,qx,qy,qz,vx,vy,vz,P0,...,P{n-1}` where `P*` is the diagonal
//! of the error covariance in the order (δp, δv, ε, δo_a, δo_ω, δθ).

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use nalgebra::{DVector, Vector3};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::array::{ArrayGeometry, GeometryError};
use crate::geom::UnitQuaternion;
use crate::strapdown::ImuSample;

pub const META_FILE: &str = "dataset.toml";
pub const IMU_FILE: &str = "imu.csv";
pub const MAG_FILE: &str = "mag.csv";
pub const TRUTH_FILE: &str = "groundtruth.csv";
pub const GEOMETRY_FILE: &str = "geometry.txt";

#[derive(Debug, Error)]
pub enum DataError {
    #[error("cannot access {path}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}: {msg}")]
    Schema { path: String, msg: String },
    #[error("{path} row {row}: {msg}")]
    Row {
        path: String,
        row: usize,
        msg: String,
    },
    #[error("{path} row {row}: timestamp {t} is not after the previous row ({prev})")]
    NonMonotonic {
        path: String,
        row: usize,
        t: f64,
        prev: f64,
    },
    #[error("{path} row {row}: expected {expected} values, found {found}")]
    Width {
        path: String,
        row: usize,
        expected: usize,
        found: usize,
    },
    #[error(transparent)]
    Geometry(#[from] GeometryError),
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> DataError + '_ {
    move |source| DataError::Io {
        path: path.display().to_string(),
        source,
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct Units {
    pub time: String,
    pub position: String,
    pub specific_force: String,
    pub angular_rate: String,
    pub magnetic_field: String,
}

impl Default for Units {
    fn default() -> Self {
        Self {
            time: "s".into(),
            position: "m".into(),
            specific_force: "m/s^2".into(),
            angular_rate: "rad/s".into(),
            magnetic_field: "uT".into(),
        }
    }
}

/// Sensor noise figures recorded with the data, if known.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SensorNoiseMeta {
    pub accel_noise_density: Option<f64>,
    pub gyro_noise_density: Option<f64>,
    pub accel_bias_rw: Option<f64>,
    pub gyro_bias_rw: Option<f64>,
    pub mag_sigma: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DatasetMeta {
    pub name: String,
    pub sensor_count: usize,
    pub imu_rate_hz: f64,
    pub mag_rate_hz: f64,
    /// Geometry file, relative to the dataset directory.
    pub geometry: String,
    /// Max |Δt| for nearest-neighbour stream association, s.
    pub time_tolerance: f64,
    pub units: Units,
    pub noise: SensorNoiseMeta,
}

impl Default for DatasetMeta {
    fn default() -> Self {
        Self {
            name: String::new(),
            sensor_count: 0,
            imu_rate_hz: 100.0,
            mag_rate_hz: 100.0,
            geometry: GEOMETRY_FILE.into(),
            time_tolerance: 1e-3,
            units: Units::default(),
            noise: SensorNoiseMeta::default(),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct MagSnapshot {
    pub t: f64,
    /// Stacked readings `[y_1; ...; y_N]`, µT, body frame.
    pub values: DVector<f64>,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct TruthSample {
    pub t: f64,
    pub p: Vector3<f64>,
    pub q: UnitQuaternion,
    pub v: Option<Vector3<f64>>,
}

/// Per-IMU-sample indices into the other streams.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct Alignment {
    pub mag: Vec<Option<usize>>,
    pub truth: Vec<Option<usize>>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub meta: DatasetMeta,
    pub geometry: ArrayGeometry,
    pub imu: Vec<ImuSample>,
    pub mag: Vec<MagSnapshot>,
    pub truth: Option<Vec<TruthSample>>,
}

fn nearest_within(times: &[f64], t: f64, tol: f64) -> Option<usize> {
    let i = times.partition_point(|&x| x < t);
    let mut best: Option<(usize, f64)> = None;
    for j in [i.wrapping_sub(1), i] {
        if let Some(&x) = times.get(j) {
            let d = (x - t).abs();
            if d <= tol && best.is_none_or(|(_, bd)| d < bd) {
                best = Some((j, d));
            }
        }
    }
    best.map(|(j, _)| j)
}

fn check_monotone(path: &str, times: impl Iterator<Item = f64>) -> Result<(), DataError> {
    let mut prev = f64::NEG_INFINITY;
    for (row, t) in times.enumerate() {
        if !t.is_finite() {
            return Err(DataError::Row {
                path: path.into(),
                row: row + 1,
                msg: format!("non-finite timestamp {t}"),
            });
        }
        if t <= prev {
            return Err(DataError::NonMonotonic {
                path: path.into(),
                row: row + 1,
                t,
                prev,
            });
        }
        prev = t;
    }
    Ok(())
}

impl Dataset {
    pub fn sensor_count(&self) -> usize {
        self.geometry.len()
    }

    /// Checks stream invariants; row numbers are 1-based data rows.
    pub fn validate(&self) -> Result<(), DataError> {
        if self.imu.len() < 2 {
            return Err(DataError::Schema {
                path: IMU_FILE.into(),
                msg: format!("need at least 2 IMU samples, found {}", self.imu.len()),
            });
        }
        check_monotone(IMU_FILE, self.imu.iter().map(|u| u.t))?;
        for (row, u) in self.imu.iter().enumerate() {
            if !(u
                .specific_force
                .iter()
                .chain(u.angular_rate.iter())
                .all(|x| x.is_finite()))
            {
                return Err(DataError::Row {
                    path: IMU_FILE.into(),
                    row: row + 1,
                    msg: "non-finite IMU value".into(),
                });
            }
        }
        check_monotone(MAG_FILE, self.mag.iter().map(|m| m.t))?;
        let width = 3 * self.sensor_count();
        if self.meta.sensor_count != 0 && self.meta.sensor_count != self.sensor_count() {
            return Err(DataError::Schema {
                path: META_FILE.into(),
                msg: format!(
                    "sensor_count {} disagrees with geometry ({} sensors)",
                    self.meta.sensor_count,
                    self.sensor_count()
                ),
            });
        }
        for (row, m) in self.mag.iter().enumerate() {
            if m.values.len() != width {
                return Err(DataError::Width {
                    path: MAG_FILE.into(),
                    row: row + 1,
                    expected: width,
                    found: m.values.len(),
                });
            }
        }
        if let Some(truth) = &self.truth {
            check_monotone(TRUTH_FILE, truth.iter().map(|s| s.t))?;
        }
        Ok(())
    }

    /// Nearest-neighbour association of magnetometer and truth rows to IMU samples.
    pub fn align(&self) -> Alignment {
        let tol = self.meta.time_tolerance;
        let mag_t: Vec<f64> = self.mag.iter().map(|m| m.t).collect();
        let truth_t: Vec<f64> = self
            .truth
            .as_ref()
            .map(|t| t.iter().map(|s| s.t).collect())
            .unwrap_or_default();
        Alignment {
            mag: self
                .imu
                .iter()
                .map(|u| nearest_within(&mag_t, u.t, tol))
                .collect(),
            truth: self
                .imu
                .iter()
                .map(|u| nearest_within(&truth_t, u.t, tol))
                .collect(),
        }
    }

    pub fn duration(&self) -> f64 {
        match (self.imu.first(), self.imu.last()) {
            (Some(a), Some(b)) => b.t - a.t,
            _ => 0.0,
        }
    }
}

fn fmt_row(out: &mut impl Write, values: impl IntoIterator<Item = f64>) -> std::io::Result<()> {
    let mut first = true;
    for v in values {
        if !first {
            out.write_all(b",")?;
        }
        first = false;
        write!(out, "{v}")?;
    }
    out.write_all(b"\n")
}

fn create(path: &Path) -> Result<BufWriter<File>, DataError> {
    Ok(BufWriter::new(File::create(path).map_err(io_err(path))?))
}

pub fn save_dataset(ds: &Dataset, dir: &Path) -> Result<(), DataError> {
    std::fs::create_dir_all(dir).map_err(io_err(dir))?;
    let mut meta = ds.meta.clone();
    meta.sensor_count = ds.sensor_count();
    if meta.geometry.is_empty() {
        meta.geometry = GEOMETRY_FILE.into();
    }
    let meta_path = dir.join(META_FILE);
    let text = toml::to_string_pretty(&meta).map_err(|e| DataError::Schema {
        path: meta_path.display().to_string(),
        msg: e.to_string(),
    })?;
    std::fs::write(&meta_path, text).map_err(io_err(&meta_path))?;
    ds.geometry.save(&dir.join(&meta.geometry))?;

    let path = dir.join(IMU_FILE);
    let mut w = create(&path)?;
    (|| -> std::io::Result<()> {
        writeln!(w, "t,sx,sy,sz,wx,wy,wz")?;
        for u in &ds.imu {
            fmt_row(
                &mut w,
                std::iter::once(u.t)
                    .chain(u.specific_force.iter().copied())
                    .chain(u.angular_rate.iter().copied()),
            )?;
        }
        w.flush()
    })()
    .map_err(io_err(&path))?;

    let path = dir.join(MAG_FILE);
    let mut w = create(&path)?;
    (|| -> std::io::Result<()> {
        let mut header = String::from("t");
        for s in &ds.geometry.sensors {
            for axis in ["x", "y", "z"] {
                header.push_str(&format!(",m{}{axis}", s.id));
            }
        }
        writeln!(w, "{header}")?;
        for m in &ds.mag {
            fmt_row(&mut w, std::iter::once(m.t).chain(m.values.iter().copied()))?;
        }
        w.flush()
    })()
    .map_err(io_err(&path))?;

    if let Some(truth) = &ds.truth {
        let path = dir.join(TRUTH_FILE);
        let mut w = create(&path)?;
        let with_v = truth.iter().all(|s| s.v.is_some());
        (|| -> std::io::Result<()> {
            if with_v {
                writeln!(w, "t,px,py,pz,qw,qx,qy,qz,vx,vy,vz")?;
            } else {
                writeln!(w, "t,px,py,pz,qw,qx,qy,qz")?;
            }
            for s in truth {
                let head = [s.t, s.p.x, s.p.y, s.p.z, s.q.w, s.q.x, s.q.y, s.q.z];
                match s.v.filter(|_| with_v) {
                    Some(v) => fmt_row(&mut w, head.into_iter().chain(v.iter().copied()))?,
                    None => fmt_row(&mut w, head)?,
                }
            }
            w.flush()
        })()
        .map_err(io_err(&path))?;
    }
    Ok(())
}

/// Reads a numeric CSV with a header row; returns rows of floats.
fn read_table(path: &Path) -> Result<(Vec<String>, Vec<Vec<f64>>), DataError> {
    let display = path.display().to_string();
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(true)
        .flexible(true)
        .trim(csv::Trim::All)
        .comment(Some(b'#'))
        .from_path(path)
        .map_err(|e| match e.into_kind() {
            csv::ErrorKind::Io(source) => DataError::Io {
                path: display.clone(),
                source,
            },
            other => DataError::Schema {
                path: display.clone(),
                msg: format!("{other:?}"),
            },
        })?;
    let header: Vec<String> = reader
        .headers()
        .map_err(|e| DataError::Schema {
            path: display.clone(),
            msg: e.to_string(),
        })?
        .iter()
        .map(str::to_string)
        .collect();
    let mut rows = Vec::new();
    for (i, record) in reader.records().enumerate() {
        let record = record.map_err(|e| DataError::Row {
            path: display.clone(),
            row: i + 1,
            msg: e.to_string(),
        })?;
        let mut row = Vec::with_capacity(record.len());
        for field in record.iter() {
            let v: f64 = field.parse().map_err(|_| DataError::Row {
                path: display.clone(),
                row: i + 1,
                msg: format!("not a number: {field:?}"),
            })?;
            row.push(v);
        }
        rows.push(row);
    }
    Ok((header, rows))
}

fn require_width(path: &Path, rows: &[Vec<f64>], allowed: &[usize]) -> Result<(), DataError> {
    for (i, r) in rows.iter().enumerate() {
        if !allowed.contains(&r.len()) {
            return Err(DataError::Width {
                path: path.display().to_string(),
                row: i + 1,
                expected: allowed[0],
                found: r.len(),
            });
        }
    }
    Ok(())
}

pub fn load_meta(dir: &Path) -> Result<DatasetMeta, DataError> {
    let meta_path = dir.join(META_FILE);
    let text = std::fs::read_to_string(&meta_path).map_err(io_err(&meta_path))?;
    toml::from_str(&text).map_err(|e| DataError::Schema {
        path: meta_path.display().to_string(),
        msg: e.to_string(),
    })
}

pub fn load_dataset(dir: &Path) -> Result<Dataset, DataError> {
    let meta = load_meta(dir)?;
    let geometry = ArrayGeometry::load(&dir.join(&meta.geometry))?;
    read_streams(dir, meta, geometry)
}

/// Loads a dataset but substitutes the given array geometry, which must have
/// the recorded number of sensors.
pub fn load_with_geometry(dir: &Path, geometry: ArrayGeometry) -> Result<Dataset, DataError> {
    read_streams(dir, load_meta(dir)?, geometry)
}

fn read_streams(
    dir: &Path,
    meta: DatasetMeta,
    geometry: ArrayGeometry,
) -> Result<Dataset, DataError> {
    let path = dir.join(IMU_FILE);
    let (_, rows) = read_table(&path)?;
    require_width(&path, &rows, &[7])?;
    let imu = rows
        .iter()
        .map(|r| {
            ImuSample::new(
                r[0],
                Vector3::new(r[1], r[2], r[3]),
                Vector3::new(r[4], r[5], r[6]),
            )
        })
        .collect();

    let path = dir.join(MAG_FILE);
    let (_, rows) = read_table(&path)?;
    let width = 3 * geometry.len() + 1;
    require_width(&path, &rows, &[width])?;
    let mag = rows
        .iter()
        .map(|r| MagSnapshot {
            t: r[0],
            values: DVector::from_column_slice(&r[1..]),
        })
        .collect();

    let path = dir.join(TRUTH_FILE);
    let truth = if path.exists() {
        let (_, rows) = read_table(&path)?;
        require_width(&path, &rows, &[11, 8])?;
        let mut samples: Vec<TruthSample> = rows
            .iter()
            .map(|r| TruthSample {
                t: r[0],
                p: Vector3::new(r[1], r[2], r[3]),
                q: UnitQuaternion::normalize(r[4], r[5], r[6], r[7]),
                v: (r.len() == 11).then(|| Vector3::new(r[8], r[9], r[10])),
            })
            .collect();
        fill_truth_velocity(&mut samples);
        Some(samples)
    } else {
        None
    };

    let ds = Dataset {
        meta,
        geometry,
        imu,
        mag,
        truth,
    };
    ds.validate()?;
    Ok(ds)
}

/// Central differences of position wherever the truth stream lacks velocity.
fn fill_truth_velocity(samples: &mut [TruthSample]) {
    let n = samples.len();
    if n < 2 {
        return;
    }
    for i in 0..n {
        if samples[i].v.is_some() {
            continue;
        }
        let (a, b) = (i.saturating_sub(1), (i + 1).min(n - 1));
        let dt = samples[b].t - samples[a].t;
        if dt > 0.0 {
            samples[i].v = Some((samples[b].p - samples[a].p) / dt);
        }
    }
}

/// One row of the trajectory file.
#[derive(Clone, Debug, PartialEq)]
pub struct TrajectoryPoint {
    pub t: f64,
    pub p: Vector3<f64>,
    pub q: UnitQuaternion,
    pub v: Vector3<f64>,
    pub cov_diag: Vec<f64>,
}

pub fn write_trajectory(path: &Path, traj: &[TrajectoryPoint]) -> Result<(), DataError> {
    let mut w = create(path)?;
    let n = traj.first().map_or(0, |p| p.cov_diag.len());
    (|| -> std::io::Result<()> {
        let mut header = String::from("t,px,py,pz,qw,qx,qy,qz,vx,vy,vz");
        for i in 0..n {
            header.push_str(&format!(",P{i}"));
        }
        writeln!(w, "{header}")?;
        for p in traj {
            fmt_row(
                &mut w,
                [
                    p.t, p.p.x, p.p.y, p.p.z, p.q.w, p.q.x, p.q.y, p.q.z, p.v.x, p.v.y, p.v.z,
                ]
                .into_iter()
                .chain(p.cov_diag.iter().copied()),
            )?;
        }
        w.flush()
    })()
    .map_err(io_err(path))
}

pub fn read_trajectory(path: &Path) -> Result<Vec<TrajectoryPoint>, DataError> {
    let (header, rows) = read_table(path)?;
    if header.len() < 11 || header[0] != "t" {
        return Err(DataError::Schema {
            path: path.display().to_string(),
            msg: "trajectory header must start with t,px,py,pz,qw,qx,qy,qz,vx,vy,vz".into(),
        });
    }
    require_width(path, &rows, &[header.len()])?;
    check_monotone(&path.display().to_string(), rows.iter().map(|r| r[0]))?;
    Ok(rows
        .into_iter()
        .map(|r| TrajectoryPoint {
            t: r[0],
            p: Vector3::new(r[1], r[2], r[3]),
            // Stored quaternions are already unit norm; keep them bit-exact.
            q: UnitQuaternion {
                w: r[4],
                x: r[5],
                y: r[6],
                z: r[7],
            },
            v: Vector3::new(r[8], r[9], r[10]),
            cov_diag: r[11..].to_vec(),
        })
        .collect())
}

pub fn dataset_dir_name(dir: &Path) -> String {
    dir.file_name()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_else(|| PathBuf::from(dir).display().to_string())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny() -> Dataset {
        let geometry = ArrayGeometry::square5();
        let imu = (0..5)
            .map(|k| {
                ImuSample::new(
                    k as f64 * 0.01,
                    Vector3::new(0.0, 0.0, 9.81),
                    Vector3::new(0.0, 0.0, 0.1),
                )
            })
            .collect();
        let mag = (0..5)
            .map(|k| MagSnapshot {
                t: k as f64 * 0.01,
                values: DVector::from_fn(15, |i, _| i as f64 + 0.1 * k as f64),
            })
            .collect();
        let truth = (0..5)
            .map(|k| TruthSample {
                t: k as f64 * 0.01,
                p: Vector3::new(k as f64, 0.0, 0.0),
                q: UnitQuaternion::identity(),
                v: Some(Vector3::new(1.0, 0.0, 0.0)),
            })
            .collect();
        Dataset {
            meta: DatasetMeta {
                name: "tiny".into(),
                sensor_count: 5,
                ..DatasetMeta::default()
            },
            geometry,
            imu,
            mag,
            truth: Some(truth),
        }
    }

    #[test]
    fn round_trip_is_exact() {
        let dir = tempfile::tempdir().unwrap();
        let mut ds = tiny();
        ds.mag[2].values[4] = f64::NAN;
        ds.imu[1].specific_force.x = 0.1 + 0.2;
        save_dataset(&ds, dir.path()).unwrap();
        let back = load_dataset(dir.path()).unwrap();
        assert_eq!(back.imu, ds.imu);
        assert_eq!(back.truth, ds.truth);
        assert!(back.mag[2].values[4].is_nan());
        ds.mag[2].values[4] = 0.0;
        let mut back = back;
        back.mag[2].values[4] = 0.0;
        assert_eq!(back.mag, ds.mag);
        assert_eq!(back.geometry, ds.geometry);
    }

    #[test]
    fn shuffled_timestamps_name_the_row() {
        let dir = tempfile::tempdir().unwrap();
        let mut ds = tiny();
        ds.imu.swap(2, 3);
        save_dataset(&ds, dir.path()).unwrap();
        match load_dataset(dir.path()).unwrap_err() {
            DataError::NonMonotonic { path, row, .. } => {
                assert_eq!(path, IMU_FILE);
                assert_eq!(row, 4);
            }
            other => panic!("unexpected {other}"),
        }
    }

    #[test]
    fn short_magnetometer_row_is_a_width_error() {
        let dir = tempfile::tempdir().unwrap();
        let mut ds = tiny();
        ds.mag[3].values = DVector::zeros(14);
        save_dataset(&ds, dir.path()).unwrap();
        match load_dataset(dir.path()).unwrap_err() {
            DataError::Width {
                row,
                expected,
                found,
                ..
            } => {
                assert_eq!((row, expected, found), (4, 16, 15));
            }
            other => panic!("unexpected {other}"),
        }
        assert!(matches!(
            tiny_with_width(14).validate(),
            Err(DataError::Width {
                expected: 15,
                found: 14,
                ..
            })
        ));
    }

    fn tiny_with_width(w: usize) -> Dataset {
        let mut ds = tiny();
        ds.mag[0].values = DVector::zeros(w);
        ds
    }

    #[test]
    fn alignment_uses_tolerance() {
        let mut ds = tiny();
        ds.mag[1].t = 0.0105;
        ds.mag[2].t = 0.025;
        let a = ds.align();
        assert_eq!(a.mag, vec![Some(0), Some(1), None, Some(3), Some(4)]);
        assert_eq!(a.truth, vec![Some(0), Some(1), Some(2), Some(3), Some(4)]);
    }

    #[test]
    fn truth_without_velocity_gets_differenced() {
        let dir = tempfile::tempdir().unwrap();
        let mut ds = tiny();
        for s in ds.truth.as_mut().unwrap() {
            s.v = None;
        }
        save_dataset(&ds, dir.path()).unwrap();
        let back = load_dataset(dir.path()).unwrap();
        let v = back.truth.unwrap()[2].v.unwrap();
        assert!((v - Vector3::new(100.0, 0.0, 0.0)).norm() < 1e-9);
    }

    #[test]
    fn trajectory_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("traj.csv");
        let traj: Vec<_> = (0..3)
            .map(|k| TrajectoryPoint {
                t: k as f64 / 3.0,
                p: Vector3::new(0.1 * k as f64, 1.0 / 7.0, -2.5),
                q: UnitQuaternion::normalize(1.0, 0.1, 0.2, 0.3),
                v: Vector3::new(1.0 / 3.0, 0.0, 1e-300),
                cov_diag: vec![1e-4; 23],
            })
            .collect();
        write_trajectory(&path, &traj).unwrap();
        assert_eq!(read_trajectory(&path).unwrap(), traj);
    }
}
