//! Synthetic magnetic worlds, scripted trajectories and sensor synthesis.
//!
//! Two truth modes are available. [`TruthMode::Continuous`] samples a smooth
//! trajectory and derives the IMU signals from its exact derivatives. In
//! [`TruthMode::Discrete`] the ground truth is generated by running the
//! filter's own mechanization on the noise-free signals, so that the process
//! model holds exactly; together with [`World::Linear`] this yields data on
//! which the filter's model is exact.

use std::f64::consts::{FRAC_PI_2, PI};

use nalgebra::{DVector, Matrix3, Vector3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::array::ArrayGeometry;
use crate::dataio::{Dataset, DatasetMeta, MagSnapshot, SensorNoiseMeta, TruthSample};
use crate::geom::{rot_x, rot_y, rot_z, UnitQuaternion};
use crate::strapdown::{propagate, ImuSample, NavState, GRAVITY};

/// µ0/4π in µT·m/A.
const MU0_OVER_4PI: f64 = 0.1;

#[derive(Debug, Error)]
pub enum SimError {
    #[error("invalid trajectory script: {0}")]
    NonSmoothScript(String),
    #[error("point {point:?} is {distance:.3} m from dipole {index}, inside the {keep_out} m keep-out radius")]
    InsideKeepOut {
        point: [f64; 3],
        index: usize,
        distance: f64,
        keep_out: f64,
    },
    #[error("invalid field: {0}")]
    InvalidField(String),
    #[error("field calibration failed: {0}")]
    Calibration(String),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Dipole {
    /// Position, m, navigation frame.
    pub position: [f64; 3],
    /// Moment, A·m².
    pub moment: [f64; 3],
}

impl Dipole {
    pub fn field(&self, r: &Vector3<f64>) -> Vector3<f64> {
        let d = r - Vector3::from(self.position);
        let dist = d.norm();
        let u = d / dist;
        let m = Vector3::from(self.moment);
        (u * (3.0 * m.dot(&u)) - m) * (MU0_OVER_4PI / dist.powi(3))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DipoleWorld {
    pub dipoles: Vec<Dipole>,
    /// Uniform background field, µT.
    pub background: [f64; 3],
    /// Field queries closer than this to any dipole are refused, m.
    pub keep_out: f64,
}

impl DipoleWorld {
    pub fn field(&self, r: &Vector3<f64>) -> Result<Vector3<f64>, SimError> {
        let mut b = Vector3::from(self.background);
        for (index, d) in self.dipoles.iter().enumerate() {
            let distance = (r - Vector3::from(d.position)).norm();
            if distance < self.keep_out {
                return Err(SimError::InsideKeepOut {
                    point: [r.x, r.y, r.z],
                    index,
                    distance,
                    keep_out: self.keep_out,
                });
            }
            b += d.field(r);
        }
        Ok(b)
    }

    fn scaled(&self, k: f64) -> DipoleWorld {
        let mut w = self.clone();
        for d in &mut w.dipoles {
            d.moment = d.moment.map(|m| m * k);
        }
        w
    }
}

/// Source-free magnetic environment in the navigation frame.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum World {
    Dipoles(DipoleWorld),
    /// `B(r) = b0 + G r` with `G` symmetric and traceless, µT and µT/m.
    Linear {
        background: [f64; 3],
        gradient: [[f64; 3]; 3],
    },
}

impl World {
    pub fn uniform(background: Vector3<f64>) -> Self {
        World::Dipoles(DipoleWorld {
            dipoles: Vec::new(),
            background: background.into(),
            keep_out: 0.0,
        })
    }

    pub fn validate(&self) -> Result<(), SimError> {
        match self {
            World::Dipoles(w) => {
                if w.keep_out.is_nan() || w.keep_out < 0.0 {
                    return Err(SimError::InvalidField(
                        "keep-out radius must be >= 0".into(),
                    ));
                }
                Ok(())
            }
            World::Linear { gradient, .. } => {
                let g = Matrix3::from_fn(|i, j| gradient[i][j]);
                let scale = g.norm().max(1.0);
                if (g - g.transpose()).amax() > 1e-12 * scale || g.trace().abs() > 1e-12 * scale {
                    return Err(SimError::InvalidField(
                        "linear gradient must be symmetric and traceless".into(),
                    ));
                }
                Ok(())
            }
        }
    }
}

/// Field at a navigation-frame point, µT.
pub fn world_field(world: &World, r: &Vector3<f64>) -> Result<Vector3<f64>, SimError> {
    match world {
        World::Dipoles(w) => w.field(r),
        World::Linear {
            background,
            gradient,
        } => Ok(Vector3::from(*background) + Matrix3::from_fn(|i, j| gradient[i][j]) * r),
    }
}

/// Position, derivatives and attitude at one instant.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Kinematics {
    pub p: Vector3<f64>,
    pub v: Vector3<f64>,
    pub a: Vector3<f64>,
    /// Body-to-navigation rotation.
    pub r: Matrix3<f64>,
    /// Angular rate, body frame, rad/s.
    pub omega: Vector3<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SquareLaps {
    /// Side of the square, m.
    pub side: f64,
    pub laps: f64,
    /// Cruise speed, m/s.
    pub speed: f64,
    /// Board height above the floor, m.
    pub height: f64,
    /// Constant board tilt about the body x axis, rad.
    pub tilt: f64,
    /// Arc length of each rounded corner, m.
    pub corner_length: f64,
    /// Stationary time before moving, s.
    pub lead_in: f64,
    /// Duration of the speed ramps, s.
    pub ramp: f64,
    /// Stationary time after stopping, s.
    pub lead_out: f64,
    /// Vertical bob amplitude, m, and frequency, Hz.
    pub bob_amplitude: f64,
    pub bob_frequency: f64,
    /// Roll/pitch sway amplitude, rad, and frequency, Hz.
    pub sway_amplitude: f64,
    pub sway_frequency: f64,
}

impl Default for SquareLaps {
    fn default() -> Self {
        Self {
            side: 5.0,
            laps: 5.65,
            speed: 1.0,
            height: 1.0,
            tilt: 0.0,
            corner_length: 1.0,
            lead_in: 3.0,
            ramp: 2.0,
            lead_out: 2.0,
            bob_amplitude: 0.02,
            bob_frequency: 1.8,
            sway_amplitude: 0.03,
            sway_frequency: 0.9,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum TrajectoryScript {
    Stationary {
        duration: f64,
        position: [f64; 3],
        yaw: f64,
        tilt: f64,
    },
    SquareLaps(SquareLaps),
}

impl Default for TrajectoryScript {
    fn default() -> Self {
        TrajectoryScript::SquareLaps(SquareLaps::default())
    }
}

// Smootherstep and its integral and derivatives on [0, 1].
fn step(u: f64) -> [f64; 4] {
    let u = u.clamp(0.0, 1.0);
    [
        u.powi(6) - 3.0 * u.powi(5) + 2.5 * u.powi(4),
        u.powi(3) * (10.0 - 15.0 * u + 6.0 * u * u),
        30.0 * u * u * (1.0 - u) * (1.0 - u),
        60.0 * u * (1.0 - u) * (1.0 - 2.0 * u),
    ]
}

/// Heading change through a corner at fraction `x`.
fn corner_heading(x: f64) -> f64 {
    FRAC_PI_2 * (x - (2.0 * PI * x).sin() / (2.0 * PI))
}

/// `∫₀ˣ (cos χ, sin χ) du` by composite Simpson.
fn corner_offset(x: f64) -> (f64, f64) {
    const N: usize = 64;
    if x <= 0.0 {
        return (0.0, 0.0);
    }
    let h = x / N as f64;
    let (mut sx, mut sy) = (0.0, 0.0);
    for i in 0..=N {
        let w = if i == 0 || i == N {
            1.0
        } else if i % 2 == 1 {
            4.0
        } else {
            2.0
        };
        let chi = corner_heading(i as f64 * h);
        sx += w * chi.cos();
        sy += w * chi.sin();
    }
    (sx * h / 3.0, sy * h / 3.0)
}

fn planar_rot(psi: f64, x: f64, y: f64) -> (f64, f64) {
    let (s, c) = psi.sin_cos();
    (c * x - s * y, s * x + c * y)
}

impl SquareLaps {
    fn straight(&self) -> f64 {
        self.side - self.corner_length
    }

    pub fn perimeter(&self) -> f64 {
        4.0 * self.side
    }

    fn cruise_time(&self) -> f64 {
        self.laps * self.perimeter() / self.speed - self.ramp
    }

    pub fn duration(&self) -> f64 {
        self.lead_in + 2.0 * self.ramp + self.cruise_time() + self.lead_out
    }

    /// Laps that make the script last `duration` seconds.
    pub fn laps_for_duration(&self, duration: f64) -> f64 {
        (duration - self.lead_in - self.ramp - self.lead_out) * self.speed / self.perimeter()
    }

    fn validate(&self) -> Result<(), SimError> {
        let bad = |m: &str| Err(SimError::NonSmoothScript(m.into()));
        let all = [
            self.side,
            self.laps,
            self.speed,
            self.height,
            self.tilt,
            self.corner_length,
            self.lead_in,
            self.ramp,
            self.lead_out,
            self.bob_amplitude,
            self.bob_frequency,
            self.sway_amplitude,
            self.sway_frequency,
        ];
        if all.iter().any(|v| !v.is_finite()) {
            return bad("non-finite parameter");
        }
        if self.side <= 0.0 || self.speed <= 0.0 || self.laps <= 0.0 {
            return bad("side, speed and laps must be positive");
        }
        if self.corner_length <= 0.0 || self.corner_length > self.side {
            return bad(
                "corner_length must lie in (0, side]; sharp corners are not differentiable",
            );
        }
        if self.ramp <= 0.0 {
            return bad("ramp must be positive; a speed step has unbounded acceleration");
        }
        if self.lead_in < 0.0 || self.lead_out < 0.0 {
            return bad("lead_in and lead_out must be >= 0");
        }
        if self.cruise_time() < 0.0 {
            return bad("path too short for the speed ramps");
        }
        if self.bob_frequency < 0.0 || self.sway_frequency < 0.0 {
            return bad("frequencies must be >= 0");
        }
        Ok(())
    }

    /// Arc length and its first three time derivatives.
    fn arc(&self, t: f64) -> [f64; 4] {
        let (v, tr) = (self.speed, self.ramp);
        let tc = self.cruise_time();
        let t1 = t - self.lead_in;
        if t1 <= 0.0 {
            return [0.0; 4];
        }
        if t1 < tr {
            let [big, h, h1, h2] = step(t1 / tr);
            return [v * tr * big, v * h, v * h1 / tr, v * h2 / (tr * tr)];
        }
        if t1 < tr + tc {
            return [v * tr / 2.0 + v * (t1 - tr), v, 0.0, 0.0];
        }
        let u = (t1 - tr - tc) / tr;
        if u < 1.0 {
            let [big, h, h1, h2] = step(1.0 - u);
            return [
                v * tr / 2.0 + v * tc + v * tr * (0.5 - big),
                v * h,
                -v * h1 / tr,
                v * h2 / (tr * tr),
            ];
        }
        [v * tr + v * tc, 0.0, 0.0, 0.0]
    }

    /// Planar position, heading and curvature at arc length `s`.
    fn path(&self, s: f64) -> ((f64, f64), f64, f64) {
        let (ls, lc) = (self.straight(), self.corner_length);
        let c0 = lc * corner_offset(1.0).0;
        let (a, b) = (ls + c0, c0);
        let start = (-(a - b) / 2.0, -(a + b) / 2.0);
        let per = self.perimeter();
        let laps = (s / per).floor();
        let sl = s - laps * per;
        let k = ((sl / (ls + lc)).floor() as usize).min(3);
        let sigma = sl - k as f64 * (ls + lc);
        // Side k starts at the k-th vertex of the polygon traced by (a, b).
        let mut origin = start;
        for j in 0..k {
            let (dx, dy) = planar_rot(j as f64 * FRAC_PI_2, a, b);
            origin = (origin.0 + dx, origin.1 + dy);
        }
        let psi0 = k as f64 * FRAC_PI_2;
        let (local, chi, kappa) = if sigma < ls {
            ((sigma, 0.0), 0.0, 0.0)
        } else {
            let x = ((sigma - ls) / lc).min(1.0);
            let (ox, oy) = corner_offset(x);
            (
                (ls + lc * ox, lc * oy),
                corner_heading(x),
                FRAC_PI_2 / lc * (1.0 - (2.0 * PI * x).cos()),
            )
        };
        let (dx, dy) = planar_rot(psi0, local.0, local.1);
        ((origin.0 + dx, origin.1 + dy), psi0 + chi, kappa)
    }

    fn sample(&self, t: f64) -> Kinematics {
        let [s, sd, sdd, sddd] = self.arc(t);
        let ((x, y), psi, kappa) = self.path(s);
        let (sp, cp) = psi.sin_cos();
        let tangent = Vector3::new(cp, sp, 0.0);
        let normal = Vector3::new(-sp, cp, 0.0);

        // Bob and sway are faded in with the speed so that rest is exact rest.
        let (w, wd, wdd) = (sd / self.speed, sdd / self.speed, sddd / self.speed);
        let tt = t - self.lead_in;
        let ob = 2.0 * PI * self.bob_frequency;
        let (sb, cb) = (ob * tt).sin_cos();
        let ab = self.bob_amplitude;
        let z = self.height + ab * w * sb;
        let zd = ab * (wd * sb + w * ob * cb);
        let zdd = ab * (wdd * sb + 2.0 * wd * ob * cb - w * ob * ob * sb);

        let p = Vector3::new(x, y, z);
        let v = tangent * sd + Vector3::new(0.0, 0.0, zd);
        let a = tangent * sdd + normal * (sd * sd * kappa) + Vector3::new(0.0, 0.0, zdd);

        let os = 2.0 * PI * self.sway_frequency;
        let asw = self.sway_amplitude;
        let (s1, c1) = (os * tt).sin_cos();
        let (s2, c2) = (0.7 * os * tt + 1.0).sin_cos();
        let roll = self.tilt + asw * w * s1;
        let roll_d = asw * (wd * s1 + w * os * c1);
        let pitch = asw * w * s2;
        let pitch_d = asw * (wd * s2 + w * 0.7 * os * c2);
        let yaw_d = kappa * sd;

        let (rx, ry) = (rot_x(roll), rot_y(pitch));
        let r = rot_z(psi) * rx * ry;
        let omega = ry.transpose() * (rx.transpose() * Vector3::new(0.0, 0.0, yaw_d))
            + ry.transpose() * Vector3::new(roll_d, 0.0, 0.0)
            + Vector3::new(0.0, pitch_d, 0.0);
        Kinematics { p, v, a, r, omega }
    }
}

impl TrajectoryScript {
    pub fn validate(&self) -> Result<(), SimError> {
        match self {
            TrajectoryScript::Stationary {
                duration,
                position,
                yaw,
                tilt,
            } => {
                if !(duration.is_finite() && *duration > 0.0)
                    || !position.iter().chain([yaw, tilt]).all(|v| v.is_finite())
                {
                    return Err(SimError::NonSmoothScript(
                        "stationary script needs a positive duration and finite pose".into(),
                    ));
                }
                Ok(())
            }
            TrajectoryScript::SquareLaps(sq) => sq.validate(),
        }
    }

    pub fn duration(&self) -> f64 {
        match self {
            TrajectoryScript::Stationary { duration, .. } => *duration,
            TrajectoryScript::SquareLaps(sq) => sq.duration(),
        }
    }

    pub fn sample(&self, t: f64) -> Kinematics {
        match self {
            TrajectoryScript::Stationary {
                position,
                yaw,
                tilt,
                ..
            } => Kinematics {
                p: Vector3::from(*position),
                v: Vector3::zeros(),
                a: Vector3::zeros(),
                r: rot_z(*yaw) * rot_x(*tilt),
                omega: Vector3::zeros(),
            },
            TrajectoryScript::SquareLaps(sq) => sq.sample(t),
        }
    }

    /// Positions every `dt` seconds over the whole script.
    pub fn positions(&self, dt: f64) -> Vec<Vector3<f64>> {
        let n = (self.duration() / dt).ceil() as usize;
        (0..=n)
            .map(|i| self.sample((i as f64 * dt).min(self.duration())).p)
            .collect()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ImuNoise {
    /// m/s²/√Hz
    pub accel_noise_density: f64,
    /// rad/s/√Hz
    pub gyro_noise_density: f64,
    /// m/s²/√s
    pub accel_bias_rw: f64,
    /// rad/s/√s
    pub gyro_bias_rw: f64,
    /// σ of the initial bias, m/s².
    pub accel_bias_sigma: f64,
    /// σ of the initial bias, rad/s.
    pub gyro_bias_sigma: f64,
}

impl Default for ImuNoise {
    fn default() -> Self {
        Self {
            accel_noise_density: 1e-2,
            gyro_noise_density: 1e-3,
            accel_bias_rw: 1e-4,
            gyro_bias_rw: 1e-4,
            accel_bias_sigma: 1e-2,
            gyro_bias_sigma: 1e-2,
        }
    }
}

impl ImuNoise {
    pub fn zero() -> Self {
        Self {
            accel_noise_density: 0.0,
            gyro_noise_density: 0.0,
            accel_bias_rw: 0.0,
            gyro_bias_rw: 0.0,
            accel_bias_sigma: 0.0,
            gyro_bias_sigma: 0.0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SimNoise {
    pub imu: ImuNoise,
    /// Per-axis magnetometer σ, µT.
    pub mag_sigma: f64,
}

impl Default for SimNoise {
    fn default() -> Self {
        Self {
            imu: ImuNoise::default(),
            mag_sigma: 0.05,
        }
    }
}

impl SimNoise {
    pub fn zero() -> Self {
        Self {
            imu: ImuNoise::zero(),
            mag_sigma: 0.0,
        }
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TruthMode {
    #[default]
    Continuous,
    Discrete,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SynthOptions {
    pub rate_hz: f64,
    /// One magnetometer snapshot every this many IMU samples.
    pub mag_decimation: usize,
    pub truth: TruthMode,
    pub gravity: [f64; 3],
    pub name: String,
}

impl Default for SynthOptions {
    fn default() -> Self {
        Self {
            rate_hz: 100.0,
            mag_decimation: 1,
            truth: TruthMode::Continuous,
            gravity: [0.0, 0.0, -GRAVITY],
            name: "synthetic".into(),
        }
    }
}

fn normal3(rng: &mut impl Rng) -> Vector3<f64> {
    Vector3::from_fn(|_, _| StandardNormal.sample(rng))
}

/// Synthesizes a dataset with default options (100 Hz, continuous truth).
pub fn synthesize(
    world: &World,
    script: &TrajectoryScript,
    geometry: &ArrayGeometry,
    noise: &SimNoise,
    seed: u64,
) -> Result<Dataset, SimError> {
    synthesize_with(
        world,
        script,
        geometry,
        noise,
        seed,
        &SynthOptions::default(),
    )
}

pub fn synthesize_with(
    world: &World,
    script: &TrajectoryScript,
    geometry: &ArrayGeometry,
    noise: &SimNoise,
    seed: u64,
    opts: &SynthOptions,
) -> Result<Dataset, SimError> {
    script.validate()?;
    world.validate()?;
    if !(opts.rate_hz.is_finite() && opts.rate_hz > 0.0) || opts.mag_decimation == 0 {
        return Err(SimError::NonSmoothScript(
            "sample rate must be positive and mag_decimation >= 1".into(),
        ));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let gravity = Vector3::from(opts.gravity);
    let ts = 1.0 / opts.rate_hz;
    let n = (script.duration() * opts.rate_hz).floor() as usize + 1;
    let imu_n = &noise.imu;
    let sd_a = imu_n.accel_noise_density / ts.sqrt();
    let sd_w = imu_n.gyro_noise_density / ts.sqrt();
    let rw_a = imu_n.accel_bias_rw * ts.sqrt();
    let rw_w = imu_n.gyro_bias_rw * ts.sqrt();
    let mut bias_a = normal3(&mut rng) * imu_n.accel_bias_sigma;
    let mut bias_w = normal3(&mut rng) * imu_n.gyro_bias_sigma;
    let sensors = geometry.positions();

    let mut imu = Vec::with_capacity(n);
    let mut mag = Vec::with_capacity(n / opts.mag_decimation + 1);
    let mut truth = Vec::with_capacity(n);
    let mut discrete: Option<NavState> = None;

    for k in 0..n {
        let t = k as f64 * ts;
        let kin = script.sample(t);
        let s_true = kin.r.transpose() * (kin.a - gravity);
        let (p, v, rot, q) = match opts.truth {
            TruthMode::Continuous => (
                kin.p,
                kin.v,
                kin.r,
                UnitQuaternion::from_rotation_matrix(&kin.r),
            ),
            TruthMode::Discrete => {
                let x = *discrete.get_or_insert_with(|| NavState {
                    p: kin.p,
                    v: kin.v,
                    q: UnitQuaternion::from_rotation_matrix(&kin.r),
                    ..NavState::default()
                });
                (x.p, x.v, x.q.to_rotation_matrix(), x.q)
            }
        };
        truth.push(TruthSample {
            t,
            p,
            q,
            v: Some(v),
        });

        if k % opts.mag_decimation == 0 {
            let mut values = DVector::zeros(3 * sensors.len());
            for (i, rm) in sensors.iter().enumerate() {
                let b = rot.transpose() * world_field(world, &(p + rot * rm))?;
                let e = normal3(&mut rng) * noise.mag_sigma;
                values.fixed_rows_mut::<3>(3 * i).copy_from(&(b + e));
            }
            mag.push(MagSnapshot { t, values });
        }

        let w_a = normal3(&mut rng) * sd_a;
        let w_w = normal3(&mut rng) * sd_w;
        imu.push(ImuSample::new(
            t,
            s_true + bias_a + w_a,
            kin.omega + bias_w + w_w,
        ));
        bias_a += normal3(&mut rng) * rw_a;
        bias_w += normal3(&mut rng) * rw_w;

        if let Some(x) = discrete.as_mut() {
            *x = propagate(x, &ImuSample::new(t, s_true, kin.omega), ts, &gravity);
        }
    }

    let meta = DatasetMeta {
        name: opts.name.clone(),
        sensor_count: geometry.len(),
        imu_rate_hz: opts.rate_hz,
        mag_rate_hz: opts.rate_hz / opts.mag_decimation as f64,
        time_tolerance: 0.1 * ts,
        noise: SensorNoiseMeta {
            accel_noise_density: Some(imu_n.accel_noise_density),
            gyro_noise_density: Some(imu_n.gyro_noise_density),
            accel_bias_rw: Some(imu_n.accel_bias_rw),
            gyro_bias_rw: Some(imu_n.gyro_bias_rw),
            mag_sigma: Some(noise.mag_sigma),
        },
        ..DatasetMeta::default()
    };
    Ok(Dataset {
        meta,
        geometry: geometry.clone(),
        imu,
        mag,
        truth: Some(truth),
    })
}

/// Spread of `|B|` over a set of points, µT.
pub fn magnitude_variation(world: &World, points: &[Vector3<f64>]) -> Result<f64, SimError> {
    let mut lo = f64::INFINITY;
    let mut hi = f64::NEG_INFINITY;
    for p in points {
        let b = world_field(world, p)?.norm();
        lo = lo.min(b);
        hi = hi.max(b);
    }
    Ok(hi - lo)
}

/// Scales all dipole moments so that the `|B|` spread over `points` equals `target`.
pub fn calibrate_variation(
    world: &DipoleWorld,
    points: &[Vector3<f64>],
    target: f64,
) -> Result<DipoleWorld, SimError> {
    if world.dipoles.is_empty() {
        return Err(SimError::Calibration("world has no dipoles".into()));
    }
    let spread = |k: f64| magnitude_variation(&World::Dipoles(world.scaled(k)), points);
    let (mut lo, mut hi) = (-12.0f64, 12.0f64);
    if spread(10f64.powf(hi))? < target {
        return Err(SimError::Calibration(format!(
            "cannot reach a {target} uT spread by scaling the moments"
        )));
    }
    for _ in 0..100 {
        let mid = 0.5 * (lo + hi);
        if spread(10f64.powf(mid))? < target {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    Ok(world.scaled(10f64.powf(0.5 * (lo + hi))))
}

/// Randomly placed dipoles, calibrated to a target `|B|` spread along the path.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RandomDipoles {
    pub count: usize,
    pub background: [f64; 3],
    /// Dipole heights are drawn uniformly from this range, m.
    pub depth: [f64; 2],
    /// Horizontal margin around the path's bounding box, m.
    pub margin: f64,
    /// Minimum dipole distance to the path, m.
    pub clearance: f64,
    /// Target `|B|` spread, µT.
    pub target_variation: f64,
}

impl Default for RandomDipoles {
    fn default() -> Self {
        Self {
            count: 12,
            background: [0.0, 20.0, -45.0],
            depth: [-1.0, -0.2],
            margin: 2.0,
            clearance: 1.2,
            target_variation: 8.0,
        }
    }
}

/// How to build the world for a scenario.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum WorldSpec {
    RandomDipoles(RandomDipoles),
    Dipoles(DipoleWorld),
    Linear {
        background: [f64; 3],
        gradient: [[f64; 3]; 3],
    },
}

impl Default for WorldSpec {
    fn default() -> Self {
        WorldSpec::RandomDipoles(RandomDipoles::default())
    }
}

impl From<World> for WorldSpec {
    fn from(w: World) -> Self {
        match w {
            World::Dipoles(d) => WorldSpec::Dipoles(d),
            World::Linear {
                background,
                gradient,
            } => WorldSpec::Linear {
                background,
                gradient,
            },
        }
    }
}

impl WorldSpec {
    pub fn build(&self, script: &TrajectoryScript, seed: u64) -> Result<World, SimError> {
        let (count, background, depth, margin, clearance, target) = match self {
            WorldSpec::Dipoles(w) => return Ok(World::Dipoles(w.clone())),
            WorldSpec::Linear {
                background,
                gradient,
            } => {
                return Ok(World::Linear {
                    background: *background,
                    gradient: *gradient,
                })
            }
            WorldSpec::RandomDipoles(r) => (
                r.count,
                r.background,
                r.depth,
                r.margin,
                r.clearance,
                r.target_variation,
            ),
        };
        script.validate()?;
        let path = script.positions(0.1);
        let (mut lo, mut hi) = (
            Vector3::repeat(f64::INFINITY),
            Vector3::repeat(f64::NEG_INFINITY),
        );
        for p in &path {
            lo = lo.inf(p);
            hi = hi.sup(p);
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed_d1b0_1e5e_ed00);
        let mut dipoles = Vec::with_capacity(count);
        let mut attempts = 0;
        while dipoles.len() < count {
            attempts += 1;
            if attempts > 10_000 * count.max(1) {
                return Err(SimError::Calibration(format!(
                    "could not place {count} dipoles {clearance} m away from the path"
                )));
            }
            let pos = Vector3::new(
                rng.random_range(lo.x - margin..hi.x + margin),
                rng.random_range(lo.y - margin..hi.y + margin),
                rng.random_range(depth[0]..depth[1]),
            );
            if path.iter().any(|p| (p - pos).norm() < clearance) {
                continue;
            }
            let dir = normal3(&mut rng).normalize();
            let strength = rng.random_range(0.5..1.5);
            dipoles.push(Dipole {
                position: pos.into(),
                moment: (dir * strength).into(),
            });
        }
        let raw = DipoleWorld {
            dipoles,
            background,
            keep_out: 0.5 * clearance,
        };
        Ok(World::Dipoles(calibrate_variation(&raw, &path, target)?))
    }
}

/// A complete synthetic experiment description (TOML).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Scenario {
    pub name: String,
    /// Preset name or path of a geometry file.
    pub geometry: String,
    pub trajectory: TrajectoryScript,
    pub world: WorldSpec,
    pub noise: SimNoise,
    pub options: SynthOptions,
}

impl Default for Scenario {
    fn default() -> Self {
        Self::square_laps(120.0)
    }
}

impl Scenario {
    /// Square laps at 1 m/s lasting `duration` seconds in a dipole world with
    /// an 8 µT magnitude spread.
    pub fn square_laps(duration: f64) -> Self {
        let mut sq = SquareLaps::default();
        sq.laps = sq.laps_for_duration(duration);
        Self {
            name: "square-laps".into(),
            geometry: "rectangular30".into(),
            trajectory: TrajectoryScript::SquareLaps(sq),
            world: WorldSpec::default(),
            noise: SimNoise::default(),
            options: SynthOptions::default(),
        }
    }

    /// Square laps in a linear gradient field with discrete-model truth.
    pub fn exact_model(duration: f64) -> Self {
        let mut s = Self::square_laps(duration);
        s.name = "exact-model".into();
        s.world = WorldSpec::Linear {
            background: [0.0, 20.0, -45.0],
            gradient: [[3.0, 1.5, -1.0], [1.5, -1.0, 2.0], [-1.0, 2.0, -2.0]],
        };
        s.options.truth = TruthMode::Discrete;
        s
    }

    pub fn from_toml(text: &str) -> Result<Self, toml::de::Error> {
        toml::from_str(text)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string_pretty(self).expect("scenario serializes")
    }

    pub fn generate(&self, geometry: &ArrayGeometry, seed: u64) -> Result<Dataset, SimError> {
        let world = self.world.build(&self.trajectory, seed)?;
        let mut opts = self.options.clone();
        opts.name = self.name.clone();
        synthesize_with(&world, &self.trajectory, geometry, &self.noise, seed, &opts)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::magmodel::{fit_theta, FieldModel};

    fn g() -> Vector3<f64> {
        Vector3::new(0.0, 0.0, -GRAVITY)
    }

    #[test]
    fn empty_world_is_background() {
        let w = World::uniform(Vector3::new(1.0, 2.0, 3.0));
        assert_eq!(
            world_field(&w, &Vector3::new(5.0, -7.0, 0.1)).unwrap(),
            Vector3::new(1.0, 2.0, 3.0)
        );
    }

    #[test]
    fn on_axis_dipole_magnitude() {
        // |B| = µ0/(4π) · 2m/d³ on the axis.
        let w = World::Dipoles(DipoleWorld {
            dipoles: vec![Dipole {
                position: [1.0, 1.0, 1.0],
                moment: [0.0, 0.0, 40.0],
            }],
            background: [0.0; 3],
            keep_out: 0.1,
        });
        let b = world_field(&w, &Vector3::new(1.0, 1.0, 3.0)).unwrap();
        assert!((b.z - 1e-7 * 2.0 * 40.0 / 8.0 * 1e6).abs() < 1e-12);
        assert!(b.x.abs() < 1e-15 && b.y.abs() < 1e-15);
        let side = world_field(&w, &Vector3::new(3.0, 1.0, 1.0)).unwrap();
        assert!((side.z + 1e-7 * 40.0 / 8.0 * 1e6).abs() < 1e-12);
    }

    #[test]
    fn keep_out_is_enforced() {
        let w = World::Dipoles(DipoleWorld {
            dipoles: vec![Dipole {
                position: [0.0; 3],
                moment: [1.0, 0.0, 0.0],
            }],
            background: [0.0; 3],
            keep_out: 0.5,
        });
        assert!(matches!(
            world_field(&w, &Vector3::new(0.3, 0.0, 0.0)),
            Err(SimError::InsideKeepOut { index: 0, .. })
        ));
    }

    #[test]
    fn dipole_field_is_source_free() {
        let w = World::Dipoles(DipoleWorld {
            dipoles: vec![
                Dipole {
                    position: [0.3, -0.2, -1.0],
                    moment: [10.0, -5.0, 20.0],
                },
                Dipole {
                    position: [-1.0, 2.0, -0.5],
                    moment: [-3.0, 8.0, 1.0],
                },
            ],
            background: [0.0, 20.0, -45.0],
            keep_out: 0.2,
        });
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let h = 1e-5;
        for _ in 0..100 {
            let r = Vector3::new(
                rng.random_range(-2.0..2.0),
                rng.random_range(-2.0..2.0),
                rng.random_range(0.5..1.5),
            );
            let jac = Matrix3::from_columns(&[0, 1, 2].map(|c| {
                let mut d = Vector3::zeros();
                d[c] = h;
                (world_field(&w, &(r + d)).unwrap() - world_field(&w, &(r - d)).unwrap())
                    / (2.0 * h)
            }));
            let scale = jac.norm();
            assert!(
                jac.trace().abs() <= 1e-8 * scale.max(1.0),
                "div {}",
                jac.trace()
            );
            assert!((jac - jac.transpose()).amax() <= 1e-7 * scale.max(1.0));
        }
    }

    #[test]
    fn linear_world_rejects_divergence() {
        let w = World::Linear {
            background: [0.0; 3],
            gradient: [[1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [0.0, 0.0, 0.0]],
        };
        assert!(matches!(w.validate(), Err(SimError::InvalidField(_))));
    }

    fn fd_check(script: &TrajectoryScript, t: f64) {
        let h = 1e-5;
        let k = script.sample(t);
        let (kp, km) = (script.sample(t + h), script.sample(t - h));
        assert!(((kp.p - km.p) / (2.0 * h) - k.v).norm() < 1e-6, "v at {t}");
        assert!(((kp.v - km.v) / (2.0 * h) - k.a).norm() < 1e-5, "a at {t}");
        let rdot = (kp.r - km.r) / (2.0 * h);
        let w = k.r.transpose() * rdot;
        let omega = Vector3::new(w[(2, 1)], w[(0, 2)], w[(1, 0)]);
        assert!(
            (omega - k.omega).norm() < 1e-6,
            "omega at {t}: {omega} vs {}",
            k.omega
        );
        assert!((k.r.transpose() * k.r - Matrix3::identity()).amax() < 1e-12);
    }

    #[test]
    fn square_lap_derivatives_are_consistent() {
        let script = TrajectoryScript::SquareLaps(SquareLaps {
            tilt: 0.2,
            ..SquareLaps::default()
        });
        let mut t = 0.013;
        while t < script.duration() {
            fd_check(&script, t);
            t += 0.37;
        }
        // Ramp joins and a corner entry.
        for t in [3.0, 5.0, 7.0, 3.0 + 2.0 + 3.5] {
            fd_check(&script, t);
        }
    }

    #[test]
    fn square_lap_closes_and_has_expected_duration() {
        let sq = SquareLaps::default();
        let path = |s: f64| sq.path(s).0;
        let a = path(0.0);
        let b = path(sq.perimeter() - 1e-12);
        assert!((a.0 - b.0).abs() < 1e-9 && (a.1 - b.1).abs() < 1e-9);
        let mut sq120 = sq.clone();
        sq120.laps = sq.laps_for_duration(120.0);
        assert!((sq120.duration() - 120.0).abs() < 1e-9);
        let script = TrajectoryScript::SquareLaps(sq120);
        let start = script.sample(0.0);
        let end = script.sample(120.0);
        assert_eq!(start.v, Vector3::zeros());
        assert!(end.v.norm() < 1e-12 && end.a.norm() < 1e-12 && end.omega.norm() < 1e-12);
    }

    #[test]
    fn invalid_scripts_are_rejected() {
        for sq in [
            SquareLaps {
                corner_length: 0.0,
                ..SquareLaps::default()
            },
            SquareLaps {
                ramp: 0.0,
                ..SquareLaps::default()
            },
            SquareLaps {
                speed: -1.0,
                ..SquareLaps::default()
            },
            SquareLaps {
                laps: 0.01,
                ..SquareLaps::default()
            },
            SquareLaps {
                side: f64::NAN,
                ..SquareLaps::default()
            },
        ] {
            let r = synthesize(
                &World::uniform(Vector3::zeros()),
                &TrajectoryScript::SquareLaps(sq),
                &ArrayGeometry::square5(),
                &SimNoise::zero(),
                0,
            );
            assert!(matches!(r, Err(SimError::NonSmoothScript(_))));
        }
    }

    #[test]
    fn stationary_imu_is_gravity_reaction_plus_noise() {
        let script = TrajectoryScript::Stationary {
            duration: 2.0,
            position: [1.0, 2.0, 1.0],
            yaw: 0.4,
            tilt: 0.1,
        };
        let r = rot_z(0.4) * rot_x(0.1);
        let w = World::uniform(Vector3::new(0.0, 20.0, -45.0));
        let clean =
            synthesize(&w, &script, &ArrayGeometry::square5(), &SimNoise::zero(), 1).unwrap();
        for u in &clean.imu {
            assert!((u.specific_force - r.transpose() * -g()).norm() < 1e-12);
            assert_eq!(u.angular_rate, Vector3::zeros());
        }
        let noisy = synthesize(
            &w,
            &script,
            &ArrayGeometry::square5(),
            &SimNoise::default(),
            1,
        )
        .unwrap();
        let n = noisy.imu.len() as f64;
        let mean_err: Vector3<f64> = noisy
            .imu
            .iter()
            .zip(&clean.imu)
            .map(|(a, b)| a.specific_force - b.specific_force)
            .sum::<Vector3<f64>>()
            / n;
        // Noise mean is within a few σ of the (small) bias.
        assert!(mean_err.norm() < 0.1);
    }

    #[test]
    fn same_seed_same_dataset() {
        let sc = Scenario::square_laps(20.0);
        let geo = ArrayGeometry::square5();
        let a = sc.generate(&geo, 7).unwrap();
        let b = sc.generate(&geo, 7).unwrap();
        assert_eq!(a, b);
        assert_ne!(a, sc.generate(&geo, 8).unwrap());
    }

    #[test]
    fn noiseless_dead_reckoning_recovers_trajectory() {
        let mut sq = SquareLaps::default();
        sq.laps = sq.laps_for_duration(10.0);
        let script = TrajectoryScript::SquareLaps(sq);
        let ds = synthesize(
            &World::uniform(Vector3::new(0.0, 20.0, -45.0)),
            &script,
            &ArrayGeometry::square5(),
            &SimNoise::zero(),
            3,
        )
        .unwrap();
        let truth = ds.truth.as_ref().unwrap();
        let mut x = NavState {
            p: truth[0].p,
            v: truth[0].v.unwrap(),
            q: truth[0].q,
            ..NavState::default()
        };
        let mut worst: f64 = 0.0;
        for k in 0..ds.imu.len() - 1 {
            let ts = ds.imu[k + 1].t - ds.imu[k].t;
            x = propagate(&x, &ds.imu[k], ts, &g());
            worst = worst.max((x.p - truth[k + 1].p).norm());
        }
        assert!(worst <= 0.01, "dead-reckoning error {worst} m");
    }

    #[test]
    fn discrete_truth_is_exact_mechanization() {
        let mut sc = Scenario::exact_model(10.0);
        sc.noise = SimNoise::zero();
        let ds = sc.generate(&ArrayGeometry::square5(), 2).unwrap();
        let truth = ds.truth.as_ref().unwrap();
        let mut x = NavState {
            p: truth[0].p,
            v: truth[0].v.unwrap(),
            q: truth[0].q,
            ..NavState::default()
        };
        for k in 0..ds.imu.len() - 1 {
            x = propagate(&x, &ds.imu[k], 0.01, &g());
            assert!((x.p - truth[k + 1].p).norm() < 1e-9);
        }
    }

    #[test]
    fn default_world_has_target_variation() {
        let sc = Scenario::square_laps(120.0);
        let world = sc.world.build(&sc.trajectory, 11).unwrap();
        let spread = magnitude_variation(&world, &sc.trajectory.positions(0.1)).unwrap();
        assert!((spread - 8.0).abs() < 1e-6, "spread {spread}");
    }

    #[test]
    fn near_uniform_region_is_fitted_exactly() {
        let w = World::Dipoles(DipoleWorld {
            dipoles: vec![Dipole {
                position: [0.0, 0.0, -40.0],
                moment: [0.0, 0.0, 1e5],
            }],
            background: [0.0, 20.0, -45.0],
            keep_out: 1.0,
        });
        let script = TrajectoryScript::Stationary {
            duration: 0.05,
            position: [0.0, 0.0, 1.0],
            yaw: 0.3,
            tilt: 0.0,
        };
        let geo = ArrayGeometry::rectangular30();
        let ds = synthesize(&w, &script, &geo, &SimNoise::zero(), 0).unwrap();
        let fit = fit_theta(
            &FieldModel::new(1).unwrap(),
            &geo.positions(),
            &ds.mag[0].values,
        )
        .unwrap();
        assert!(fit.sigma2 < 1e-6, "sigma2 {}", fit.sigma2);
    }

    #[test]
    fn scenario_toml_round_trip() {
        let sc = Scenario::exact_model(30.0);
        assert_eq!(Scenario::from_toml(&sc.to_toml()).unwrap(), sc);
        let sc = Scenario::default();
        assert_eq!(Scenario::from_toml(&sc.to_toml()).unwrap(), sc);
    }
}
