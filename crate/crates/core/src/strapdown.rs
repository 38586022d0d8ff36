//! First-order strapdown mechanization in a local ENU navigation frame.
//!
//! Transport rate and earth rotation are neglected. The integrator is the
//! plain first-order scheme the filter linearizes; no coning or sculling
//! corrections are applied.

use nalgebra::Vector3;

use crate::geom::{quat_exp, quat_mul, UnitQuaternion};
use crate::magmodel::PoseDelta;

/// Default local gravity magnitude, m/s².
pub const GRAVITY: f64 = 9.81;

/// Gravity vector in ENU for a magnitude `g`.
pub fn enu_gravity(g: f64) -> Vector3<f64> {
    Vector3::new(0.0, 0.0, -g)
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct NavState {
    /// Position, m, navigation frame.
    pub p: Vector3<f64>,
    /// Velocity, m/s, navigation frame.
    pub v: Vector3<f64>,
    /// Body-to-navigation attitude.
    pub q: UnitQuaternion,
    /// Accelerometer bias, m/s².
    pub accel_bias: Vector3<f64>,
    /// Gyroscope bias, rad/s.
    pub gyro_bias: Vector3<f64>,
}

impl Default for NavState {
    fn default() -> Self {
        Self {
            p: Vector3::zeros(),
            v: Vector3::zeros(),
            q: UnitQuaternion::identity(),
            accel_bias: Vector3::zeros(),
            gyro_bias: Vector3::zeros(),
        }
    }
}

impl NavState {
    pub fn is_finite(&self) -> bool {
        self.p.iter().all(|x| x.is_finite())
            && self.v.iter().all(|x| x.is_finite())
            && self.q.as_vector4().iter().all(|x| x.is_finite())
            && self.accel_bias.iter().all(|x| x.is_finite())
            && self.gyro_bias.iter().all(|x| x.is_finite())
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ImuSample {
    /// Timestamp, s.
    pub t: f64,
    /// Specific force, m/s², body frame.
    pub specific_force: Vector3<f64>,
    /// Angular rate, rad/s, body frame.
    pub angular_rate: Vector3<f64>,
}

impl ImuSample {
    pub fn new(t: f64, specific_force: Vector3<f64>, angular_rate: Vector3<f64>) -> Self {
        Self {
            t,
            specific_force,
            angular_rate,
        }
    }
}

/// Navigation-frame acceleration `R s + g` for bias-corrected specific force.
fn nav_acceleration(x: &NavState, u: &ImuSample, gravity: &Vector3<f64>) -> Vector3<f64> {
    x.q.rotate(&(u.specific_force - x.accel_bias)) + gravity
}

/// One mechanization step of length `ts` using the sample at the step start.
pub fn propagate(x: &NavState, u: &ImuSample, ts: f64, gravity: &Vector3<f64>) -> NavState {
    let acc = nav_acceleration(x, u, gravity);
    let omega = u.angular_rate - x.gyro_bias;
    NavState {
        p: x.p + x.v * ts + acc * (0.5 * ts * ts),
        v: x.v + acc * ts,
        q: quat_mul(&x.q, &quat_exp(&(omega * ts))),
        accel_bias: x.accel_bias,
        gyro_bias: x.gyro_bias,
    }
}

/// Body-frame change over the same step: `p_{k+1} = p_k + R Δp`.
pub fn pose_delta(x: &NavState, u: &ImuSample, ts: f64, gravity: &Vector3<f64>) -> PoseDelta {
    let r = x.q.to_rotation_matrix();
    let acc = r * (u.specific_force - x.accel_bias) + gravity;
    PoseDelta {
        dp: r.transpose() * (x.v * ts + acc * (0.5 * ts * ts)),
        dphi: (u.angular_rate - x.gyro_bias) * ts,
    }
}
