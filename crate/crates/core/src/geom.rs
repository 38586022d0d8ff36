//! Attitude and small-rotation algebra.
//!
//! Quaternions are Hamilton, scalar-first `(w, x, y, z)`, and always unit
//! norm after every public operation. A quaternion `q` maps body-frame
//! vectors to the navigation frame: `v_n = R(q) v_b`.

use nalgebra::{Matrix3, Matrix4, Vector3, Vector4};
use serde::{Deserialize, Serialize};

/// 3x3 rotation matrix in SO(3).
pub type RotationMatrix = Matrix3<f64>;

/// Rotation vector (axis times angle, radians).
pub type AxisAngle = Vector3<f64>;

/// Below this rotation angle `quat_exp` switches to its series expansion.
pub const SMALL_ANGLE: f64 = 1e-8;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct UnitQuaternion {
    pub w: f64,
    pub x: f64,
    pub y: f64,
    pub z: f64,
}

impl Default for UnitQuaternion {
    fn default() -> Self {
        Self::identity()
    }
}

impl UnitQuaternion {
    pub const fn identity() -> Self {
        Self {
            w: 1.0,
            x: 0.0,
            y: 0.0,
            z: 0.0,
        }
    }

    /// Builds a unit quaternion from arbitrary (non-zero, finite) components.
    pub fn normalize(w: f64, x: f64, y: f64, z: f64) -> Self {
        let n = (w * w + x * x + y * y + z * z).sqrt();
        Self {
            w: w / n,
            x: x / n,
            y: y / n,
            z: z / n,
        }
    }

    pub fn from_vector4(v: &Vector4<f64>) -> Self {
        Self::normalize(v[0], v[1], v[2], v[3])
    }

    pub fn as_vector4(&self) -> Vector4<f64> {
        Vector4::new(self.w, self.x, self.y, self.z)
    }

    pub fn vec(&self) -> Vector3<f64> {
        Vector3::new(self.x, self.y, self.z)
    }

    pub fn norm(&self) -> f64 {
        self.as_vector4().norm()
    }

    pub fn conjugate(&self) -> Self {
        Self {
            w: self.w,
            x: -self.x,
            y: -self.y,
            z: -self.z,
        }
    }

    /// Left-multiplication matrix: `self ⊗ b == self.left_matrix() * b`.
    pub fn left_matrix(&self) -> Matrix4<f64> {
        let (w, x, y, z) = (self.w, self.x, self.y, self.z);
        Matrix4::new(
            w, -x, -y, -z, //
            x, w, -z, y, //
            y, z, w, -x, //
            z, -y, x, w,
        )
    }

    pub fn exp(v: &AxisAngle) -> Self {
        quat_exp(v)
    }

    /// Inverse of [`quat_exp`], returning the rotation vector with angle in `[0, π]`.
    pub fn log(&self) -> AxisAngle {
        // q and -q encode the same rotation; pick the short way round.
        let (w, v) = if self.w < 0.0 {
            (-self.w, -self.vec())
        } else {
            (self.w, self.vec())
        };
        let s = v.norm();
        if s < SMALL_ANGLE {
            return v * (2.0 / w);
        }
        let angle = 2.0 * s.atan2(w);
        v * (angle / s)
    }

    pub fn to_rotation_matrix(&self) -> RotationMatrix {
        quat_to_rot(self)
    }

    pub fn rotate(&self, v: &Vector3<f64>) -> Vector3<f64> {
        quat_to_rot(self) * v
    }

    /// Recovers the quaternion of a proper rotation matrix (Shepperd's method).
    pub fn from_rotation_matrix(r: &RotationMatrix) -> Self {
        let tr = r.trace();
        if tr > 0.0 {
            let s = (tr + 1.0).sqrt() * 2.0;
            Self::normalize(
                0.25 * s,
                (r[(2, 1)] - r[(1, 2)]) / s,
                (r[(0, 2)] - r[(2, 0)]) / s,
                (r[(1, 0)] - r[(0, 1)]) / s,
            )
        } else if r[(0, 0)] > r[(1, 1)] && r[(0, 0)] > r[(2, 2)] {
            let s = (1.0 + r[(0, 0)] - r[(1, 1)] - r[(2, 2)]).sqrt() * 2.0;
            Self::normalize(
                (r[(2, 1)] - r[(1, 2)]) / s,
                0.25 * s,
                (r[(0, 1)] + r[(1, 0)]) / s,
                (r[(0, 2)] + r[(2, 0)]) / s,
            )
        } else if r[(1, 1)] > r[(2, 2)] {
            let s = (1.0 + r[(1, 1)] - r[(0, 0)] - r[(2, 2)]).sqrt() * 2.0;
            Self::normalize(
                (r[(0, 2)] - r[(2, 0)]) / s,
                (r[(0, 1)] + r[(1, 0)]) / s,
                0.25 * s,
                (r[(1, 2)] + r[(2, 1)]) / s,
            )
        } else {
            let s = (1.0 + r[(2, 2)] - r[(0, 0)] - r[(1, 1)]).sqrt() * 2.0;
            Self::normalize(
                (r[(1, 0)] - r[(0, 1)]) / s,
                (r[(0, 2)] + r[(2, 0)]) / s,
                (r[(1, 2)] + r[(2, 1)]) / s,
                0.25 * s,
            )
        }
    }
}

impl std::ops::Mul for UnitQuaternion {
    type Output = UnitQuaternion;

    fn mul(self, rhs: UnitQuaternion) -> UnitQuaternion {
        quat_mul(&self, &rhs)
    }
}

/// Quaternion exponential of a rotation vector.
pub fn quat_exp(v: &AxisAngle) -> UnitQuaternion {
    let angle = v.norm();
    if angle < SMALL_ANGLE {
        let a2 = angle * angle;
        let half = 0.5 * (1.0 - a2 / 24.0);
        return UnitQuaternion::normalize(1.0 - a2 / 8.0, half * v.x, half * v.y, half * v.z);
    }
    let (s, c) = (0.5 * angle).sin_cos();
    let k = s / angle;
    UnitQuaternion::normalize(c, k * v.x, k * v.y, k * v.z)
}

/// Hamilton product `a ⊗ b`, renormalized.
pub fn quat_mul(a: &UnitQuaternion, b: &UnitQuaternion) -> UnitQuaternion {
    UnitQuaternion::normalize(
        a.w * b.w - a.x * b.x - a.y * b.y - a.z * b.z,
        a.w * b.x + a.x * b.w + a.y * b.z - a.z * b.y,
        a.w * b.y - a.x * b.z + a.y * b.w + a.z * b.x,
        a.w * b.z + a.x * b.y - a.y * b.x + a.z * b.w,
    )
}

pub fn quat_to_rot(q: &UnitQuaternion) -> RotationMatrix {
    let (w, x, y, z) = (q.w, q.x, q.y, q.z);
    let (xx, yy, zz) = (x * x, y * y, z * z);
    let (xy, xz, yz) = (x * y, x * z, y * z);
    let (wx, wy, wz) = (w * x, w * y, w * z);
    Matrix3::new(
        1.0 - 2.0 * (yy + zz),
        2.0 * (xy - wz),
        2.0 * (xz + wy),
        2.0 * (xy + wz),
        1.0 - 2.0 * (xx + zz),
        2.0 * (yz - wx),
        2.0 * (xz - wy),
        2.0 * (yz + wx),
        1.0 - 2.0 * (xx + yy),
    )
}

/// Cross-product matrix: `skew(v) * b == v.cross(&b)`.
pub fn skew(v: &Vector3<f64>) -> Matrix3<f64> {
    Matrix3::new(0.0, -v.z, v.y, v.z, 0.0, -v.x, -v.y, v.x, 0.0)
}

/// Small-perturbation quaternion `[1, ε/2]`, normalized.
pub fn error_quat(eps: &Vector3<f64>) -> UnitQuaternion {
    UnitQuaternion::normalize(1.0, 0.5 * eps.x, 0.5 * eps.y, 0.5 * eps.z)
}

/// Exact inverse of [`error_quat`] for quaternions with positive scalar part.
pub fn error_quat_inverse(q: &UnitQuaternion) -> Vector3<f64> {
    q.vec() * (2.0 / q.w)
}

/// Rotation matrix `exp([v]×)`.
pub fn rot_exp(v: &AxisAngle) -> RotationMatrix {
    quat_to_rot(&quat_exp(v))
}

/// Right Jacobian of SO(3): `exp(v + δ) ≈ exp(v) exp(J_r(v) δ)`.
pub fn right_jacobian(v: &AxisAngle) -> Matrix3<f64> {
    let angle = v.norm();
    let k = skew(v);
    let k2 = k * k;
    if angle < 1e-5 {
        return Matrix3::identity() - 0.5 * k + k2 / 6.0;
    }
    let a2 = angle * angle;
    Matrix3::identity() - k * ((1.0 - angle.cos()) / a2)
        + k2 * ((angle - angle.sin()) / (a2 * angle))
}

/// Rotation about the z axis.
pub fn rot_z(angle: f64) -> RotationMatrix {
    let (s, c) = angle.sin_cos();
    Matrix3::new(c, -s, 0.0, s, c, 0.0, 0.0, 0.0, 1.0)
}

pub fn rot_x(angle: f64) -> RotationMatrix {
    let (s, c) = angle.sin_cos();
    Matrix3::new(1.0, 0.0, 0.0, 0.0, c, -s, 0.0, s, c)
}

pub fn rot_y(angle: f64) -> RotationMatrix {
    let (s, c) = angle.sin_cos();
    Matrix3::new(c, 0.0, s, 0.0, 1.0, 0.0, -s, 0.0, c)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use std::f64::consts::PI;

    fn arb_vec(bound: f64) -> impl Strategy<Value = Vector3<f64>> {
        (-bound..bound, -bound..bound, -bound..bound).prop_map(|(x, y, z)| Vector3::new(x, y, z))
    }

    fn arb_quat() -> impl Strategy<Value = UnitQuaternion> {
        (-1.0..1.0f64, -1.0..1.0f64, -1.0..1.0f64, -1.0..1.0f64)
            .prop_filter("non-degenerate", |(w, x, y, z)| {
                w * w + x * x + y * y + z * z > 1e-3
            })
            .prop_map(|(w, x, y, z)| UnitQuaternion::normalize(w, x, y, z))
    }

    fn close_quat(a: &UnitQuaternion, b: &UnitQuaternion, tol: f64) -> bool {
        (a.as_vector4() - b.as_vector4()).amax() <= tol
    }

    #[test]
    fn exp_identity_and_half_turn() {
        assert_eq!(quat_exp(&Vector3::zeros()), UnitQuaternion::identity());
        let q = quat_exp(&Vector3::new(PI, 0.0, 0.0));
        assert!(close_quat(
            &q,
            &UnitQuaternion {
                w: 0.0,
                x: 1.0,
                y: 0.0,
                z: 0.0
            },
            1e-15
        ));
    }

    #[test]
    fn exp_small_angle_matches_closed_form() {
        // For |v| = 1e-12 the closed form in extended precision is
        // w = cos(5e-13) = 1 - 1.25e-25, x = sin(5e-13)/1e-12 * 1e-12 = 5e-13 - O(1e-38).
        let q = quat_exp(&Vector3::new(1e-12, 0.0, 0.0));
        assert!((q.w - 1.0).abs() <= 1e-15);
        assert!((q.x - 5e-13).abs() <= 1e-15);
        assert_eq!(q.y, 0.0);
        assert_eq!(q.z, 0.0);
    }

    #[test]
    fn mul_identity_and_inverse() {
        let q = UnitQuaternion::normalize(0.3, -0.5, 0.7, 0.1);
        assert!(close_quat(
            &quat_mul(&UnitQuaternion::identity(), &q),
            &q,
            1e-15
        ));
        assert!(close_quat(
            &quat_mul(&q, &q.conjugate()),
            &UnitQuaternion::identity(),
            1e-12
        ));
    }

    #[test]
    fn rot_of_quarter_turn_about_x() {
        assert_eq!(
            quat_to_rot(&UnitQuaternion::identity()),
            Matrix3::identity()
        );
        let r = quat_to_rot(&quat_exp(&Vector3::new(PI / 2.0, 0.0, 0.0)));
        let v = r * Vector3::new(0.0, 1.0, 0.0);
        assert!((v - Vector3::new(0.0, 0.0, 1.0)).norm() < 1e-15);
    }

    #[test]
    fn skew_basics() {
        assert_eq!(skew(&Vector3::zeros()), Matrix3::zeros());
        let out = skew(&Vector3::x()) * Vector3::y();
        assert_eq!(out, Vector3::z());
    }

    #[test]
    fn error_quat_cases() {
        assert_eq!(error_quat(&Vector3::zeros()), UnitQuaternion::identity());
        let e = Vector3::new(1e-3, 0.0, 0.0);
        assert!(close_quat(&error_quat(&e), &quat_exp(&e), 1e-9));
        let big = error_quat(&Vector3::new(0.2, 0.0, 0.0));
        assert!((big.norm() - 1.0).abs() < 1e-15);
        let back = error_quat_inverse(&error_quat(&Vector3::new(0.01, -0.02, 0.03)));
        assert!((back - Vector3::new(0.01, -0.02, 0.03)).norm() < 1e-15);
    }

    #[test]
    fn rotation_matrix_round_trip() {
        let q = UnitQuaternion::normalize(-0.2, 0.4, -0.8, 0.3);
        let back = UnitQuaternion::from_rotation_matrix(&quat_to_rot(&q));
        let same = close_quat(&back, &q, 1e-12)
            || close_quat(
                &back,
                &UnitQuaternion::normalize(0.2, -0.4, 0.8, -0.3),
                1e-12,
            );
        assert!(same);
    }

    #[test]
    fn right_jacobian_matches_finite_differences() {
        let v = Vector3::new(0.4, -0.3, 0.9);
        let jr = right_jacobian(&v);
        let h = 1e-6;
        for c in 0..3 {
            let mut d = Vector3::zeros();
            d[c] = h;
            // log(exp(v)^T exp(v + d)) ≈ J_r d
            let plus = (quat_exp(&v).conjugate() * quat_exp(&(v + d))).log();
            let minus = (quat_exp(&v).conjugate() * quat_exp(&(v - d))).log();
            let col = (plus - minus) / (2.0 * h);
            assert!(
                (col - jr.column(c)).norm() < 1e-8,
                "column {c}: {col} vs {}",
                jr.column(c)
            );
        }
    }

    proptest! {
        #[test]
        fn product_matches_matrix_form(a in arb_quat(), b in arb_quat()) {
            let direct = quat_mul(&a, &b).as_vector4();
            let oracle = a.left_matrix() * b.as_vector4();
            prop_assert!((direct - oracle).amax() < 1e-14);
        }

        #[test]
        fn rotation_is_homomorphism(a in arb_quat(), b in arb_quat()) {
            let lhs = quat_to_rot(&quat_mul(&a, &b));
            let rhs = quat_to_rot(&a) * quat_to_rot(&b);
            prop_assert!((lhs - rhs).amax() < 1e-10);
        }

        #[test]
        fn rotation_is_orthonormal(q in arb_quat()) {
            let r = quat_to_rot(&q);
            prop_assert!((r.transpose() * r - Matrix3::identity()).amax() < 1e-12);
            prop_assert!((r.determinant() - 1.0).abs() < 1e-10);
        }

        #[test]
        fn log_inverts_exp(v in arb_vec(1.8)) {
            prop_assume!(v.norm() < PI - 0.1);
            let back = quat_exp(&v).log();
            prop_assert!((back - v).norm() < 1e-9);
        }

        #[test]
        fn skew_is_cross_product(v in arb_vec(10.0), b in arb_vec(10.0)) {
            let s = skew(&v);
            prop_assert_eq!(s.transpose(), -s);
            prop_assert!((s * b - v.cross(&b)).amax() <= 1e-15 * (1.0 + v.norm() * b.norm()) * 4.0);
        }
    }
}
