//! Quaternion and frame kinematics.
//!
//! Quaternions are Hamilton, scalar-first `(w, x, y, z)`, and map body vectors into the world
//! frame. Angular velocities are expressed in the body frame.

use std::ops::{Mul, Neg};

use nalgebra::{Matrix3, Matrix4, Vector3, Vector4};
use serde::{Deserialize, Serialize};

use crate::{GncError, Mat3, Result, Vec3};

/// Tolerance on `|q| - 1` accepted by checked constructors.
pub const UNIT_TOL: f64 = 1e-9;

/// Largest rotation angle integrated by a single RK4 substep in [`quat_step`].
const MAX_SUBSTEP_ANGLE: f64 = 0.01;

/// Unit quaternion, scalar first.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct UnitQuat {
    pub w: f64,
    pub x: f64,
    pub y: f64,
    pub z: f64,
}

impl Default for UnitQuat {
    fn default() -> Self {
        Self::identity()
    }
}

impl UnitQuat {
    pub const fn identity() -> Self {
        Self { w: 1.0, x: 0.0, y: 0.0, z: 0.0 }
    }

    /// Checked constructor: the components must already have unit norm.
    pub fn new(w: f64, x: f64, y: f64, z: f64) -> Result<Self> {
        let n = (w * w + x * x + y * y + z * z).sqrt();
        if !n.is_finite() || (n - 1.0).abs() > UNIT_TOL {
            return Err(GncError::InvalidArgument(format!(
                "quaternion norm {n} is not 1 within {UNIT_TOL}"
            )));
        }
        Ok(Self { w, x, y, z })
    }

    /// Normalising constructor.
    pub fn normalize(w: f64, x: f64, y: f64, z: f64) -> Result<Self> {
        let n = (w * w + x * x + y * y + z * z).sqrt();
        if !(n.is_finite() && n > 1e-12) {
            return Err(GncError::InvalidArgument(format!("cannot normalise quaternion of norm {n}")));
        }
        Ok(Self { w: w / n, x: x / n, y: y / n, z: z / n })
    }

    pub fn from_vector(v: &Vector4<f64>) -> Result<Self> {
        Self::normalize(v[0], v[1], v[2], v[3])
    }

    /// Rotation of `angle` radians about `axis` (need not be normalised).
    pub fn from_axis_angle(axis: &Vec3, angle: f64) -> Self {
        let n = axis.norm();
        if n < 1e-15 {
            return Self::identity();
        }
        let (s, c) = (0.5 * angle).sin_cos();
        let a = axis / n;
        Self { w: c, x: s * a.x, y: s * a.y, z: s * a.z }
    }

    /// Quaternion of the rotation vector `r` (axis times angle).
    pub fn from_rotation_vector(r: &Vec3) -> Self {
        Self::from_axis_angle(r, r.norm())
    }

    pub fn as_vector(&self) -> Vector4<f64> {
        Vector4::new(self.w, self.x, self.y, self.z)
    }

    pub fn norm(&self) -> f64 {
        self.as_vector().norm()
    }

    pub fn conjugate(&self) -> Self {
        Self { w: self.w, x: -self.x, y: -self.y, z: -self.z }
    }

    /// Rotate a body-frame vector into the world frame.
    pub fn rotate(&self, v: &Vec3) -> Vec3 {
        rotmat(self) * v
    }
}

impl Mul for UnitQuat {
    type Output = UnitQuat;

    fn mul(self, b: UnitQuat) -> UnitQuat {
        let a = self;
        let w = a.w * b.w - a.x * b.x - a.y * b.y - a.z * b.z;
        let x = a.w * b.x + a.x * b.w + a.y * b.z - a.z * b.y;
        let y = a.w * b.y - a.x * b.z + a.y * b.w + a.z * b.x;
        let z = a.w * b.z + a.x * b.y - a.y * b.x + a.z * b.w;
        // product of unit quaternions; renormalise to kill rounding drift
        let n = (w * w + x * x + y * y + z * z).sqrt();
        UnitQuat { w: w / n, x: x / n, y: y / n, z: z / n }
    }
}

impl Neg for UnitQuat {
    type Output = UnitQuat;

    fn neg(self) -> UnitQuat {
        UnitQuat { w: -self.w, x: -self.x, y: -self.y, z: -self.z }
    }
}

/// Attitude error parameterised as a rotation vector (axis times angle, radians).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RotationVector(pub Vec3);

impl RotationVector {
    pub fn angle(&self) -> f64 {
        self.0.norm()
    }
}

/// Rotation matrix of `q`, body to world.
pub fn rotmat(q: &UnitQuat) -> Mat3 {
    rotmat_components(q.w, q.x, q.y, q.z)
}

/// [`rotmat`] on raw components; rejects inputs whose norm is not 1 within [`UNIT_TOL`].
pub fn rotmat_checked(q: &Vector4<f64>) -> Result<Mat3> {
    let n = q.norm();
    if (n - 1.0).abs() > UNIT_TOL {
        return Err(GncError::InvalidArgument(format!("rotmat of non-unit quaternion (norm {n})")));
    }
    Ok(rotmat_components(q[0], q[1], q[2], q[3]))
}

/// The rotation matrix polynomial evaluated on arbitrary components, no norm check.
pub(crate) fn rotmat_components(w: f64, x: f64, y: f64, z: f64) -> Mat3 {
    Matrix3::new(
        1.0 - 2.0 * (y * y + z * z),
        2.0 * (x * y - z * w),
        2.0 * (x * z + y * w),
        2.0 * (x * y + z * w),
        1.0 - 2.0 * (x * x + z * z),
        2.0 * (y * z - x * w),
        2.0 * (x * z - y * w),
        2.0 * (y * z + x * w),
        1.0 - 2.0 * (x * x + y * y),
    )
}

/// Quaternion propagation matrix: `q_dot = 0.5 * Q(w) * q` for body rates `w`.
pub fn omega_matrix(w: &Vec3) -> Matrix4<f64> {
    let (x, y, z) = (w.x, w.y, w.z);
    Matrix4::new(
        0.0, -x, -y, -z, //
        x, 0.0, z, -y, //
        y, -z, 0.0, x, //
        z, y, -x, 0.0,
    )
}

/// `Q(w) * q` written as a linear map of `w`: returns the 4x3 matrix `X(q)` with `Q(w) q = X(q) w`.
pub(crate) fn omega_rate_jacobian(q: &Vector4<f64>) -> nalgebra::Matrix4x3<f64> {
    let (w, x, y, z) = (q[0], q[1], q[2], q[3]);
    nalgebra::Matrix4x3::new(
        -x, -y, -z, //
        w, -z, y, //
        z, w, -x, //
        -y, x, w,
    )
}

/// Propagate `q` under constant body rate `omega` for `dt` seconds.
///
/// Integrates `q_dot = 0.5 Q(omega) q` with classical RK4, subdividing so that no substep
/// rotates by more than 0.01 rad, and renormalises the result.
pub fn quat_step(q: &UnitQuat, omega: &Vec3, dt: f64) -> UnitQuat {
    debug_assert!(dt > 0.0);
    let rate = omega.norm();
    if rate == 0.0 {
        return *q;
    }
    let n = ((rate * dt / MAX_SUBSTEP_ANGLE).ceil() as usize).max(1);
    let h = dt / n as f64;
    let a = omega_matrix(omega) * 0.5;
    let mut v = q.as_vector();
    for _ in 0..n {
        let k1 = a * v;
        let k2 = a * (v + k1 * (0.5 * h));
        let k3 = a * (v + k2 * (0.5 * h));
        let k4 = a * (v + k3 * h);
        v += (k1 + k2 * 2.0 + k3 * 2.0 + k4) * (h / 6.0);
        v /= v.norm();
    }
    UnitQuat { w: v[0], x: v[1], y: v[2], z: v[3] }
}

/// Rotation vector of `q^-1 * q_sp` (the rotation taking `q` to `q_sp`, in the body frame of `q`),
/// using the shortest path.
pub fn attitude_error(q: &UnitQuat, q_sp: &UnitQuat) -> RotationVector {
    let mut e = q.conjugate() * *q_sp;
    if e.w < 0.0 {
        e = -e;
    }
    let v = Vector3::new(e.x, e.y, e.z);
    let s = v.norm();
    if s < 1e-12 {
        return RotationVector(v * 2.0);
    }
    let angle = 2.0 * s.atan2(e.w);
    RotationVector(v * (angle / s))
}

/// Skew-symmetric cross-product matrix: `skew(a) * b = a x b`.
pub fn skew(a: &Vec3) -> Mat3 {
    Matrix3::new(0.0, -a.z, a.y, a.z, 0.0, -a.x, -a.y, a.x, 0.0)
}

/// Rodrigues formula, used as an oracle for rotation propagation.
pub fn so3_exp(r: &Vec3) -> Mat3 {
    let th = r.norm();
    let k = skew(r);
    if th < 1e-12 {
        return Mat3::identity() + k;
    }
    Mat3::identity() + k * (th.sin() / th) + k * k * ((1.0 - th.cos()) / (th * th))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use std::f64::consts::{FRAC_PI_2, PI};

    fn quat_strategy() -> impl Strategy<Value = UnitQuat> {
        (-1.0..1.0f64, -1.0..1.0f64, -1.0..1.0f64, -1.0..1.0f64)
            .prop_filter("non-degenerate", |(w, x, y, z)| w * w + x * x + y * y + z * z > 0.01)
            .prop_map(|(w, x, y, z)| UnitQuat::normalize(w, x, y, z).unwrap())
    }

    #[test]
    fn rotmat_identity() {
        assert_eq!(rotmat(&UnitQuat::identity()), Mat3::identity());
    }

    #[test]
    fn rotmat_quarter_turn_about_z() {
        let h = 0.5f64.sqrt();
        let r = rotmat(&UnitQuat::new(h, 0.0, 0.0, h).unwrap());
        let expect = Matrix3::new(0.0, -1.0, 0.0, 1.0, 0.0, 0.0, 0.0, 0.0, 1.0);
        assert!((r - expect).abs().max() < 1e-15);
    }

    #[test]
    fn rotmat_rejects_non_unit() {
        assert!(rotmat_checked(&Vector4::new(1.0, 0.1, 0.0, 0.0)).is_err());
        assert!(UnitQuat::new(1.0, 1e-3, 0.0, 0.0).is_err());
    }

    #[test]
    fn omega_matrix_zero_and_unit_x() {
        assert_eq!(omega_matrix(&Vec3::zeros()), Matrix4::zeros());
        let q = omega_matrix(&Vec3::new(1.0, 0.0, 0.0));
        let mut expect = Matrix4::zeros();
        expect[(1, 0)] = 1.0;
        expect[(0, 1)] = -1.0;
        expect[(3, 2)] = -1.0;
        expect[(2, 3)] = 1.0;
        assert_eq!(q, expect);
    }

    #[test]
    fn quat_step_zero_rate_is_identity_map() {
        let q = UnitQuat::from_axis_angle(&Vec3::new(1.0, 2.0, 3.0), 0.7);
        assert_eq!(quat_step(&q, &Vec3::zeros(), 0.1), q);
    }

    #[test]
    fn quat_step_quarter_turn() {
        let q = quat_step(&UnitQuat::identity(), &Vec3::new(0.0, 0.0, PI), 0.5);
        let h = 0.5f64.sqrt();
        let expect = Vector4::new(h, 0.0, 0.0, h);
        assert!((q.as_vector() - expect).abs().max() < 1e-6);
    }

    #[test]
    fn attitude_error_examples() {
        let q = UnitQuat::from_axis_angle(&Vec3::new(0.3, -1.0, 0.2), 1.1);
        assert!(attitude_error(&q, &q).0.norm() < 1e-15);
        assert!(attitude_error(&q, &-q).0.norm() < 1e-15);
        let sp = UnitQuat::from_axis_angle(&Vec3::y(), FRAC_PI_2);
        let e = attitude_error(&UnitQuat::identity(), &sp);
        assert!((e.0 - Vec3::new(0.0, FRAC_PI_2, 0.0)).norm() < 1e-9);
    }

    #[test]
    fn quat_step_matches_matrix_exponential_single_axis() {
        for axis in [Vec3::x(), Vec3::y(), Vec3::z()] {
            let omega = axis * 2.0;
            let q0 = UnitQuat::from_axis_angle(&Vec3::new(0.2, 0.5, -0.3), 0.4);
            for dt in [0.001, 0.005, 0.02] {
                let r = rotmat(&quat_step(&q0, &omega, dt));
                let oracle = rotmat(&q0) * so3_exp(&(omega * dt));
                let bound = (omega.norm() * dt).powi(5) + 1e-14;
                assert!((r - oracle).abs().max() < bound, "dt {dt}");
            }
        }
    }

    proptest! {
        #[test]
        fn rotmat_orthonormal(q in quat_strategy()) {
            let r = rotmat(&q);
            prop_assert!((r.transpose() * r - Mat3::identity()).abs().max() < 1e-12);
            prop_assert!((r.determinant() - 1.0).abs() < 1e-12);
            prop_assert_eq!(r, rotmat(&-q));
        }

        #[test]
        fn omega_matrix_skew(x in -10.0..10.0f64, y in -10.0..10.0f64, z in -10.0..10.0f64) {
            let q = omega_matrix(&Vec3::new(x, y, z));
            prop_assert!((q + q.transpose()).abs().max() <= 1e-15);
        }

        #[test]
        fn quat_step_keeps_unit_norm(q in quat_strategy(), x in -5.0..5.0f64, y in -5.0..5.0f64,
                                     z in -5.0..5.0f64, dt in 1e-4..1.0f64) {
            let q1 = quat_step(&q, &Vec3::new(x, y, z), dt);
            prop_assert!((q1.norm() - 1.0).abs() <= 1e-12);
        }

        #[test]
        fn attitude_error_self_is_zero(q in quat_strategy()) {
            prop_assert!(attitude_error(&q, &q).angle() < 1e-12);
        }

        #[test]
        fn attitude_error_recomposes(q in quat_strategy(), sp in quat_strategy()) {
            let e = attitude_error(&q, &sp);
            prop_assert!(e.angle() <= PI + 1e-12);
            let back = q * UnitQuat::from_rotation_vector(&e.0);
            prop_assert!((rotmat(&back) - rotmat(&sp)).abs().max() < 1e-9);
        }
    }
}
