//! Thrust vector, gimbal angles and the servo linkage.

use serde::{Deserialize, Serialize};

use crate::{GncError, Result, Vec3};

/// Arm lengths of the two-servo linkage, m. `a` is the servo horn, `c` the gimbal arm,
/// `b` the push rod; `d` and `e` place the servo axis relative to the gimbal hinge.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "GeometryConfig", into = "GeometryConfig")]
pub struct GimbalGeometry {
    pub a: f64,
    pub b: f64,
    pub c: f64,
    pub d: f64,
    pub e: f64,
}

#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct GeometryConfig {
    a: f64,
    b: f64,
    c: f64,
    d: f64,
    e: f64,
}

impl TryFrom<GeometryConfig> for GimbalGeometry {
    type Error = GncError;
    fn try_from(g: GeometryConfig) -> Result<Self> {
        GimbalGeometry::new(g.a, g.b, g.c, g.d, g.e)
    }
}

impl From<GimbalGeometry> for GeometryConfig {
    fn from(g: GimbalGeometry) -> Self {
        Self { a: g.a, b: g.b, c: g.c, d: g.d, e: g.e }
    }
}

impl Default for GimbalGeometry {
    /// Synthetic geometry with `a = c` and `b = √(d² + e²)`, for which the neutral pose
    /// maps to zero servo angles.
    fn default() -> Self {
        let (d, e) = (0.05, 0.04);
        Self { a: 0.03, b: f64::hypot(d, e), c: 0.03, d, e }
    }
}

impl GimbalGeometry {
    pub fn new(a: f64, b: f64, c: f64, d: f64, e: f64) -> Result<Self> {
        if [a, b, c, d, e].iter().any(|&l| !(l > 0.0 && l.is_finite())) {
            return Err(GncError::InvalidParams(format!(
                "gimbal arm lengths must be positive, got a={a} b={b} c={c} d={d} e={e}"
            )));
        }
        let g = Self { a, b, c, d, e };
        g.servo_angles(0.0, 0.0).map_err(|err| {
            GncError::InvalidParams(format!("neutral gimbal pose is not reachable: {err}"))
        })?;
        Ok(g)
    }

    /// Coefficients `(A, B, C)` of `A sinφ + B cosφ = C` for one servo.
    fn servo_equation(&self, servo: u8, theta1: f64, theta2: f64) -> (f64, f64, f64) {
        let (a, b, c, d, e) = (self.a, self.b, self.c, self.d, self.e);
        let (x, y, z) = match servo {
            1 => (c * theta1.sin(), d - c * theta1.cos(), 0.0),
            _ => {
                let s = c * theta2.sin() * theta1.sin();
                (c * theta1.cos() * theta2.sin(), d - c * theta2.cos(), s * s)
            }
        };
        let ex = e + x;
        (-2.0 * a * ex, 2.0 * a * y, b * b - z - ex * ex - y * y - a * a)
    }

    /// Linkage closure residual in m², zero when the servo and gimbal angles are consistent.
    pub fn closure_residual(&self, servo: u8, phi: f64, theta1: f64, theta2: f64) -> f64 {
        let (a, sb, c, d, e) = (self.a, self.b, self.c, self.d, self.e);
        let (sp, cp) = phi.sin_cos();
        match servo {
            1 => {
                let u = e - a * sp + c * theta1.sin();
                let v = d - c * theta1.cos() + a * cp;
                u * u + v * v - sb * sb
            }
            _ => {
                let u = e - a * sp + c * theta1.cos() * theta2.sin();
                let v = d - c * theta2.cos() + a * cp;
                let w = c * theta2.sin() * theta1.sin();
                u * u + v * v + w * w - sb * sb
            }
        }
    }

    /// Servo angles realising gimbal angles `(θ1, θ2)`, on the branch through the neutral pose.
    pub fn servo_angles(&self, theta1: f64, theta2: f64) -> Result<(f64, f64)> {
        let solve = |servo: u8| -> Result<f64> {
            let (a, b, c) = self.servo_equation(servo, theta1, theta2);
            let r = a.hypot(b);
            if !(c.abs() <= r) || r == 0.0 {
                return Err(GncError::UnreachablePose { servo, c, r });
            }
            let psi = a.atan2(b);
            let delta = (c / r).acos();
            let wrap = |x: f64| (x + std::f64::consts::PI).rem_euclid(std::f64::consts::TAU) - std::f64::consts::PI;
            let (p1, p2) = (wrap(psi + delta), wrap(psi - delta));
            Ok(if p1.abs() <= p2.abs() { p1 } else { p2 })
        };
        Ok((solve(1)?, solve(2)?))
    }

    /// Gimbal angles produced by servo angles `(φ1, φ2)`; used by the plant model.
    /// The first closure equation depends on θ1 only, the second on both.
    pub fn servo_forward(&self, phi1: f64, phi2: f64) -> Result<(f64, f64)> {
        let theta1 = self.invert_closure(|t| self.closure_residual(1, phi1, t, 0.0), 1)?;
        let theta2 = self.invert_closure(|t| self.closure_residual(2, phi2, theta1, t), 2)?;
        Ok((theta1, theta2))
    }

    /// Root of a closure residual nearest the neutral pose, bracketed by scanning outward.
    fn invert_closure(&self, f: impl Fn(f64) -> f64, servo: u8) -> Result<f64> {
        const STEP: f64 = 0.02;
        let f0 = f(0.0);
        if f0 == 0.0 {
            return Ok(0.0);
        }
        let mut bracket = None;
        for i in 1..=40 {
            let (inner, outer) = ((i - 1) as f64 * STEP, i as f64 * STEP);
            for sign in [1.0, -1.0] {
                if bracket.is_none() && (f(sign * inner) > 0.0) != (f(sign * outer) > 0.0) {
                    bracket = Some((sign * inner, sign * outer));
                }
            }
            if bracket.is_some() {
                break;
            }
        }
        let Some((mut lo, mut hi)) = bracket else {
            return Err(GncError::UnreachablePose { servo, c: f0, r: f(0.8) });
        };
        let mut flo = f(lo);
        for _ in 0..200 {
            let mid = 0.5 * (lo + hi);
            let fm = f(mid);
            if fm == 0.0 || (hi - lo).abs() < 1e-15 {
                return Ok(mid);
            }
            if (fm > 0.0) == (flo > 0.0) {
                lo = mid;
                flo = fm;
            } else {
                hi = mid;
            }
        }
        Ok(0.5 * (lo + hi))
    }
}

/// Equivalent thrust vector of the rate-loop torque: `T = [T_x, −τ_z/r_G, τ_y/r_G]`.
pub fn thrust_vector_from_torque(torque: &Vec3, thrust_x: f64, r_g: f64) -> Result<Vec3> {
    if !(r_g > 0.0) {
        return Err(GncError::InvalidArgument(format!("lever arm must be positive, got {r_g}")));
    }
    Ok(Vec3::new(thrust_x, -torque.z / r_g, torque.y / r_g))
}

/// Gimbal angles `(θ1, θ2)` pointing the thrust axis along `T`.
pub fn gimbal_angles(thrust: &Vec3) -> Result<(f64, f64)> {
    let n2 = thrust.norm_squared();
    let ty2 = thrust.y * thrust.y;
    if !(n2 > ty2) || !(thrust.x > 0.0) {
        return Err(GncError::DegenerateDirection { norm_sq: n2, ty_sq: ty2 });
    }
    let theta2 = (thrust.y / n2.sqrt()).asin();
    let theta1 = -(thrust.z / (n2 - ty2).sqrt()).clamp(-1.0, 1.0).asin();
    Ok((theta1, theta2))
}

/// Unit thrust direction in body axes for gimbal angles `(θ1, θ2)`.
pub fn thrust_direction(theta1: f64, theta2: f64) -> Vec3 {
    let (s1, c1) = theta1.sin_cos();
    let (s2, c2) = theta2.sin_cos();
    Vec3::new(c1 * c2, s2, -s1 * c2)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn thrust_vector_examples() {
        let t = thrust_vector_from_torque(&Vec3::zeros(), 11.0, 0.3).unwrap();
        assert_eq!(t, Vec3::new(11.0, 0.0, 0.0));
        let t = thrust_vector_from_torque(&Vec3::new(0.0, 0.06, -0.09), 11.0, 0.3).unwrap();
        assert!((t - Vec3::new(11.0, 0.3, 0.2)).norm() < 1e-14);
        // torque of the thrust about the CoG
        let tau = t.cross(&Vec3::new(0.3, 0.0, 0.0));
        assert!((tau.y - 0.06).abs() < 1e-14 && (tau.z + 0.09).abs() < 1e-14);
        assert!(thrust_vector_from_torque(&Vec3::zeros(), 11.0, 0.0).is_err());
    }

    #[test]
    fn gimbal_angle_examples() {
        assert_eq!(gimbal_angles(&Vec3::new(10.0, 0.0, 0.0)).unwrap(), (0.0, 0.0));
        let (t1, t2) = gimbal_angles(&Vec3::new(10.0, 1.0, 0.0)).unwrap();
        assert_eq!(t1, 0.0);
        assert!((t2 - (1.0 / 101f64.sqrt()).asin()).abs() < 1e-15);
        assert!((t2.to_degrees() - 5.71).abs() < 5e-3);
        assert!(matches!(gimbal_angles(&Vec3::new(0.0, 1.0, 0.0)), Err(GncError::DegenerateDirection { .. })));
    }

    #[test]
    fn gimbal_forward_round_trip() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for _ in 0..1000 {
            let t = Vec3::new(rng.random_range(5.0..20.0), rng.random_range(-3.0..3.0), rng.random_range(-3.0..3.0));
            let (t1, t2) = gimbal_angles(&t).unwrap();
            // recompose by explicit rotations: about body z by θ2, then about body y by -θ1
            let rz = nalgebra::Rotation3::from_axis_angle(&Vec3::z_axis(), t2);
            let ry = nalgebra::Rotation3::from_axis_angle(&Vec3::y_axis(), t1);
            let n = ry * rz * Vec3::x();
            assert!((n - t / t.norm()).amax() < 1e-12);
            assert!((thrust_direction(t1, t2) - n).amax() < 1e-12);
        }
    }

    #[test]
    fn neutral_servo_pose() {
        let g = GimbalGeometry::default();
        let (p1, p2) = g.servo_angles(0.0, 0.0).unwrap();
        assert!(p1.abs() < 1e-12 && p2.abs() < 1e-12);
        assert!(GimbalGeometry::new(0.03, 0.2, 0.03, 0.05, 0.04).is_err());
        assert!(GimbalGeometry::new(0.03, 0.064, -0.03, 0.05, 0.04).is_err());
    }

    fn bisect(f: impl Fn(f64) -> f64, mut lo: f64, mut hi: f64) -> f64 {
        let flo = f(lo);
        assert!(flo * f(hi) < 0.0);
        for _ in 0..200 {
            let mid = 0.5 * (lo + hi);
            if (f(mid) > 0.0) == (flo > 0.0) {
                lo = mid;
            } else {
                hi = mid;
            }
        }
        0.5 * (lo + hi)
    }

    #[test]
    fn servo_matches_root_find() {
        let g = GimbalGeometry::default();
        let th = 5f64.to_radians();
        let (p1, p2) = g.servo_angles(th, 0.0).unwrap();
        let (a, b, c, d, e) = (g.a, g.b, g.c, g.d, g.e);
        let line1 = |phi: f64| {
            (e - a * phi.sin() + c * th.sin()).powi(2) + (d - c * th.cos() + a * phi.cos()).powi(2) - b * b
        };
        let oracle = bisect(line1, -0.5, 0.5);
        assert!((p1 - oracle).abs() < 1e-9, "{p1} vs {oracle}");
        assert!(p2.abs() < 1e-12);
    }

    #[test]
    fn servo_residual_and_continuity() {
        let g = GimbalGeometry::default();
        let lim = 15f64.to_radians();
        let n = 300;
        let mut prev: Option<(f64, f64)> = None;
        for i in 0..=n {
            for j in 0..=20 {
                let t1 = -lim + 2.0 * lim * i as f64 / n as f64;
                let t2 = -lim + 2.0 * lim * j as f64 / 20.0;
                let (p1, p2) = g.servo_angles(t1, t2).unwrap();
                assert!(g.closure_residual(1, p1, t1, t2).abs() <= 1e-9);
                assert!(g.closure_residual(2, p2, t1, t2).abs() <= 1e-9);
            }
        }
        // dense diagonal sweep for branch jumps
        for i in 0..=20_000 {
            let s = -1.0 + 2.0 * i as f64 / 20_000.0;
            let (p1, p2) = g.servo_angles(lim * s, -lim * s * 0.7).unwrap();
            if let Some((q1, q2)) = prev {
                assert!((p1 - q1).abs() < 1e-3 && (p2 - q2).abs() < 1e-3);
            }
            prev = Some((p1, p2));
        }
    }

    #[test]
    fn servo_forward_inverts() {
        let g = GimbalGeometry::default();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for _ in 0..200 {
            let t1 = rng.random_range(-0.26..0.26);
            let t2 = rng.random_range(-0.26..0.26);
            let (p1, p2) = g.servo_angles(t1, t2).unwrap();
            let (f1, f2) = g.servo_forward(p1, p2).unwrap();
            assert!((f1 - t1).abs() < 1e-10 && (f2 - t2).abs() < 1e-10);
        }
    }
}
