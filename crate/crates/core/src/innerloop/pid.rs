//! Attitude P and body-rate PID.

use serde::{Deserialize, Serialize};

use crate::quatkin::{attitude_error, UnitQuat};
use crate::{GncError, Result, Vec3};

/// Cascade gains. Defaults are tuned in simulation against the default airframe.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PidGains {
    /// Attitude P gain, 1/s.
    pub att_p: [f64; 3],
    /// Rate set-point limit, rad/s.
    pub rate_limit: f64,
    pub rate_p: [f64; 3],
    pub rate_i: [f64; 3],
    pub rate_d: [f64; 3],
    /// Integrator clamp on the torque contribution, N·m.
    pub i_limit: [f64; 3],
    /// Cut-off of the derivative filter, Hz.
    pub d_cutoff_hz: f64,
}

impl Default for PidGains {
    fn default() -> Self {
        Self {
            att_p: [4.0, 6.0, 6.0],
            rate_limit: 3.0,
            rate_p: [0.02, 1.2, 1.2],
            rate_i: [0.01, 0.5, 0.5],
            rate_d: [0.0, 0.02, 0.02],
            i_limit: [0.02, 0.3, 0.3],
            d_cutoff_hz: 50.0,
        }
    }
}

impl PidGains {
    pub fn validate(&self) -> Result<()> {
        let gains = self.att_p.iter().chain(&self.rate_p).chain(&self.rate_i).chain(&self.rate_d);
        if gains.clone().any(|&g| !(g >= 0.0)) {
            return Err(GncError::InvalidParams("PID gains must be nonnegative".into()));
        }
        if self.i_limit.iter().any(|&l| !(l > 0.0)) || !(self.rate_limit > 0.0) || !(self.d_cutoff_hz > 0.0) {
            return Err(GncError::InvalidParams("integrator bounds, rate limit and cut-off must be positive".into()));
        }
        Ok(())
    }
}

/// `ω_sp = K ∘ attitude_error(q̂, q_sp)`, each axis clipped to the rate limit.
pub fn attitude_p(q_hat: &UnitQuat, q_sp: &UnitQuat, gains: &PidGains) -> Vec3 {
    let e = attitude_error(q_hat, q_sp).0;
    let lim = gains.rate_limit;
    Vec3::from_fn(|i, _| (gains.att_p[i] * e[i]).clamp(-lim, lim))
}

/// Per-axis PID with derivative on the filtered measurement and a clamped integrator.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RatePid {
    pub gains: PidGains,
    integral: Vec3,
    filtered: Option<Vec3>,
}

impl RatePid {
    pub fn new(gains: PidGains) -> Self {
        Self { gains, integral: Vec3::zeros(), filtered: None }
    }

    pub fn reset(&mut self) {
        self.integral = Vec3::zeros();
        self.filtered = None;
    }

    /// Integrator torque contribution.
    pub fn integral(&self) -> Vec3 {
        self.integral
    }

    pub fn update(&mut self, omega_hat: &Vec3, omega_sp: &Vec3, dt: f64) -> Result<Vec3> {
        if !(dt > 0.0) {
            return Err(GncError::InvalidArgument(format!("rate loop step must be positive, got {dt}")));
        }
        let g = &self.gains;
        let err = omega_sp - omega_hat;
        let tc = 1.0 / (2.0 * std::f64::consts::PI * g.d_cutoff_hz);
        let alpha = dt / (tc + dt);
        let prev = self.filtered.unwrap_or(*omega_hat);
        let filt = prev + (omega_hat - prev) * alpha;
        let d_meas = (filt - prev) / dt;
        self.filtered = Some(filt);
        let mut tau = Vec3::zeros();
        for i in 0..3 {
            let lim = g.i_limit[i];
            self.integral[i] = (self.integral[i] + g.rate_i[i] * err[i] * dt).clamp(-lim, lim);
            tau[i] = g.rate_p[i] * err[i] + self.integral[i] - g.rate_d[i] * d_meas[i];
        }
        Ok(tau)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn attitude_law() {
        let g = PidGains { att_p: [4.0; 3], ..Default::default() };
        let q = UnitQuat::from_axis_angle(&Vec3::new(0.3, 0.2, 0.1), 0.4);
        assert!(attitude_p(&q, &q, &g).amax() < 1e-15);
        let q_sp = UnitQuat::from_axis_angle(&Vec3::y(), 0.1);
        let w = attitude_p(&UnitQuat::identity(), &q_sp, &g);
        assert!((w - Vec3::new(0.0, 0.4, 0.0)).norm() < 1e-12);
        let far = UnitQuat::from_axis_angle(&Vec3::z(), 1.5);
        let w = attitude_p(&UnitQuat::identity(), &far, &g);
        assert_eq!(w.z, g.rate_limit);
    }

    #[test]
    fn rate_pid_first_tick_and_clamp() {
        let gains = PidGains { rate_p: [0.02, 0.0, 0.0], rate_i: [0.0; 3], rate_d: [0.0; 3], ..Default::default() };
        let mut pid = RatePid::new(gains);
        assert_eq!(pid.update(&Vec3::zeros(), &Vec3::zeros(), 1e-3).unwrap(), Vec3::zeros());
        let mut pid = RatePid::new(gains);
        let tau = pid.update(&Vec3::zeros(), &Vec3::new(1.0, 0.0, 0.0), 1e-3).unwrap();
        assert!((tau.x - 0.02).abs() < 1e-15);

        // derivative transient of a measurement step stays bounded by the filter
        let g2 = PidGains { rate_d: [0.01; 3], ..gains };
        let mut pid = RatePid::new(g2);
        pid.update(&Vec3::zeros(), &Vec3::zeros(), 1e-3).unwrap();
        let tau = pid.update(&Vec3::new(1.0, 0.0, 0.0), &Vec3::zeros(), 1e-3).unwrap();
        let tc = 1.0 / (2.0 * std::f64::consts::PI * 50.0);
        let bound = 0.02 + 0.01 * (1e-3 / (tc + 1e-3)) / 1e-3;
        assert!(tau.x.abs() <= bound + 1e-12);

        let mut pid = RatePid::new(PidGains::default());
        for _ in 0..100_000 {
            pid.update(&Vec3::zeros(), &Vec3::new(1.0, -1.0, 1.0), 1e-3).unwrap();
        }
        let lim = PidGains::default().i_limit;
        assert_eq!(pid.integral(), Vec3::new(lim[0], -lim[1], lim[2]));
    }
}
