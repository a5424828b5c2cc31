//! Attitude and rate loops plus control allocation.

pub mod allocation;
pub mod gimbal;
pub mod motor_map;
pub mod pid;

pub use allocation::{allocate, allocate_saturated, ActuatorCommand, Allocation, AllocationLimits};
pub use gimbal::{gimbal_angles, thrust_direction, thrust_vector_from_torque, GimbalGeometry};
pub use motor_map::{default_motor_maps, fit_motor_maps, BenchSample, MotorMaps, SyntheticPropeller};
pub use pid::{attitude_p, PidGains, RatePid};

use serde::{Deserialize, Serialize};

use crate::quatkin::UnitQuat;
use crate::{Result, Vec3};

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct InnerLoopConfig {
    pub gains: PidGains,
    pub geometry: GimbalGeometry,
    pub limits: AllocationLimits,
}

/// Cascade state: the latest rate set-point and the rate PID.
#[derive(Debug, Clone)]
pub struct InnerLoop {
    pub config: InnerLoopConfig,
    rate: RatePid,
    omega_sp: Vec3,
    omega_ff: Vec3,
    torque_ff: Vec3,
}

impl InnerLoop {
    pub fn new(config: InnerLoopConfig) -> Result<Self> {
        config.gains.validate()?;
        Ok(Self {
            config,
            rate: RatePid::new(config.gains),
            omega_sp: Vec3::zeros(),
            omega_ff: Vec3::zeros(),
            torque_ff: Vec3::zeros(),
        })
    }

    pub fn reset(&mut self) {
        self.rate.reset();
        self.omega_sp = Vec3::zeros();
        self.omega_ff = Vec3::zeros();
        self.torque_ff = Vec3::zeros();
    }

    /// Body rate and torque the outer loop plans for, added to the PID terms.
    pub fn set_feedforward(&mut self, omega: Vec3, torque: Vec3) {
        self.omega_ff = omega;
        self.torque_ff = torque;
    }

    pub fn rate_setpoint(&self) -> Vec3 {
        self.omega_sp
    }

    /// Attitude tick: refresh the rate set-point.
    pub fn attitude_tick(&mut self, q_hat: &UnitQuat, q_sp: &UnitQuat) -> Vec3 {
        let lim = self.config.gains.rate_limit;
        let fb = attitude_p(q_hat, q_sp, &self.config.gains);
        self.omega_sp = (fb + self.omega_ff).map(|w| w.clamp(-lim, lim));
        self.omega_sp
    }

    /// Rate tick: body torque demand.
    pub fn rate_tick(&mut self, omega_hat: &Vec3, dt: f64) -> Result<Vec3> {
        Ok(self.rate.update(omega_hat, &self.omega_sp, dt)? + self.torque_ff)
    }

    pub fn allocate(&self, torque: &Vec3, thrust_x: f64, maps: &MotorMaps, r_g: f64) -> Result<Allocation> {
        allocate_saturated(torque, thrust_x, &self.config.geometry, maps, r_g, &self.config.limits)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::quatkin::attitude_error;
    use crate::vehicle::{rk4_step_vec, DistVec, StateVec, VehicleParams, IDX_Q, IDX_T, IDX_W};

    #[test]
    fn closed_loop_tilt_recovery() {
        let params = VehicleParams::default();
        let hover = params.mass * params.gravity_magnitude();
        let maps = default_motor_maps();
        let geom = GimbalGeometry::default();
        for axis in [Vec3::y(), Vec3::z(), Vec3::new(0.0, 1.0, 1.0).normalize()] {
            let mut il = InnerLoop::new(InnerLoopConfig::default()).unwrap();
            let q0 = UnitQuat::from_axis_angle(&axis, 10f64.to_radians());
            let mut x = StateVec::zeros();
            x.fixed_rows_mut::<4>(IDX_Q).copy_from(&q0.as_vector());
            x[IDX_T] = hover;
            let dt = 1e-3;
            let mut max_sp: f64 = 0.0;
            let mut settled_at = None;
            for k in 0..3000 {
                let q = UnitQuat::from_vector(&x.fixed_rows::<4>(IDX_Q).into()).unwrap();
                if k % 4 == 0 {
                    let w = il.attitude_tick(&q, &UnitQuat::identity());
                    max_sp = max_sp.max(w.amax());
                }
                let omega: Vec3 = x.fixed_rows::<3>(IDX_W).into();
                let tau = il.rate_tick(&omega, dt).unwrap();
                // the plant sees the thrust vector actually realised by the gimbal
                let a = il.allocate(&tau, hover, &maps, params.r_g).unwrap();
                let (t1, t2) = geom.servo_forward(a.command.phi1, a.command.phi2).unwrap();
                let u = thrust_direction(t1, t2) * maps.thrust_at(a.command.dc1_us, a.command.dc2_us);
                x = rk4_step_vec(&x, &u, &DistVec::zeros(), dt, &params);
                let tilt = attitude_error(&q, &UnitQuat::identity()).angle();
                if tilt <= 1f64.to_radians() {
                    settled_at.get_or_insert(k as f64 * dt);
                } else {
                    settled_at = None;
                }
            }
            let t = settled_at.expect("attitude settles");
            assert!(t <= 2.0, "axis {axis:?} settled at {t}");
            assert!(max_sp < il.config.gains.rate_limit);
        }
    }
}
