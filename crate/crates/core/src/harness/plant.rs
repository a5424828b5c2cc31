//! Truth plant and sensor models.

use nalgebra::Vector4;
use rand::Rng;
use rand_distr::StandardNormal;

use super::scenario::{battery_model, Mismatch, SensorNoise};
use crate::estimator::Measurement;
use crate::innerloop::{thrust_direction, ActuatorCommand, GimbalGeometry, SyntheticPropeller};
use crate::quatkin::{rotmat, UnitQuat};
use crate::vehicle::{deriv_vec, StateVec, VehicleParams, VehicleState, IDX_P, IDX_Q, IDX_T, IDX_V, IDX_W};
use crate::{Result, Vec3};

/// Rigid body driven by the actuators through the servo linkage and the propeller pair.
/// Beyond the control model it carries a roll-torque lag, a CoG offset, external
/// acceleration, thrust gain, battery sag and ground contact.
#[derive(Debug, Clone)]
pub struct Plant {
    pub params: VehicleParams,
    pub geometry: GimbalGeometry,
    pub propeller: SyntheticPropeller,
    pub mismatch: Mismatch,
    x: StateVec,
    roll_torque: f64,
    direction: Vec3,
    cached_servo: Option<(f64, f64)>,
    on_ground: bool,
    accel: Vec3,
    ang_accel: Vec3,
}

impl Plant {
    pub fn new(
        x0: &VehicleState,
        params: VehicleParams,
        geometry: GimbalGeometry,
        propeller: SyntheticPropeller,
        mismatch: Mismatch,
    ) -> Self {
        Self {
            params,
            geometry,
            propeller,
            mismatch,
            x: x0.to_vector(),
            roll_torque: 0.0,
            direction: Vec3::x(),
            cached_servo: None,
            on_ground: x0.p.x <= 0.0,
            accel: Vec3::zeros(),
            ang_accel: Vec3::zeros(),
        }
    }

    pub fn state(&self) -> VehicleState {
        VehicleState::from_vector(&self.x).expect("plant quaternion stays unit")
    }

    pub fn state_vector(&self) -> &StateVec {
        &self.x
    }

    pub fn on_ground(&self) -> bool {
        self.on_ground
    }

    /// World-frame linear acceleration over the last step.
    pub fn acceleration(&self) -> Vec3 {
        self.accel
    }

    /// Body angular acceleration at the end of the last step.
    pub fn angular_acceleration(&self) -> Vec3 {
        self.ang_accel
    }

    pub fn roll_torque(&self) -> f64 {
        self.roll_torque
    }

    /// Thrust gain at time `t` from the constant scale and the battery.
    pub fn thrust_gain(&self, t: f64) -> f64 {
        self.mismatch.thrust_gain * battery_model(t, &self.mismatch.battery).1
    }

    /// Thrust vector and roll torque the actuators settle to under `cmd`.
    pub fn actuator_targets(&mut self, cmd: &ActuatorCommand, t: f64) -> Result<(Vec3, f64)> {
        let servo = (cmd.phi1, cmd.phi2);
        if self.cached_servo != Some(servo) {
            let (t1, t2) = self.geometry.servo_forward(cmd.phi1, cmd.phi2)?;
            self.direction = thrust_direction(t1, t2);
            self.cached_servo = Some(servo);
        }
        let g = self.thrust_gain(t);
        let thrust = self.propeller.thrust(cmd.dc1_us, cmd.dc2_us) * g;
        let torque = self.propeller.torque(cmd.dc1_us, cmd.dc2_us) * g;
        Ok((self.direction * thrust, torque))
    }

    fn deriv(&self, x: &StateVec, tau_x: f64, thrust_target: &Vec3, torque_target: f64, ext: &Vec3) -> (StateVec, f64) {
        let mut dx = deriv_vec(x, thrust_target, &self.params);
        let thrust: Vec3 = x.fixed_rows::<3>(IDX_T).into();
        let extra = thrust.cross(&Vec3::from(self.mismatch.cog_offset)) + Vec3::new(tau_x, 0.0, 0.0);
        let dw = self.params.inertia_inv() * extra;
        for i in 0..3 {
            dx[IDX_V + i] += ext[i];
            dx[IDX_W + i] += dw[i];
        }
        (dx, (torque_target - tau_x) / self.params.t_tau)
    }

    /// Advance by `dt` from time `t` with the actuator command held.
    pub fn step(&mut self, cmd: &ActuatorCommand, t: f64, dt: f64) -> Result<()> {
        let (tt, qt) = self.actuator_targets(cmd, t)?;
        let ext = self.mismatch.external_accel(t);
        let (x0, r0) = (self.x, self.roll_torque);
        let (k1, l1) = self.deriv(&x0, r0, &tt, qt, &ext);
        let (k2, l2) = self.deriv(&(x0 + k1 * (0.5 * dt)), r0 + l1 * 0.5 * dt, &tt, qt, &ext);
        let (k3, l3) = self.deriv(&(x0 + k2 * (0.5 * dt)), r0 + l2 * 0.5 * dt, &tt, qt, &ext);
        let (k4, l4) = self.deriv(&(x0 + k3 * dt), r0 + l3 * dt, &tt, qt, &ext);
        let mut xn = x0 + (k1 + k2 * 2.0 + k3 * 2.0 + k4) * (dt / 6.0);
        let qn = xn.fixed_rows::<4>(IDX_Q).norm();
        xn.fixed_rows_mut::<4>(IDX_Q).unscale_mut(qn);
        self.roll_torque = r0 + (l1 + 2.0 * l2 + 2.0 * l3 + l4) * (dt / 6.0);

        let v_prev: Vec3 = x0.fixed_rows::<3>(IDX_V).into();
        self.on_ground = false;
        if xn[IDX_P] <= 0.0 {
            let vertical = k4[IDX_V];
            if xn[IDX_V] <= 0.0 || vertical <= 0.0 {
                xn[IDX_P] = 0.0;
                xn.fixed_rows_mut::<3>(IDX_V).fill(0.0);
                self.on_ground = true;
            }
        }
        let v_new: Vec3 = xn.fixed_rows::<3>(IDX_V).into();
        self.accel = (v_new - v_prev) / dt;
        let (dn, _) = self.deriv(&xn, self.roll_torque, &tt, qt, &ext);
        self.ang_accel = dn.fixed_rows::<3>(IDX_W).into();
        self.x = xn;
        Ok(())
    }
}

fn gaussian<R: Rng>(rng: &mut R, sigma: f64) -> Vec3 {
    if sigma == 0.0 {
        return Vec3::zeros();
    }
    Vec3::new(rng.sample::<f64, _>(StandardNormal), rng.sample::<f64, _>(StandardNormal), rng.sample::<f64, _>(StandardNormal))
        * sigma
}

/// Noisy estimator measurement of the plant at time `t`.
pub fn measure<R: Rng>(plant: &Plant, noise: &SensorNoise, t: f64, rng: &mut R) -> Measurement {
    let x = plant.state();
    let dq = UnitQuat::from_rotation_vector(&gaussian(rng, noise.att));
    Measurement {
        p: x.p + gaussian(rng, noise.pos),
        q: x.q * dq,
        accel: plant.acceleration() + gaussian(rng, noise.accel),
        ang_accel: plant.angular_acceleration() + gaussian(rng, noise.ang_accel),
        t,
    }
}

/// Noisy gyro reading for the rate loop.
pub fn gyro<R: Rng>(plant: &Plant, noise: &SensorNoise, rng: &mut R) -> Vec3 {
    plant.state().omega + gaussian(rng, noise.gyro)
}

/// Body thrust vector that the controller believes an actuator command produces.
pub fn nominal_thrust(geometry: &GimbalGeometry, maps: &crate::innerloop::MotorMaps, cmd: &ActuatorCommand) -> Result<Vec3> {
    let (t1, t2) = geometry.servo_forward(cmd.phi1, cmd.phi2)?;
    Ok(thrust_direction(t1, t2) * maps.thrust_at(cmd.dc1_us, cmd.dc2_us))
}

/// `|‖q‖ − 1|` of a state vector's quaternion block.
pub fn quat_norm_error(x: &StateVec) -> f64 {
    let q: Vector4<f64> = x.fixed_rows::<4>(IDX_Q).into();
    (q.norm() - 1.0).abs()
}

/// World-frame thrust of a state.
pub fn world_thrust(x: &VehicleState) -> Vec3 {
    rotmat(&x.q) * x.thrust
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::innerloop::{allocate, default_motor_maps, AllocationLimits};

    #[test]
    fn hover_is_a_fixed_point() {
        let params = VehicleParams::default();
        let x0 = VehicleState::hover(Vec3::new(2.0, 0.0, 0.0), &params);
        let mut plant =
            Plant::new(&x0, params.clone(), GimbalGeometry::default(), SyntheticPropeller::default(), Mismatch::default());
        let maps = default_motor_maps();
        let hover = params.mass * params.gravity_magnitude();
        let cmd = allocate(&Vec3::zeros(), hover, &GimbalGeometry::default(), &maps, params.r_g, &AllocationLimits::default())
            .unwrap();
        for k in 0..4000 {
            plant.step(&cmd, k as f64 * 5e-4, 5e-4).unwrap();
        }
        let x = plant.state();
        assert!((x.p - x0.p).norm() < 1e-6, "{:?}", x.p);
        assert!(x.omega.norm() < 1e-6);
        assert!(quat_norm_error(plant.state_vector()) < 1e-12);
    }

    #[test]
    fn cog_offset_and_wind_act() {
        let params = VehicleParams::default();
        let x0 = VehicleState::hover(Vec3::new(2.0, 0.0, 0.0), &params);
        let mismatch = Mismatch { cog_offset: [0.0, 0.02, 0.0], wind_accel: [0.0, 0.5, 0.0], ..Default::default() };
        let mut plant = Plant::new(&x0, params.clone(), GimbalGeometry::default(), SyntheticPropeller::default(), mismatch);
        let maps = default_motor_maps();
        let hover = params.mass * params.gravity_magnitude();
        let cmd = allocate(&Vec3::zeros(), hover, &GimbalGeometry::default(), &maps, params.r_g, &AllocationLimits::default())
            .unwrap();
        plant.step(&cmd, 0.0, 5e-4).unwrap();
        // T x dr with T along x and dr along y is a +z torque
        let expect = hover * 0.02 / params.inertia[(2, 2)];
        assert!((plant.angular_acceleration().z - expect).abs() < 1e-3 * expect);
        assert!((plant.acceleration().y - 0.5).abs() < 1e-3);
    }

    #[test]
    fn ground_holds_the_vehicle() {
        let params = VehicleParams::default();
        let x0 = VehicleState::hover(Vec3::zeros(), &params);
        let mut plant =
            Plant::new(&x0, params.clone(), GimbalGeometry::default(), SyntheticPropeller::default(), Mismatch::default());
        let cmd = ActuatorCommand { phi1: 0.0, phi2: 0.0, dc1_us: 1200.0, dc2_us: 1200.0 };
        for k in 0..200 {
            plant.step(&cmd, k as f64 * 5e-4, 5e-4).unwrap();
        }
        assert!(plant.on_ground());
        assert_eq!(plant.state().p.x, 0.0);
        assert_eq!(plant.state().v, Vec3::zeros());
    }
}
