//! Torque and axial thrust to servo angles and motor duty cycles.

use serde::{Deserialize, Serialize};

use super::gimbal::{gimbal_angles, thrust_vector_from_torque, GimbalGeometry};
use super::motor_map::MotorMaps;
use crate::{GncError, Result, Vec3};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ActuatorCommand {
    pub phi1: f64,
    pub phi2: f64,
    pub dc1_us: f64,
    pub dc2_us: f64,
}

/// Mechanical limits used by the allocation.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AllocationLimits {
    /// Gimbal deflection limit per axis, deg.
    pub gimbal_range_deg: f64,
    /// Servo travel limit, deg.
    pub servo_range_deg: f64,
}

impl Default for AllocationLimits {
    fn default() -> Self {
        Self { gimbal_range_deg: 15.0, servo_range_deg: 45.0 }
    }
}

/// Result of the allocation chain with the intermediate quantities, for logging.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Allocation {
    pub command: ActuatorCommand,
    pub thrust: Vec3,
    pub theta: (f64, f64),
    /// True when the gimbal or motor commands had to be clamped.
    pub saturated: bool,
}

/// Strict allocation: any infeasible step is an error naming that step.
pub fn allocate(
    torque: &Vec3,
    thrust_x: f64,
    geom: &GimbalGeometry,
    maps: &MotorMaps,
    r_g: f64,
    limits: &AllocationLimits,
) -> Result<ActuatorCommand> {
    let step_err = |step: u8| move |e: GncError| GncError::AllocationFailure { step, reason: e.to_string() };
    let t = thrust_vector_from_torque(torque, thrust_x, r_g).map_err(step_err(1))?;
    let (t1, t2) = gimbal_angles(&t).map_err(step_err(2))?;
    let lim = limits.gimbal_range_deg.to_radians();
    if t1.abs() > lim || t2.abs() > lim {
        return Err(GncError::AllocationFailure {
            step: 2,
            reason: format!("gimbal angles ({t1:.4}, {t2:.4}) rad exceed the ±{lim:.4} rad range"),
        });
    }
    let (phi1, phi2) = servo_checked(geom, t1, t2, limits)?;
    let (dc1_us, dc2_us) = maps.motor_commands(torque.x, t.norm())?;
    Ok(ActuatorCommand { phi1, phi2, dc1_us, dc2_us })
}

fn servo_checked(geom: &GimbalGeometry, t1: f64, t2: f64, limits: &AllocationLimits) -> Result<(f64, f64)> {
    let (phi1, phi2) = geom
        .servo_angles(t1, t2)
        .map_err(|e| GncError::AllocationFailure { step: 3, reason: e.to_string() })?;
    let slim = limits.servo_range_deg.to_radians();
    if phi1.abs() > slim || phi2.abs() > slim {
        return Err(GncError::AllocationFailure {
            step: 3,
            reason: format!("servo angles ({phi1:.4}, {phi2:.4}) rad exceed the ±{slim:.4} rad travel"),
        });
    }
    Ok((phi1, phi2))
}

/// Flight allocation: gimbal angles are clipped to their range and the motor pair is driven
/// to the nearest feasible command instead of failing.
pub fn allocate_saturated(
    torque: &Vec3,
    thrust_x: f64,
    geom: &GimbalGeometry,
    maps: &MotorMaps,
    r_g: f64,
    limits: &AllocationLimits,
) -> Result<Allocation> {
    let t = thrust_vector_from_torque(torque, thrust_x.max(1e-3), r_g)
        .map_err(|e| GncError::AllocationFailure { step: 1, reason: e.to_string() })?;
    let (t1, t2) = gimbal_angles(&t).map_err(|e| GncError::AllocationFailure { step: 2, reason: e.to_string() })?;
    let lim = limits.gimbal_range_deg.to_radians();
    let (c1, c2) = (t1.clamp(-lim, lim), t2.clamp(-lim, lim));
    let (phi1, phi2) = servo_checked(geom, c1, c2, limits)?;
    let (dc1_us, dc2_us, motor_sat) = match maps.motor_commands(torque.x, t.norm()) {
        Ok((a, b)) => (a, b, false),
        Err(_) => {
            let (a, b) = maps.motor_commands_clamped(torque.x, t.norm());
            (a, b, true)
        }
    };
    Ok(Allocation {
        command: ActuatorCommand { phi1, phi2, dc1_us, dc2_us },
        thrust: t,
        theta: (c1, c2),
        saturated: motor_sat || c1 != t1 || c2 != t2,
    })
}
