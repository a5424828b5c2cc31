//! Guidance, navigation and control for a small thrust-vectored VTOL rocket.
//!
//! The crate is organised the way the flight software is layered:
//!
//! - [`quatkin`]: quaternion and frame kinematics shared by everything else.
//! - [`vehicle`]: nominal and disturbance-augmented 6-DoF model, RK4 discretisation, Jacobians.
//! - [`nlpsolver`]: SQP with a dual active-set QP subsolver.
//! - [`guidance`]: free-final-time minimum-fuel trajectory optimisation and replanning.
//! - [`estimator`]: EKF for the vehicle state and a Kalman filter for the model offset.
//! - [`mpc`]: offset-free tracking nonlinear MPC.
//! - [`innerloop`]: attitude/rate controllers, gimbal kinematics, motor maps, control allocation.
//! - [`harness`]: closed-loop plant simulation, scenarios, logging.
//!
//! World frame convention: `e1` points up (altitude is the x coordinate), the body x axis is
//! the thrust axis, quaternions are scalar-first `(w, x, y, z)`.

// `!(x > 0.0)` style checks are deliberate: they reject NaN along with out-of-range values.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod error;
pub mod estimator;
pub mod guidance;
pub mod harness;
pub mod innerloop;
pub mod mpc;
pub mod nlpsolver;
pub mod quatkin;
pub mod vehicle;

pub use error::{GncError, Result};

use nalgebra::{Matrix3, Vector3};

pub type Vec3 = Vector3<f64>;
pub type Mat3 = Matrix3<f64>;

/// Standard gravity magnitude, m/s².
pub const GRAVITY: f64 = 9.81;

/// World-frame unit vectors; `E1` is vertical up.
pub const E1: Vec3 = Vector3::new(1.0, 0.0, 0.0);
pub const E2: Vec3 = Vector3::new(0.0, 1.0, 0.0);
pub const E3: Vec3 = Vector3::new(0.0, 0.0, 1.0);
