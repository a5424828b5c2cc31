//! Vehicle dynamics: nominal rigid-body model with first-order thrust lag, the
//! disturbance-augmented model, RK4 discretisation and its Jacobians.
//!
//! Flattened state layout (16): `p[0..3] v[3..6] q[6..10] omega[10..13] T[13..16]`.
//! Disturbance layout (9): `dv[0..3] da[3..6] dalpha[6..9]`.

use nalgebra::{Matrix3, SMatrix, SVector, Vector3, Vector4};
use serde::{Deserialize, Serialize};

use crate::quatkin::{omega_matrix, omega_rate_jacobian, rotmat, rotmat_components, skew, UnitQuat};
use crate::{GncError, Mat3, Result, Vec3, GRAVITY};

pub const NX: usize = 16;
pub const NW: usize = 9;
pub const NU: usize = 3;

pub type StateVec = SVector<f64, NX>;
pub type DistVec = SVector<f64, NW>;
pub type StateMat = SMatrix<f64, NX, NX>;

pub const IDX_P: usize = 0;
pub const IDX_V: usize = 3;
pub const IDX_Q: usize = 6;
pub const IDX_W: usize = 10;
pub const IDX_T: usize = 13;

/// Full rigid-body state.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct VehicleState {
    /// Position, world frame, m.
    pub p: Vec3,
    /// Velocity, world frame, m/s.
    pub v: Vec3,
    pub q: UnitQuat,
    /// Body rates, rad/s.
    pub omega: Vec3,
    /// Actual thrust vector, body frame, N.
    pub thrust: Vec3,
}

impl VehicleState {
    /// Level hover at `p` with the thrust state balancing gravity.
    pub fn hover(p: Vec3, params: &VehicleParams) -> Self {
        Self {
            p,
            v: Vec3::zeros(),
            q: UnitQuat::identity(),
            omega: Vec3::zeros(),
            thrust: Vec3::new(params.mass * params.gravity_magnitude(), 0.0, 0.0),
        }
    }

    pub fn to_vector(&self) -> StateVec {
        let mut x = StateVec::zeros();
        x.fixed_rows_mut::<3>(IDX_P).copy_from(&self.p);
        x.fixed_rows_mut::<3>(IDX_V).copy_from(&self.v);
        x.fixed_rows_mut::<4>(IDX_Q).copy_from(&self.q.as_vector());
        x.fixed_rows_mut::<3>(IDX_W).copy_from(&self.omega);
        x.fixed_rows_mut::<3>(IDX_T).copy_from(&self.thrust);
        x
    }

    /// Inverse of [`to_vector`](Self::to_vector); the quaternion block is normalised.
    pub fn from_vector(x: &StateVec) -> Result<Self> {
        Ok(Self {
            p: x.fixed_rows::<3>(IDX_P).into(),
            v: x.fixed_rows::<3>(IDX_V).into(),
            q: UnitQuat::from_vector(&x.fixed_rows::<4>(IDX_Q).into())?,
            omega: x.fixed_rows::<3>(IDX_W).into(),
            thrust: x.fixed_rows::<3>(IDX_T).into(),
        })
    }
}

/// Desired body-frame thrust vector, N.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ControlInput(pub Vec3);

/// Constant model offset `w = [dv, da, dalpha]`.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct DisturbanceVector {
    /// Velocity mismatch, m/s (enters the position derivative).
    pub dv: Vec3,
    /// Acceleration mismatch, world frame, m/s².
    pub da: Vec3,
    /// Angular acceleration mismatch, body frame, rad/s².
    pub dalpha: Vec3,
}

impl DisturbanceVector {
    pub fn zero() -> Self {
        Self::default()
    }

    pub fn to_vector(&self) -> DistVec {
        let mut w = DistVec::zeros();
        w.fixed_rows_mut::<3>(0).copy_from(&self.dv);
        w.fixed_rows_mut::<3>(3).copy_from(&self.da);
        w.fixed_rows_mut::<3>(6).copy_from(&self.dalpha);
        w
    }

    pub fn from_vector(w: &DistVec) -> Self {
        Self {
            dv: w.fixed_rows::<3>(0).into(),
            da: w.fixed_rows::<3>(3).into(),
            dalpha: w.fixed_rows::<3>(6).into(),
        }
    }
}

/// Physical parameters of the model. Construct through [`VehicleParams::new`] so the inertia
/// inverse is cached and the invariants hold.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "VehicleConfig", into = "VehicleConfig")]
pub struct VehicleParams {
    pub mass: f64,
    pub gravity: Vec3,
    pub inertia: Mat3,
    inertia_inv: Mat3,
    /// Hinge-to-CoG distance along body x, m.
    pub r_g: f64,
    /// Thrust first-order time constant, s.
    pub t_tau: f64,
}

/// Serialised form of [`VehicleParams`]. Defaults for inertia, lever arm and thrust time
/// constant are engineering estimates for a 1.05 m tall, 1.16 kg airframe.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct VehicleConfig {
    pub mass: f64,
    pub gravity: [f64; 3],
    pub inertia: [[f64; 3]; 3],
    pub r_g: f64,
    pub t_tau: f64,
}

impl Default for VehicleConfig {
    fn default() -> Self {
        Self {
            mass: 1.16,
            gravity: [-GRAVITY, 0.0, 0.0],
            inertia: [[0.005, 0.0, 0.0], [0.0, 0.1, 0.0], [0.0, 0.0, 0.1]],
            r_g: 0.3,
            t_tau: 0.025,
        }
    }
}

impl TryFrom<VehicleConfig> for VehicleParams {
    type Error = GncError;

    fn try_from(c: VehicleConfig) -> Result<Self> {
        let j = Matrix3::from_fn(|i, k| c.inertia[i][k]);
        VehicleParams::new(c.mass, Vec3::from(c.gravity), j, c.r_g, c.t_tau)
    }
}

impl From<VehicleParams> for VehicleConfig {
    fn from(p: VehicleParams) -> Self {
        let mut inertia = [[0.0; 3]; 3];
        for (i, row) in inertia.iter_mut().enumerate() {
            for (k, v) in row.iter_mut().enumerate() {
                *v = p.inertia[(i, k)];
            }
        }
        Self { mass: p.mass, gravity: p.gravity.into(), inertia, r_g: p.r_g, t_tau: p.t_tau }
    }
}

impl Default for VehicleParams {
    fn default() -> Self {
        VehicleConfig::default().try_into().expect("default vehicle parameters are valid")
    }
}

impl VehicleParams {
    pub fn new(mass: f64, gravity: Vec3, inertia: Mat3, r_g: f64, t_tau: f64) -> Result<Self> {
        if !(mass > 0.0) {
            return Err(GncError::InvalidParams(format!("mass must be positive, got {mass}")));
        }
        if !(t_tau > 0.0) {
            return Err(GncError::InvalidParams(format!("t_tau must be positive, got {t_tau}")));
        }
        if !(r_g > 0.0) {
            return Err(GncError::InvalidParams(format!("r_g must be positive, got {r_g}")));
        }
        if (inertia - inertia.transpose()).abs().max() > 1e-12 * inertia.abs().max() {
            return Err(GncError::InvalidParams("inertia matrix is not symmetric".into()));
        }
        if inertia.cholesky().is_none() {
            return Err(GncError::InvalidParams("inertia matrix is not positive definite".into()));
        }
        let inertia_inv = inertia
            .try_inverse()
            .ok_or_else(|| GncError::InvalidParams("singular inertia matrix".into()))?;
        Ok(Self { mass, gravity, inertia, inertia_inv, r_g, t_tau })
    }

    pub fn inertia_inv(&self) -> &Mat3 {
        &self.inertia_inv
    }

    pub fn gravity_magnitude(&self) -> f64 {
        self.gravity.norm()
    }

    /// Lever arm vector `r_G = [r_G, 0, 0]`.
    pub fn lever_arm(&self) -> Vec3 {
        Vec3::new(self.r_g, 0.0, 0.0)
    }

    /// Noise-to-state matrix: `dv` into the position rows, `da` into the velocity rows,
    /// `dalpha` into the body-rate rows.
    pub fn disturbance_input(&self) -> SMatrix<f64, NX, NW> {
        disturbance_input()
    }
}

pub fn disturbance_input() -> SMatrix<f64, NX, NW> {
    let mut b = SMatrix::<f64, NX, NW>::zeros();
    for i in 0..3 {
        b[(IDX_P + i, i)] = 1.0;
        b[(IDX_V + i, 3 + i)] = 1.0;
        b[(IDX_W + i, 6 + i)] = 1.0;
    }
    b
}

/// Angular acceleration produced by the thrust state and gyroscopic coupling.
pub fn angular_acceleration(omega: &Vec3, thrust: &Vec3, params: &VehicleParams) -> Vec3 {
    let j = &params.inertia;
    params.inertia_inv * (thrust.cross(&params.lever_arm()) - omega.cross(&(j * omega)))
}

/// Nominal model on a flattened state; the quaternion block need not be exactly unit.
pub fn deriv_vec(x: &StateVec, u: &Vec3, params: &VehicleParams) -> StateVec {
    let v: Vec3 = x.fixed_rows::<3>(IDX_V).into();
    let q: Vector4<f64> = x.fixed_rows::<4>(IDX_Q).into();
    let omega: Vec3 = x.fixed_rows::<3>(IDX_W).into();
    let thrust: Vec3 = x.fixed_rows::<3>(IDX_T).into();

    let r = rotmat_components(q[0], q[1], q[2], q[3]);
    let mut dx = StateVec::zeros();
    dx.fixed_rows_mut::<3>(IDX_P).copy_from(&v);
    dx.fixed_rows_mut::<3>(IDX_V).copy_from(&(r * thrust / params.mass + params.gravity));
    dx.fixed_rows_mut::<4>(IDX_Q).copy_from(&(omega_matrix(&omega) * q * 0.5));
    dx.fixed_rows_mut::<3>(IDX_W).copy_from(&angular_acceleration(&omega, &thrust, params));
    dx.fixed_rows_mut::<3>(IDX_T).copy_from(&((u - thrust) / params.t_tau));
    dx
}

/// Nominal dynamics `x_dot = f(x, u)`.
pub fn deriv_nominal(x: &VehicleState, u: &ControlInput, params: &VehicleParams) -> StateVec {
    deriv_vec(&x.to_vector(), &u.0, params)
}

/// Disturbance-augmented dynamics `f(x, u) + B_d w`. The offset itself is held constant.
pub fn deriv_augmented(
    x: &VehicleState,
    w: &DisturbanceVector,
    u: &ControlInput,
    params: &VehicleParams,
) -> StateVec {
    deriv_nominal(x, u, params) + disturbance_input() * w.to_vector()
}

fn deriv_aug_vec(x: &StateVec, u: &Vec3, w: &DistVec, params: &VehicleParams) -> StateVec {
    let mut dx = deriv_vec(x, u, params);
    for i in 0..3 {
        dx[IDX_P + i] += w[i];
        dx[IDX_V + i] += w[3 + i];
        dx[IDX_W + i] += w[6 + i];
    }
    dx
}

fn normalize_quat_block(x: &mut StateVec) {
    let n = x.fixed_rows::<4>(IDX_Q).norm();
    x.fixed_rows_mut::<4>(IDX_Q).unscale_mut(n);
}

/// One classical RK4 step on the flattened state with `w` held; quaternion renormalised.
pub fn rk4_step_vec(x: &StateVec, u: &Vec3, w: &DistVec, dt: f64, params: &VehicleParams) -> StateVec {
    let k1 = deriv_aug_vec(x, u, w, params);
    let k2 = deriv_aug_vec(&(x + k1 * (0.5 * dt)), u, w, params);
    let k3 = deriv_aug_vec(&(x + k2 * (0.5 * dt)), u, w, params);
    let k4 = deriv_aug_vec(&(x + k3 * dt), u, w, params);
    let mut xn = x + (k1 + k2 * 2.0 + k3 * 2.0 + k4) * (dt / 6.0);
    normalize_quat_block(&mut xn);
    xn
}

/// Discrete model `x(k+1) = f_bar(x(k), u(k), w(k))`.
pub fn rk4_step(
    x: &VehicleState,
    u: &ControlInput,
    w: &DisturbanceVector,
    dt: f64,
    params: &VehicleParams,
) -> VehicleState {
    let xn = rk4_step_vec(&x.to_vector(), &u.0, &w.to_vector(), dt, params);
    VehicleState::from_vector(&xn).expect("RK4 step produced a degenerate quaternion")
}

/// Discrete Jacobians of [`rk4_step`] together with the propagated state.
#[derive(Debug, Clone)]
pub struct Linearization {
    pub a: StateMat,
    pub b: SMatrix<f64, NX, NU>,
    pub b_w: SMatrix<f64, NX, NW>,
    pub next: StateVec,
}

/// Continuous-time Jacobian `df/dx` of the nominal model.
pub fn state_jacobian(x: &StateVec, params: &VehicleParams) -> StateMat {
    let q: Vector4<f64> = x.fixed_rows::<4>(IDX_Q).into();
    let omega: Vec3 = x.fixed_rows::<3>(IDX_W).into();
    let t: Vec3 = x.fixed_rows::<3>(IDX_T).into();
    let m = params.mass;
    let j = &params.inertia;
    let j_inv = params.inertia_inv;

    let mut f = StateMat::zeros();
    for i in 0..3 {
        f[(IDX_P + i, IDX_V + i)] = 1.0;
        f[(IDX_T + i, IDX_T + i)] = -1.0 / params.t_tau;
    }
    let r = rotmat_components(q[0], q[1], q[2], q[3]);
    f.fixed_view_mut::<3, 4>(IDX_V, IDX_Q).copy_from(&(rotated_thrust_quat_jacobian(&q, &t) / m));
    f.fixed_view_mut::<3, 3>(IDX_V, IDX_T).copy_from(&(r / m));
    f.fixed_view_mut::<4, 4>(IDX_Q, IDX_Q).copy_from(&(omega_matrix(&omega) * 0.5));
    f.fixed_view_mut::<4, 3>(IDX_Q, IDX_W).copy_from(&(omega_rate_jacobian(&q) * 0.5));
    let gyro = skew(&omega) * j - skew(&(j * omega));
    f.fixed_view_mut::<3, 3>(IDX_W, IDX_W).copy_from(&(-(j_inv * gyro)));
    f.fixed_view_mut::<3, 3>(IDX_W, IDX_T).copy_from(&(-(j_inv * skew(&params.lever_arm()))));
    f
}

/// Derivative of `R(q) T` with respect to the four quaternion components.
pub(crate) fn rotated_thrust_quat_jacobian(q: &Vector4<f64>, t: &Vec3) -> SMatrix<f64, 3, 4> {
    let (w, x, y, z) = (q[0], q[1], q[2], q[3]);
    let (t0, t1, t2) = (t.x, t.y, t.z);
    SMatrix::<f64, 3, 4>::new(
        -2.0 * z * t1 + 2.0 * y * t2,
        2.0 * y * t1 + 2.0 * z * t2,
        -4.0 * y * t0 + 2.0 * x * t1 + 2.0 * w * t2,
        -4.0 * z * t0 - 2.0 * w * t1 + 2.0 * x * t2,
        2.0 * z * t0 - 2.0 * x * t2,
        2.0 * y * t0 - 4.0 * x * t1 - 2.0 * w * t2,
        2.0 * x * t0 + 2.0 * z * t2,
        2.0 * w * t0 - 4.0 * z * t1 + 2.0 * y * t2,
        -2.0 * y * t0 + 2.0 * x * t1,
        2.0 * z * t0 + 2.0 * w * t1 - 4.0 * x * t2,
        -2.0 * w * t0 + 2.0 * z * t1 - 4.0 * y * t2,
        2.0 * x * t0 + 2.0 * y * t1,
    )
}

const NP: usize = NX + NU + NW;

/// Analytic Jacobians of [`rk4_step`] by differentiating each RK4 stage and the final
/// quaternion normalisation.
pub fn linearize(
    x: &VehicleState,
    u: &ControlInput,
    w: &DisturbanceVector,
    params: &VehicleParams,
    dt: f64,
) -> Linearization {
    linearize_vec(&x.to_vector(), &u.0, &w.to_vector(), params, dt)
}

pub fn linearize_vec(x: &StateVec, u: &Vec3, w: &DistVec, params: &VehicleParams, dt: f64) -> Linearization {
    // constant part of the stage sensitivity: d f / d(u, w)
    let mut f_uw = SMatrix::<f64, NX, NP>::zeros();
    for i in 0..3 {
        f_uw[(IDX_T + i, NX + i)] = 1.0 / params.t_tau;
        f_uw[(IDX_P + i, NX + NU + i)] = 1.0;
        f_uw[(IDX_V + i, NX + NU + 3 + i)] = 1.0;
        f_uw[(IDX_W + i, NX + NU + 6 + i)] = 1.0;
    }
    let mut seed = SMatrix::<f64, NX, NP>::zeros();
    seed.fixed_view_mut::<NX, NX>(0, 0).fill_with_identity();

    let k1 = deriv_aug_vec(x, u, w, params);
    let dk1 = state_jacobian(x, params) * seed + f_uw;
    let x2 = x + k1 * (0.5 * dt);
    let k2 = deriv_aug_vec(&x2, u, w, params);
    let dk2 = state_jacobian(&x2, params) * (seed + dk1 * (0.5 * dt)) + f_uw;
    let x3 = x + k2 * (0.5 * dt);
    let k3 = deriv_aug_vec(&x3, u, w, params);
    let dk3 = state_jacobian(&x3, params) * (seed + dk2 * (0.5 * dt)) + f_uw;
    let x4 = x + k3 * dt;
    let k4 = deriv_aug_vec(&x4, u, w, params);
    let dk4 = state_jacobian(&x4, params) * (seed + dk3 * dt) + f_uw;

    let mut xn = x + (k1 + k2 * 2.0 + k3 * 2.0 + k4) * (dt / 6.0);
    let mut d = seed + (dk1 + dk2 * 2.0 + dk3 * 2.0 + dk4) * (dt / 6.0);

    // normalisation q / |q|: Jacobian (I - q_n q_n^T) / |q|
    let qv: Vector4<f64> = xn.fixed_rows::<4>(IDX_Q).into();
    let n = qv.norm();
    let qn = qv / n;
    let proj = (nalgebra::Matrix4::identity() - qn * qn.transpose()) / n;
    let rows: SMatrix<f64, 4, NP> = d.fixed_rows::<4>(IDX_Q).into();
    d.fixed_rows_mut::<4>(IDX_Q).copy_from(&(proj * rows));
    xn.fixed_rows_mut::<4>(IDX_Q).copy_from(&qn);

    Linearization {
        a: d.fixed_columns::<NX>(0).into(),
        b: d.fixed_columns::<NU>(NX).into(),
        b_w: d.fixed_columns::<NW>(NX + NU).into(),
        next: xn,
    }
}

/// Reference Jacobians of [`rk4_step`] by central finite differences with relative step `1e-6`.
pub fn linearize_fd(
    x: &VehicleState,
    u: &ControlInput,
    w: &DisturbanceVector,
    params: &VehicleParams,
    dt: f64,
) -> Linearization {
    let xv = x.to_vector();
    let wv = w.to_vector();
    let f = |xx: &StateVec, uu: &Vec3, ww: &DistVec| rk4_step_vec(xx, uu, ww, dt, params);
    let step = |v: f64| 1e-6 * v.abs().max(1.0);

    let mut a = StateMat::zeros();
    for j in 0..NX {
        let h = step(xv[j]);
        let (mut xp, mut xm) = (xv, xv);
        xp[j] += h;
        xm[j] -= h;
        a.set_column(j, &((f(&xp, &u.0, &wv) - f(&xm, &u.0, &wv)) / (2.0 * h)));
    }
    let mut b = SMatrix::<f64, NX, NU>::zeros();
    for j in 0..NU {
        let h = step(u.0[j]);
        let (mut up, mut um) = (u.0, u.0);
        up[j] += h;
        um[j] -= h;
        b.set_column(j, &((f(&xv, &up, &wv) - f(&xv, &um, &wv)) / (2.0 * h)));
    }
    let mut b_w = SMatrix::<f64, NX, NW>::zeros();
    for j in 0..NW {
        let h = step(wv[j]);
        let (mut wp, mut wm) = (wv, wv);
        wp[j] += h;
        wm[j] -= h;
        b_w.set_column(j, &((f(&xv, &u.0, &wp) - f(&xv, &u.0, &wm)) / (2.0 * h)));
    }
    Linearization { a, b, b_w, next: f(&xv, &u.0, &wv) }
}

/// World-frame linear acceleration predicted by the nominal model.
pub fn linear_acceleration(x: &VehicleState, params: &VehicleParams) -> Vec3 {
    rotmat(&x.q) * x.thrust / params.mass + params.gravity
}

/// Convenience: a body-frame thrust vector along `e1` of magnitude `t`.
pub fn axial(t: f64) -> Vec3 {
    Vector3::new(t, 0.0, 0.0)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn params() -> VehicleParams {
        VehicleParams::default()
    }

    fn random_state(seed: [f64; 16]) -> VehicleState {
        let q = UnitQuat::normalize(1.0 + seed[6].abs(), seed[7], seed[8], seed[9]).unwrap();
        VehicleState {
            p: Vec3::new(seed[0], seed[1], seed[2]) * 5.0,
            v: Vec3::new(seed[3], seed[4], seed[5]) * 2.0,
            q,
            omega: Vec3::new(seed[10], seed[11], seed[12]),
            thrust: Vec3::new(11.0 + seed[13], seed[14], seed[15]),
        }
    }

    #[test]
    fn hover_is_equilibrium() {
        let p = params();
        let x = VehicleState::hover(Vec3::new(1.2, 0.0, 0.0), &p);
        let dx = deriv_nominal(&x, &ControlInput(x.thrust), &p);
        assert!(dx.abs().max() < 1e-15);
        let xn = rk4_step(&x, &ControlInput(x.thrust), &DisturbanceVector::zero(), 0.04, &p);
        assert!((xn.to_vector() - x.to_vector()).abs().max() < 1e-12);
    }

    #[test]
    fn free_fall() {
        let p = params();
        let mut x = VehicleState::hover(Vec3::new(5.0, 0.0, 0.0), &p);
        x.thrust = Vec3::zeros();
        let u = ControlInput(Vec3::zeros());
        let dx = deriv_nominal(&x, &u, &p);
        assert_eq!(Vec3::from(dx.fixed_rows::<3>(IDX_V)), p.gravity);
        let xn = rk4_step(&x, &u, &DisturbanceVector::zero(), 0.04, &p);
        assert!((xn.v - p.gravity * 0.04).norm() < 1e-15);
    }

    #[test]
    fn lateral_thrust_torque() {
        let p = params();
        let mut x = VehicleState::hover(Vec3::zeros(), &p);
        x.thrust = Vec3::new(11.0, 0.0, 0.2);
        let torque = x.thrust.cross(&p.lever_arm());
        assert!((torque - Vec3::new(0.0, 0.06, 0.0)).norm() < 1e-15);
        let dx = deriv_nominal(&x, &ControlInput(x.thrust), &p);
        let alpha: Vec3 = dx.fixed_rows::<3>(IDX_W).into();
        assert!((alpha - p.inertia_inv() * Vec3::new(0.0, 0.06, 0.0)).norm() < 1e-14);
    }

    #[test]
    fn augmented_is_additive() {
        let p = params();
        let x = random_state([0.3; 16]);
        let u = ControlInput(Vec3::new(10.0, 0.1, -0.2));
        let nominal = deriv_nominal(&x, &u, &p);
        assert_eq!(deriv_augmented(&x, &DisturbanceVector::zero(), &u, &p), nominal);

        for w in [
            DisturbanceVector { da: Vec3::new(0.5, 0.0, 0.0), ..Default::default() },
            DisturbanceVector { dalpha: Vec3::new(0.0, 0.0, 0.1), ..Default::default() },
            DisturbanceVector { dv: Vec3::new(0.1, -0.2, 0.3), da: Vec3::new(0.5, 0.1, 0.0), dalpha: Vec3::new(0.0, 0.3, 0.1) },
        ] {
            let aug = deriv_augmented(&x, &w, &u, &p);
            assert_eq!(aug, nominal + disturbance_input() * w.to_vector());
            let diff = aug - nominal;
            assert!((Vec3::from(diff.fixed_rows::<3>(IDX_V)) - w.da).norm() < 1e-14);
            assert!((Vec3::from(diff.fixed_rows::<3>(IDX_W)) - w.dalpha).norm() < 1e-14);
            assert!((Vec3::from(diff.fixed_rows::<3>(IDX_P)) - w.dv).norm() < 1e-14);
            assert!(diff.fixed_rows::<4>(IDX_Q).norm() == 0.0 && diff.fixed_rows::<3>(IDX_T).norm() == 0.0);
        }
    }

    #[test]
    fn constant_roll_rate_matches_closed_form() {
        let p = params();
        let mut x = VehicleState::hover(Vec3::zeros(), &p);
        x.omega = Vec3::new(0.5, 0.0, 0.0);
        let xn = rk4_step(&x, &ControlInput(x.thrust), &DisturbanceVector::zero(), 0.04, &p);
        let exact = UnitQuat::from_axis_angle(&Vec3::x(), 0.5 * 0.04);
        assert!((xn.q.as_vector() - exact.as_vector()).abs().max() < 1e-8);
    }

    #[test]
    fn invalid_params_rejected() {
        let j = Mat3::identity() * 0.1;
        assert!(VehicleParams::new(0.0, Vec3::zeros(), j, 0.3, 0.02).is_err());
        assert!(VehicleParams::new(1.0, Vec3::zeros(), j, 0.3, 0.0).is_err());
        assert!(VehicleParams::new(1.0, Vec3::zeros(), j, -0.3, 0.02).is_err());
        let mut bad = j;
        bad[(0, 1)] = 0.05;
        assert!(VehicleParams::new(1.0, Vec3::zeros(), bad, 0.3, 0.02).is_err());
        assert!(VehicleParams::new(1.0, Vec3::zeros(), -j, 0.3, 0.02).is_err());
    }

    #[test]
    fn hover_linearization_structure() {
        let p = params();
        let x = VehicleState::hover(Vec3::zeros(), &p);
        let dt = 0.04;
        let lin = linearize(&x, &ControlInput(x.thrust), &DisturbanceVector::zero(), &p, dt);
        for i in 0..3 {
            assert!((lin.a[(IDX_P + i, IDX_V + i)] - dt).abs() < 1e-12);
            assert!((lin.b_w[(IDX_P + i, i)] - dt).abs() < 1e-12);
        }
    }

    #[test]
    fn rk4_fourth_order_convergence() {
        // spin-and-thrust manoeuvre, 2 s
        let p = params();
        let mut x0 = VehicleState::hover(Vec3::zeros(), &p);
        x0.omega = Vec3::new(1.0, 0.4, -0.3);
        x0.thrust = Vec3::new(12.0, 0.3, -0.2);
        let u = ControlInput(Vec3::new(13.0, -0.2, 0.25));
        let w = DisturbanceVector::zero();
        let run = |dt: f64| {
            let n = (2.0 / dt).round() as usize;
            (0..n).fold(x0.to_vector(), |x, _| rk4_step_vec(&x, &u.0, &w.to_vector(), dt, &p))
        };
        let dt = 0.04;
        let reference = run(dt / 64.0);
        let e1 = (run(dt) - reference).norm();
        let e2 = (run(dt / 2.0) - reference).norm();
        assert!(e1 / e2 >= 12.0, "ratio {}", e1 / e2);
    }

    #[test]
    fn angular_momentum_conserved_without_torque() {
        let p = params();
        let mut x = VehicleState::hover(Vec3::zeros(), &p);
        x.thrust = Vec3::zeros();
        x.omega = Vec3::new(0.6, 0.6, 0.52).normalize();
        let h0 = (p.inertia * x.omega).norm();
        let u = ControlInput(Vec3::zeros());
        for _ in 0..25 {
            x = rk4_step(&x, &u, &DisturbanceVector::zero(), 0.04, &p);
        }
        assert!(((p.inertia * x.omega).norm() - h0).abs() <= 1e-8);
    }

    proptest! {
        #[test]
        fn jacobians_match_central_differences(seed in prop::array::uniform16(-1.0..1.0f64),
                                               useed in prop::array::uniform3(-1.0..1.0f64),
                                               wseed in prop::array::uniform9(-1.0..1.0f64)) {
            let p = params();
            let x = random_state(seed);
            let u = ControlInput(Vec3::new(11.0 + useed[0], useed[1], useed[2]));
            let w = DisturbanceVector::from_vector(&DistVec::from_column_slice(&wseed));
            let an = linearize(&x, &u, &w, &p, 0.04);
            let fd = linearize_fd(&x, &u, &w, &p, 0.04);
            let rel = |a: f64, b: f64| (a - b).abs() / b.abs().max(1.0);
            for (a, b) in an.a.iter().zip(fd.a.iter()) { prop_assert!(rel(*a, *b) < 1e-5); }
            for (a, b) in an.b.iter().zip(fd.b.iter()) { prop_assert!(rel(*a, *b) < 1e-5); }
            for (a, b) in an.b_w.iter().zip(fd.b_w.iter()) { prop_assert!(rel(*a, *b) < 1e-5); }
        }

        #[test]
        fn rk4_renormalises(seed in prop::array::uniform16(-1.0..1.0f64)) {
            let p = params();
            let x = random_state(seed);
            let xn = rk4_step(&x, &ControlInput(Vec3::new(12.0, 0.5, -0.5)), &DisturbanceVector::zero(), 0.04, &p);
            prop_assert!((xn.q.norm() - 1.0).abs() <= 1e-12);
        }
    }
}
