//! State EKF and random-walk Kalman filter for the model offset `w`.
//!
//! Measurements are position, attitude, world-frame linear acceleration and body angular
//! acceleration. The attitude innovation is the rotation vector from the estimate to the
//! measured attitude; the correction is applied on the quaternion and renormalised.

use nalgebra::{Matrix4x3, SMatrix, SVector, Vector4};
use serde::{Deserialize, Serialize};

use crate::quatkin::{attitude_error, skew, UnitQuat};
use crate::vehicle::{
    angular_acceleration, disturbance_input, linear_acceleration, linearize, rk4_step, state_jacobian, ControlInput,
    DistVec, DisturbanceVector, StateMat, StateVec, VehicleParams, VehicleState, IDX_P, IDX_Q, IDX_T, IDX_V, IDX_W,
    NW, NX,
};
use crate::{GncError, Result, Vec3};

/// Measurement dimension: position 3, attitude 3, acceleration 3, angular acceleration 3.
pub const NY: usize = 12;
pub type MeasVec = SVector<f64, NY>;
pub type DistMat = SMatrix<f64, NW, NW>;
type HMat = SMatrix<f64, NY, NX>;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Measurement {
    pub p: Vec3,
    pub q: UnitQuat,
    /// World-frame linear acceleration, m/s².
    pub accel: Vec3,
    /// Body angular acceleration, rad/s².
    pub ang_accel: Vec3,
    pub t: f64,
}

/// Standard deviations of the measurement channels.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MeasurementNoise {
    pub pos: f64,
    /// rad
    pub att: f64,
    pub accel: f64,
    pub ang_accel: f64,
}

impl Default for MeasurementNoise {
    fn default() -> Self {
        Self { pos: 0.005, att: 0.005, accel: 0.05, ang_accel: 0.5 }
    }
}

impl MeasurementNoise {
    fn variances(&self) -> MeasVec {
        let mut r = MeasVec::zeros();
        let sig = [self.pos, self.att, self.accel, self.ang_accel];
        for (b, s) in sig.iter().enumerate() {
            for i in 0..3 {
                r[3 * b + i] = s * s;
            }
        }
        r
    }
}

/// Filter tuning. Process-noise entries are spectral densities (variance per second).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EstimatorConfig {
    pub noise: MeasurementNoise,
    pub q_pos: f64,
    pub q_vel: f64,
    pub q_att: f64,
    pub q_rate: f64,
    pub q_thrust: f64,
    /// Random-walk densities for `[dv, da, dalpha]`.
    pub q_dist: [f64; 3],
    /// Saturation box half-widths for `[dv, da, dalpha]`.
    pub dist_box: [f64; 3],
    /// Initial standard deviations of `[p, v, attitude, omega, thrust]`.
    pub init_std: [f64; 5],
    /// Initial standard deviations of `[dv, da, dalpha]`.
    pub init_dist_std: [f64; 3],
}

impl Default for EstimatorConfig {
    fn default() -> Self {
        Self {
            noise: MeasurementNoise::default(),
            q_pos: 1e-6,
            q_vel: 1e-4,
            q_att: 1e-6,
            q_rate: 1e-2,
            q_thrust: 1e-3,
            q_dist: [1e-6, 1e-3, 1e-2],
            dist_box: [2.0, 5.0, 5.0],
            init_std: [0.1, 0.1, 0.02, 0.05, 0.1],
            init_dist_std: [0.01, 1.0, 1.0],
        }
    }
}

/// Estimator state.
#[derive(Debug, Clone)]
pub struct EstimatorState {
    pub x: VehicleState,
    pub p_x: StateMat,
    pub w: DisturbanceVector,
    pub p_w: DistMat,
    /// Diagonal of the measurement covariance.
    pub meas_var: MeasVec,
}

/// Innovation of one EKF update.
#[derive(Debug, Clone, Copy)]
pub struct Innovation {
    pub y: MeasVec,
    /// Diagonal of the innovation covariance.
    pub s_diag: MeasVec,
}

/// Running average of disturbance residuals between disturbance-filter updates.
#[derive(Debug, Clone, Copy, Default)]
struct ResidualAccumulator {
    sum: DistVec,
    count: usize,
}

/// EKF plus disturbance filter with their configuration.
#[derive(Debug, Clone)]
pub struct Estimator {
    pub state: EstimatorState,
    pub params: VehicleParams,
    pub config: EstimatorConfig,
    acc: ResidualAccumulator,
}

/// `Xi(q)` with `q ⊗ (0, v) = Xi(q) v`.
fn xi(q: &Vector4<f64>) -> Matrix4x3<f64> {
    let u = Vec3::new(q[1], q[2], q[3]);
    let mut m = Matrix4x3::zeros();
    m.fixed_view_mut::<1, 3>(0, 0).copy_from(&(-u.transpose()));
    m.fixed_view_mut::<3, 3>(1, 0).copy_from(&(nalgebra::Matrix3::identity() * q[0] + skew(&u)));
    m
}

fn symmetrize<const N: usize>(p: &mut SMatrix<f64, N, N>) {
    *p = (*p + p.transpose()) * 0.5;
}

/// Remove the quaternion-norm direction from the covariance.
fn project_quat_block(p: &mut StateMat, q: &Vector4<f64>) {
    let mut proj = StateMat::identity();
    let qq = q * q.transpose();
    for i in 0..4 {
        for j in 0..4 {
            proj[(IDX_Q + i, IDX_Q + j)] -= qq[(i, j)];
        }
    }
    *p = proj * *p * proj.transpose();
}

impl Estimator {
    pub fn new(x0: VehicleState, params: VehicleParams, config: EstimatorConfig) -> Self {
        let mut p_x = StateMat::zeros();
        let s = config.init_std;
        let blocks = [(IDX_P, 3, s[0]), (IDX_V, 3, s[1]), (IDX_Q, 4, s[2] * 0.5), (IDX_W, 3, s[3]), (IDX_T, 3, s[4])];
        for (start, len, sd) in blocks {
            for i in 0..len {
                p_x[(start + i, start + i)] = sd * sd;
            }
        }
        project_quat_block(&mut p_x, &x0.q.as_vector());
        let mut p_w = DistMat::zeros();
        for b in 0..3 {
            for i in 0..3 {
                p_w[(3 * b + i, 3 * b + i)] = config.init_dist_std[b].powi(2);
            }
        }
        let state = EstimatorState { x: x0, p_x, w: DisturbanceVector::zero(), p_w, meas_var: config.noise.variances() };
        Self { state, params, config, acc: ResidualAccumulator::default() }
    }

    fn process_noise(&self, dt: f64) -> StateMat {
        let c = &self.config;
        let mut q = StateMat::zeros();
        let blocks = [(IDX_P, 3, c.q_pos), (IDX_V, 3, c.q_vel), (IDX_Q, 4, c.q_att), (IDX_W, 3, c.q_rate), (IDX_T, 3, c.q_thrust)];
        for (start, len, d) in blocks {
            for i in 0..len {
                q[(start + i, start + i)] = d * dt;
            }
        }
        q
    }

    /// Propagate the state with the current offset estimate and the covariance with the
    /// discrete Jacobian.
    pub fn ekf_predict(&mut self, u: &ControlInput, dt: f64) -> Result<()> {
        if !(dt > 0.0) {
            return Err(GncError::InvalidArgument(format!("prediction step must be positive, got {dt}")));
        }
        let st = &mut self.state;
        let lin = linearize(&st.x, u, &st.w, &self.params, dt);
        st.x = rk4_step(&st.x, u, &st.w, dt, &self.params);
        let q = self.process_noise(dt);
        let st = &mut self.state;
        st.p_x = lin.a * st.p_x * lin.a.transpose() + q;
        project_quat_block(&mut st.p_x, &st.x.q.as_vector());
        symmetrize(&mut st.p_x);
        Ok(())
    }

    /// Predicted measurement (attitude entries zero) and its Jacobian.
    fn measurement_model(&self) -> (MeasVec, HMat) {
        let st = &self.state;
        let xv = st.x.to_vector();
        let jac = state_jacobian(&xv, &self.params);
        let mut h = HMat::zeros();
        let mut y = MeasVec::zeros();
        for i in 0..3 {
            h[(i, IDX_P + i)] = 1.0;
        }
        let xi_t = xi(&st.x.q.as_vector()).transpose() * 2.0;
        h.fixed_view_mut::<3, 4>(3, IDX_Q).copy_from(&xi_t);
        h.fixed_view_mut::<3, NX>(6, 0).copy_from(&jac.fixed_view::<3, NX>(IDX_V, 0));
        h.fixed_view_mut::<3, NX>(9, 0).copy_from(&jac.fixed_view::<3, NX>(IDX_W, 0));
        y.fixed_rows_mut::<3>(0).copy_from(&st.x.p);
        y.fixed_rows_mut::<3>(6).copy_from(&(linear_acceleration(&st.x, &self.params) + st.w.da));
        y.fixed_rows_mut::<3>(9)
            .copy_from(&(angular_acceleration(&st.x.omega, &st.x.thrust, &self.params) + st.w.dalpha));
        (y, h)
    }

    /// Standard EKF update in Joseph form.
    pub fn ekf_update(&mut self, meas: &Measurement) -> Result<Innovation> {
        let (y_pred, h) = self.measurement_model();
        let mut innov = MeasVec::zeros();
        innov.fixed_rows_mut::<3>(0).copy_from(&(meas.p - y_pred.fixed_rows::<3>(0)));
        innov.fixed_rows_mut::<3>(3).copy_from(&attitude_error(&self.state.x.q, &meas.q).0);
        innov.fixed_rows_mut::<3>(6).copy_from(&(meas.accel - y_pred.fixed_rows::<3>(6)));
        innov.fixed_rows_mut::<3>(9).copy_from(&(meas.ang_accel - y_pred.fixed_rows::<3>(9)));
        if !innov.iter().all(|v| v.is_finite()) {
            return Err(GncError::Numerical("non-finite innovation".into()));
        }

        let st = &mut self.state;
        let r = SMatrix::<f64, NY, NY>::from_diagonal(&st.meas_var);
        let pht = st.p_x * h.transpose();
        let s = h * pht + r;
        let chol = match s.cholesky() {
            Some(c) => c,
            None => (s + SMatrix::<f64, NY, NY>::identity() * 1e-12)
                .cholesky()
                .ok_or_else(|| GncError::Numerical("innovation covariance not positive definite".into()))?,
        };
        let k = chol.solve(&pht.transpose()).transpose();
        let dx: StateVec = k * innov;
        let mut xv = st.x.to_vector() + dx;
        let qn = xv.fixed_rows::<4>(IDX_Q).norm();
        xv.fixed_rows_mut::<4>(IDX_Q).unscale_mut(qn);
        st.x = VehicleState::from_vector(&xv)?;
        let ikh = StateMat::identity() - k * h;
        st.p_x = ikh * st.p_x * ikh.transpose() + k * r * k.transpose();
        project_quat_block(&mut st.p_x, &st.x.q.as_vector());
        symmetrize(&mut st.p_x);
        Ok(Innovation { y: innov, s_diag: s.diagonal() })
    }

    /// Residuals of the nominal model (no offset) against a measurement: velocity from the
    /// prior position innovation over `dt`, acceleration and angular acceleration directly.
    /// Must be called with the prior estimate, before [`ekf_update`](Self::ekf_update).
    pub fn disturbance_residual(&self, meas: &Measurement, dt: f64) -> DistVec {
        let x = &self.state.x;
        let mut r = DistVec::zeros();
        r.fixed_rows_mut::<3>(0).copy_from(&((meas.p - x.p) / dt + self.state.w.dv));
        r.fixed_rows_mut::<3>(3).copy_from(&(meas.accel - linear_acceleration(x, &self.params)));
        r.fixed_rows_mut::<3>(6).copy_from(&(meas.ang_accel - angular_acceleration(&x.omega, &x.thrust, &self.params)));
        r
    }

    fn residual_variance(&self, dt_meas: f64) -> DistVec {
        let n = &self.config.noise;
        let mut v = DistVec::zeros();
        let px = &self.state.p_x;
        for i in 0..3 {
            v[i] = (2.0 * n.pos * n.pos + px[(IDX_P + i, IDX_P + i)]) / (dt_meas * dt_meas);
            v[3 + i] = n.accel * n.accel;
            v[6 + i] = n.ang_accel * n.ang_accel;
        }
        v
    }

    /// Random-walk Kalman update of `w` with observation `residual = w + noise` whose
    /// per-channel variance is `residual_var`; result clamped to the configured box.
    pub fn dist_kf_update(&mut self, residual: &DistVec, residual_var: &DistVec, dt: f64) {
        let st = &mut self.state;
        for b in 0..3 {
            for i in 0..3 {
                st.p_w[(3 * b + i, 3 * b + i)] += self.config.q_dist[b] * dt;
            }
        }
        let r = DistMat::from_diagonal(residual_var);
        let s = st.p_w + r;
        let k = match s.cholesky() {
            Some(c) => c.solve(&st.p_w).transpose(),
            None => return,
        };
        let w = st.w.to_vector();
        let mut wn = w + k * (residual - w);
        for b in 0..3 {
            let lim = self.config.dist_box[b];
            for i in 0..3 {
                wn[3 * b + i] = wn[3 * b + i].clamp(-lim, lim);
            }
        }
        st.w = DisturbanceVector::from_vector(&wn);
        let ik = DistMat::identity() - k;
        st.p_w = ik * st.p_w * ik.transpose() + k * r * k.transpose();
        symmetrize(&mut st.p_w);
    }

    /// One measurement cycle: predict over `dt`, accumulate the disturbance residual, then
    /// update the state.
    pub fn step(&mut self, u: &ControlInput, meas: &Measurement, dt: f64) -> Result<Innovation> {
        self.ekf_predict(u, dt)?;
        let r = self.disturbance_residual(meas, dt);
        self.acc.sum += r;
        self.acc.count += 1;
        self.ekf_update(meas)
    }

    /// Disturbance-filter update from the residuals accumulated since the previous call.
    /// `dt` is the time since that call and `dt_meas` the measurement period.
    pub fn update_disturbance(&mut self, dt: f64, dt_meas: f64) {
        if self.acc.count == 0 {
            return;
        }
        let n = self.acc.count as f64;
        let mean = self.acc.sum / n;
        let var = self.residual_variance(dt_meas) / n;
        self.acc = ResidualAccumulator::default();
        self.dist_kf_update(&mean, &var, dt);
    }

    pub fn state_estimate(&self) -> &VehicleState {
        &self.state.x
    }

    pub fn disturbance(&self) -> &DisturbanceVector {
        &self.state.w
    }

    /// Smallest eigenvalue over both covariances.
    pub fn min_covariance_eigenvalue(&self) -> f64 {
        let ex = self.state.p_x.symmetric_eigenvalues().min();
        let ew = self.state.p_w.symmetric_eigenvalues().min();
        ex.min(ew)
    }
}

/// Rank of the observability matrix of the offset-augmented linearisation at `x`, with
/// outputs position, raw quaternion, acceleration and angular acceleration, optionally
/// stacked with the disturbance filter's residual map (identity on `w`).
///
/// Without the residual map `v` and `dv` enter the output only through their sum, so the
/// rank is three short.
pub fn augmented_observability_rank(
    x: &VehicleState,
    u: &ControlInput,
    params: &VehicleParams,
    dt: f64,
    with_residual_map: bool,
) -> usize {
    const NA: usize = NX + NW;
    const NO: usize = 3 + 4 + 3 + 3 + NW;
    let lin = linearize(x, u, &DisturbanceVector::zero(), params, dt);
    let mut a = SMatrix::<f64, NA, NA>::identity();
    a.fixed_view_mut::<NX, NX>(0, 0).copy_from(&lin.a);
    a.fixed_view_mut::<NX, NW>(0, NX).copy_from(&lin.b_w);
    let jac = state_jacobian(&x.to_vector(), params);
    let bw = disturbance_input();
    let mut c = SMatrix::<f64, NO, NA>::zeros();
    for i in 0..3 {
        c[(i, IDX_P + i)] = 1.0;
    }
    for i in 0..4 {
        c[(3 + i, IDX_Q + i)] = 1.0;
    }
    c.fixed_view_mut::<3, NX>(7, 0).copy_from(&jac.fixed_view::<3, NX>(IDX_V, 0));
    c.fixed_view_mut::<3, NW>(7, NX).copy_from(&bw.fixed_view::<3, NW>(IDX_V, 0));
    c.fixed_view_mut::<3, NX>(10, 0).copy_from(&jac.fixed_view::<3, NX>(IDX_W, 0));
    c.fixed_view_mut::<3, NW>(10, NX).copy_from(&bw.fixed_view::<3, NW>(IDX_W, 0));
    if with_residual_map {
        for i in 0..NW {
            c[(13 + i, NX + i)] = 1.0;
        }
    }

    let mut obs = nalgebra::DMatrix::<f64>::zeros(NO * NA, NA);
    let mut block = c;
    for k in 0..NA {
        let nrm = block.norm().max(1e-300);
        obs.view_mut((k * NO, 0), (NO, NA)).copy_from(&(block / nrm));
        block *= a;
    }
    let sv = obs.svd(false, false).singular_values;
    let tol = sv.max() * 1e-10;
    sv.iter().filter(|&&s| s > tol).count()
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;
    use rand_distr::{Distribution, Normal};

    fn truth_measurement(x: &VehicleState, w: &DisturbanceVector, params: &VehicleParams, t: f64) -> Measurement {
        Measurement {
            p: x.p,
            q: x.q,
            accel: linear_acceleration(x, params) + w.da,
            ang_accel: angular_acceleration(&x.omega, &x.thrust, params) + w.dalpha,
            t,
        }
    }

    fn quiet_config() -> EstimatorConfig {
        EstimatorConfig {
            q_pos: 0.0,
            q_vel: 0.0,
            q_att: 0.0,
            q_rate: 0.0,
            q_thrust: 0.0,
            ..Default::default()
        }
    }

    #[test]
    fn noiseless_hover_tracks_truth() {
        let params = VehicleParams::default();
        let x0 = VehicleState::hover(Vec3::new(1.0, 0.0, 0.0), &params);
        let mut est = Estimator::new(x0, params.clone(), quiet_config());
        let u = ControlInput(x0.thrust);
        let mut truth = x0;
        let dt = 0.004;
        for k in 0..250 {
            truth = rk4_step(&truth, &u, &DisturbanceVector::zero(), dt, &params);
            est.step(&u, &truth_measurement(&truth, &DisturbanceVector::zero(), &params, k as f64 * dt), dt).unwrap();
        }
        let d = (est.state.x.to_vector() - truth.to_vector()).amax();
        assert!(d < 1e-12, "{d}");
    }

    #[test]
    fn covariance_stays_psd_without_process_noise() {
        let params = VehicleParams::default();
        let x0 = VehicleState::hover(Vec3::zeros(), &params);
        let mut est = Estimator::new(x0, params, quiet_config());
        let u = ControlInput(Vec3::new(11.0, 0.2, -0.1));
        for _ in 0..200 {
            est.ekf_predict(&u, 0.004).unwrap();
            let p = &est.state.p_x;
            assert!((p - p.transpose()).amax() == 0.0);
            assert!(est.min_covariance_eigenvalue() >= -1e-10);
        }
    }

    #[test]
    fn perfect_and_useless_position_measurements() {
        let params = VehicleParams::default();
        let x0 = VehicleState::hover(Vec3::zeros(), &params);
        let mut meas = truth_measurement(&x0, &DisturbanceVector::zero(), &params, 0.0);
        meas.p = Vec3::new(0.05, -0.03, 0.02);

        let mut sharp = Estimator::new(x0, params.clone(), EstimatorConfig::default());
        sharp.state.meas_var.fixed_rows_mut::<3>(0).fill(1e-18);
        sharp.ekf_update(&meas).unwrap();
        assert!((sharp.state.x.p - meas.p).norm() < 1e-6);

        let mut blind = Estimator::new(x0, params, EstimatorConfig::default());
        blind.state.meas_var.fixed_rows_mut::<3>(0).fill(1e18);
        blind.ekf_update(&meas).unwrap();
        assert!((blind.state.x.p - x0.p).norm() < 1e-6);
    }

    #[test]
    fn free_fall_innovation_is_zero_mean() {
        let params = VehicleParams::default();
        let sigma = 0.01;
        let mut innov_sum = Vec3::zeros();
        let runs = 100;
        for seed in 0..runs {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let noise = Normal::new(0.0, sigma).unwrap();
            let mut x0 = VehicleState::hover(Vec3::new(50.0, 0.0, 0.0), &params);
            x0.thrust = Vec3::zeros();
            let cfg = EstimatorConfig { noise: MeasurementNoise { pos: sigma, ..Default::default() }, ..quiet_config() };
            let mut est = Estimator::new(x0, params.clone(), cfg);
            let u = ControlInput(Vec3::zeros());
            let truth = rk4_step(&x0, &u, &DisturbanceVector::zero(), 0.02, &params);
            est.ekf_predict(&u, 0.02).unwrap();
            let mut m = truth_measurement(&truth, &DisturbanceVector::zero(), &params, 0.02);
            m.p += Vec3::from_fn(|_, _| noise.sample(&mut rng));
            let inn = est.ekf_update(&m).unwrap();
            innov_sum += inn.y.fixed_rows::<3>(0);
        }
        let mean = innov_sum / runs as f64;
        assert!(mean.amax() < 3.0 * sigma / (runs as f64).sqrt(), "{mean}");
    }

    #[test]
    fn disturbance_filter_decays_and_saturates() {
        let params = VehicleParams::default();
        let x0 = VehicleState::hover(Vec3::zeros(), &params);
        let mut est = Estimator::new(x0, params, EstimatorConfig::default());
        est.state.w.da = Vec3::new(1.0, 0.0, 0.0);
        let var = DistVec::from_element(1e-2);
        let mut prev = 1.0;
        for _ in 0..50 {
            est.dist_kf_update(&DistVec::zeros(), &var, 0.04);
            let now = est.state.w.da.x.abs();
            assert!(now < prev);
            prev = now;
        }
        assert!(prev < 1e-2);
        let mut big = DistVec::zeros();
        big[3] = 100.0;
        big[6] = -100.0;
        big[0] = 10.0;
        for _ in 0..50 {
            est.dist_kf_update(&big, &var, 0.04);
        }
        assert_eq!(est.state.w.da.x, 5.0);
        assert_eq!(est.state.w.dalpha.x, -5.0);
        assert_eq!(est.state.w.dv.x, 2.0);
    }

    #[test]
    fn acceleration_offset_is_learned() {
        let params = VehicleParams::default();
        let x0 = VehicleState::hover(Vec3::new(2.0, 0.0, 0.0), &params);
        let mut est = Estimator::new(x0, params.clone(), EstimatorConfig::default());
        let w_true = DisturbanceVector { da: Vec3::new(0.5, 0.0, 0.0), ..Default::default() };
        let u = ControlInput(x0.thrust);
        let mut truth = x0;
        let dt = 0.004;
        for k in 0..500 {
            truth = rk4_step(&truth, &u, &w_true, dt, &params);
            est.step(&u, &truth_measurement(&truth, &w_true, &params, k as f64 * dt), dt).unwrap();
            if k % 10 == 9 {
                est.update_disturbance(0.04, dt);
            }
        }
        assert!((est.state.w.da.x - 0.5).abs() < 0.025, "{}", est.state.w.da.x);
    }

    #[test]
    fn augmented_pair_is_observable_at_hover() {
        let params = VehicleParams::default();
        let x = VehicleState::hover(Vec3::zeros(), &params);
        let u = ControlInput(x.thrust);
        assert_eq!(augmented_observability_rank(&x, &u, &params, 0.04, true), NX + NW);
        assert_eq!(augmented_observability_rank(&x, &u, &params, 0.04, false), NX + NW - 3);
    }
}
