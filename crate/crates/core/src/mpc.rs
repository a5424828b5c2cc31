//! Offset-free tracking NMPC over the full 16-state model.
//!
//! Multiple shooting: decision vector `[x_0, …, x_N, u_0, …, u_{N-1}]` with the RK4 map as
//! equality constraints and the input pyramid at every stage. The stage cost is a sum of
//! weighted squared linear residuals, so its Hessian is constant (Gauss-Newton).

use std::time::Instant;

use nalgebra::{DMatrix, DVector, Matrix6x3, Vector6};
use serde::{Deserialize, Serialize};

use crate::nlpsolver::{solve_nlp_from, NlpProblem, SolveReport, SolveStatus, SqpOptions};
use crate::quatkin::UnitQuat;
use crate::vehicle::{
    linearize_vec, rk4_step_vec, ControlInput, DistVec, DisturbanceVector, StateVec, VehicleParams, VehicleState, IDX_P,
    IDX_Q, IDX_T, IDX_V, IDX_W, NU, NX,
};
use crate::{GncError, Result, Vec3};

/// Pyramid inscribed in the thrust spherical sector: `A u ≤ b`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct InputPolytope {
    pub a: Matrix6x3<f64>,
    pub b: Vector6<f64>,
    pub delta_max: f64,
    pub ux_min: f64,
    pub ux_max: f64,
}

/// Six half-spaces: `u_x ∈ [T_min, T_max/√(1+2tan²δ)]`, `|u_y|, |u_z| ≤ u_x tan δ`.
pub fn build_input_polytope(delta_max: f64, t_min: f64, t_max: f64) -> Result<InputPolytope> {
    if !(delta_max > 0.0 && delta_max < std::f64::consts::FRAC_PI_2) {
        return Err(GncError::InvalidParams(format!("gimbal limit must lie in (0, pi/2), got {delta_max}")));
    }
    if !(t_min >= 0.0 && t_min <= t_max) {
        return Err(GncError::InvalidParams(format!("require 0 <= T_min <= T_max, got {t_min}, {t_max}")));
    }
    let tan = delta_max.tan();
    let ux_max = t_max / (1.0 + 2.0 * tan * tan).sqrt();
    if ux_max < t_min {
        return Err(GncError::InvalidParams("pyramid top below T_min".into()));
    }
    #[rustfmt::skip]
    let a = Matrix6x3::new(
        1.0, 0.0, 0.0,
        -1.0, 0.0, 0.0,
        -tan, 1.0, 0.0,
        -tan, -1.0, 0.0,
        -tan, 0.0, 1.0,
        -tan, 0.0, -1.0,
    );
    let b = Vector6::new(ux_max, -t_min, 0.0, 0.0, 0.0, 0.0);
    Ok(InputPolytope { a, b, delta_max, ux_min: t_min, ux_max })
}

impl InputPolytope {
    pub fn violation(&self, u: &Vec3) -> f64 {
        (self.a * u - self.b).max().max(0.0)
    }

    /// Nearest point of the pyramid along the lateral direction with `u_x` clamped.
    pub fn clamp(&self, u: &Vec3) -> Vec3 {
        let ux = u.x.clamp(self.ux_min, self.ux_max);
        let lim = ux * self.delta_max.tan();
        Vec3::new(ux, u.y.clamp(-lim, lim), u.z.clamp(-lim, lim))
    }
}

/// Offset-compensating hover thrust.
pub fn thrust_equilibrium(w: &DisturbanceVector, params: &VehicleParams) -> Vec3 {
    let r = params.r_g;
    Vec3::new(
        params.mass * (params.gravity_magnitude() - w.da.x),
        params.inertia[(2, 2)] * w.dalpha.z / r,
        -params.inertia[(1, 1)] * w.dalpha.y / r,
    )
}

/// Attitude that points the body thrust `u` straight up.
pub fn level_attitude(u: &Vec3) -> UnitQuat {
    let n = u.normalize();
    let axis = n.cross(&Vec3::x());
    let s = axis.norm();
    if s < 1e-12 {
        return UnitQuat::identity();
    }
    UnitQuat::from_axis_angle(&(axis / s), s.atan2(n.x))
}

/// Diagonal weights and horizon. Defaults are engineering estimates.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MpcWeights {
    pub q_p: [f64; 3],
    pub q_v: [f64; 3],
    /// Weights on `(ω_y, ω_z)`.
    pub q_omega: [f64; 2],
    pub q_t: [f64; 3],
    pub r: [f64; 3],
    pub q_n: [f64; 3],
    pub horizon: usize,
    /// Step of the prediction model, s.
    pub dt: f64,
}

impl Default for MpcWeights {
    fn default() -> Self {
        Self {
            q_p: [10.0; 3],
            q_v: [5.0; 3],
            q_omega: [1.0; 2],
            q_t: [0.01; 3],
            r: [0.05; 3],
            q_n: [100.0; 3],
            horizon: 20,
            dt: 0.04,
        }
    }
}

impl MpcWeights {
    pub fn validate(&self) -> Result<()> {
        let all = self.q_p.iter().chain(&self.q_v).chain(&self.q_omega).chain(&self.q_t).chain(&self.q_n);
        if all.clone().any(|&w| !(w >= 0.0)) || self.r.iter().any(|&w| !(w > 0.0)) {
            return Err(GncError::InvalidParams("MPC weights must be >= 0 with R > 0".into()));
        }
        if self.horizon < 2 || !(self.dt > 0.0) {
            return Err(GncError::InvalidParams("MPC horizon must be >= 2 with positive step".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Reference {
    pub p_sp: Vec3,
    pub v_sp: Vec3,
}

/// Problem (7) for one tick.
#[derive(Debug, Clone)]
pub struct MpcProblem {
    pub x0: StateVec,
    pub w: DistVec,
    pub reference: Reference,
    pub weights: MpcWeights,
    pub polytope: InputPolytope,
    pub params: VehicleParams,
    pub t_eq: Vec3,
    warm: Option<DVector<f64>>,
}

impl MpcProblem {
    pub fn new(
        x_hat: &VehicleState,
        w_hat: &DisturbanceVector,
        reference: Reference,
        weights: &MpcWeights,
        polytope: &InputPolytope,
        params: &VehicleParams,
    ) -> Result<Self> {
        weights.validate()?;
        Ok(Self {
            x0: x_hat.to_vector(),
            w: w_hat.to_vector(),
            reference,
            weights: weights.clone(),
            polytope: *polytope,
            params: params.clone(),
            t_eq: thrust_equilibrium(w_hat, params),
            warm: None,
        })
    }

    fn n(&self) -> usize {
        self.weights.horizon
    }

    fn ix(&self, i: usize) -> usize {
        NX * i
    }

    fn iu(&self, i: usize) -> usize {
        NX * (self.n() + 1) + NU * i
    }

    fn state(&self, z: &DVector<f64>, i: usize) -> StateVec {
        StateVec::from_iterator(z.rows(self.ix(i), NX).iter().copied())
    }

    fn input(&self, z: &DVector<f64>, i: usize) -> Vec3 {
        Vec3::new(z[self.iu(i)], z[self.iu(i) + 1], z[self.iu(i) + 2])
    }

    /// Decision vector obtained by rolling the model out from `x0` under `inputs`.
    pub fn rollout(&self, inputs: &[Vec3]) -> DVector<f64> {
        let mut z = DVector::zeros(self.num_vars());
        let mut x = self.x0;
        z.rows_mut(0, NX).copy_from(&x);
        for (i, u) in inputs.iter().enumerate().take(self.n()) {
            let u = self.polytope.clamp(u);
            z.fixed_rows_mut::<3>(self.iu(i)).copy_from(&u);
            x = rk4_step_vec(&x, &u, &self.w, self.weights.dt, &self.params);
            z.rows_mut(self.ix(i + 1), NX).copy_from(&x);
        }
        z
    }

    pub fn set_warm_start(&mut self, z: DVector<f64>) {
        self.warm = Some(z);
    }

    /// Weighted residual blocks `(index, weight, target)` of the objective; every term of
    /// the cost is `weight * (z[index] - target)²`.
    fn residual_terms(&self) -> Vec<(usize, f64, f64)> {
        let w = &self.weights;
        let r = &self.reference;
        let dv = [self.w[0], self.w[1], self.w[2]];
        let mut terms = Vec::with_capacity(self.n() * 14 + 3);
        for i in 0..self.n() {
            let xi = self.ix(i);
            for a in 0..3 {
                terms.push((xi + IDX_P + a, w.q_p[a], r.p_sp[a]));
                terms.push((xi + IDX_V + a, w.q_v[a], r.v_sp[a] - dv[a]));
                terms.push((xi + IDX_T + a, w.q_t[a], self.t_eq[a]));
                terms.push((self.iu(i) + a, w.r[a], self.t_eq[a]));
            }
            terms.push((xi + IDX_W + 1, w.q_omega[0], 0.0));
            terms.push((xi + IDX_W + 2, w.q_omega[1], 0.0));
        }
        let xn = self.ix(self.n());
        for a in 0..3 {
            terms.push((xn + IDX_P + a, w.q_n[a], r.p_sp[a]));
        }
        terms
    }
}

impl NlpProblem for MpcProblem {
    fn num_vars(&self) -> usize {
        NX * (self.n() + 1) + NU * self.n()
    }

    fn num_eq(&self) -> usize {
        NX * (self.n() + 1)
    }

    fn num_ineq(&self) -> usize {
        6 * self.n()
    }

    fn bounds(&self) -> (DVector<f64>, DVector<f64>) {
        let n = self.num_vars();
        (DVector::from_element(n, f64::NEG_INFINITY), DVector::from_element(n, f64::INFINITY))
    }

    fn initial_guess(&self) -> DVector<f64> {
        match &self.warm {
            Some(z) => z.clone(),
            None => self.rollout(&vec![self.t_eq; self.n()]),
        }
    }

    fn cost(&self, z: &DVector<f64>) -> f64 {
        self.residual_terms().iter().map(|&(i, w, t)| w * (z[i] - t).powi(2)).sum()
    }

    fn cost_gradient(&self, z: &DVector<f64>) -> DVector<f64> {
        let mut g = DVector::zeros(self.num_vars());
        for (i, w, t) in self.residual_terms() {
            g[i] += 2.0 * w * (z[i] - t);
        }
        g
    }

    fn equalities(&self, z: &DVector<f64>) -> DVector<f64> {
        let mut c = DVector::zeros(self.num_eq());
        c.rows_mut(0, NX).copy_from(&(self.state(z, 0) - self.x0));
        for i in 0..self.n() {
            let next = rk4_step_vec(&self.state(z, i), &self.input(z, i), &self.w, self.weights.dt, &self.params);
            c.rows_mut(NX * (i + 1), NX).copy_from(&(self.state(z, i + 1) - next));
        }
        c
    }

    fn equality_jacobian(&self, z: &DVector<f64>) -> DMatrix<f64> {
        let mut j = DMatrix::zeros(self.num_eq(), self.num_vars());
        for a in 0..NX {
            j[(a, a)] = 1.0;
        }
        for i in 0..self.n() {
            let lin = linearize_vec(&self.state(z, i), &self.input(z, i), &self.w, &self.params, self.weights.dt);
            let r = NX * (i + 1);
            j.view_mut((r, self.ix(i)), (NX, NX)).copy_from(&(-lin.a));
            j.view_mut((r, self.iu(i)), (NX, NU)).copy_from(&(-lin.b));
            for a in 0..NX {
                j[(r + a, self.ix(i + 1) + a)] = 1.0;
            }
        }
        j
    }

    fn inequalities(&self, z: &DVector<f64>) -> DVector<f64> {
        let mut c = DVector::zeros(self.num_ineq());
        for i in 0..self.n() {
            let v = self.polytope.a * self.input(z, i) - self.polytope.b;
            c.rows_mut(6 * i, 6).copy_from(&v);
        }
        c
    }

    fn inequality_jacobian(&self, _z: &DVector<f64>) -> DMatrix<f64> {
        let mut j = DMatrix::zeros(self.num_ineq(), self.num_vars());
        for i in 0..self.n() {
            j.view_mut((6 * i, self.iu(i)), (6, NU)).copy_from(&self.polytope.a);
        }
        j
    }

    /// Gauss-Newton: the cost Hessian only.
    fn lagrangian_hessian(&self, _z: &DVector<f64>, _l: &DVector<f64>, _m: &DVector<f64>) -> Option<DMatrix<f64>> {
        let mut h = DMatrix::zeros(self.num_vars(), self.num_vars());
        for (i, w, _) in self.residual_terms() {
            h[(i, i)] += 2.0 * w;
        }
        Some(h)
    }

    fn dependent_vars(&self) -> Option<Vec<usize>> {
        Some((0..self.num_eq()).collect())
    }
}

/// Result of one MPC tick.
#[derive(Debug, Clone)]
pub struct MpcOutput {
    pub u0: ControlInput,
    pub q_sp: UnitQuat,
    pub thrust_x: f64,
    pub report: SolveReport,
    /// The command is a fallback rather than a solver result.
    pub fallback: bool,
    pub inputs: Vec<Vec3>,
    pub states: Vec<StateVec>,
}

/// Solve one tick from `problem`'s initial guess.
pub fn solve_mpc(problem: &MpcProblem, opts: &SqpOptions) -> Result<(DVector<f64>, MpcOutput)> {
    let z0 = problem.initial_guess();
    let sol = solve_nlp_from(problem, z0, opts)?;
    let z = sol.z;
    let inputs: Vec<Vec3> = (0..problem.n()).map(|i| problem.input(&z, i)).collect();
    let states: Vec<StateVec> = (0..=problem.n()).map(|i| problem.state(&z, i)).collect();
    let q1 = states[1].fixed_rows::<4>(IDX_Q);
    let q_sp = UnitQuat::normalize(q1[0], q1[1], q1[2], q1[3])?;
    let u0 = inputs[0];
    let out = MpcOutput {
        u0: ControlInput(u0),
        q_sp,
        thrust_x: u0.x,
        report: sol.report,
        fallback: false,
        inputs,
        states,
    };
    Ok((z, out))
}

/// A solve is usable when it converged, or ran out of iterations with the dynamics and
/// input constraints satisfied to the acceptance tolerance.
fn usable(report: &SolveReport, accept_violation: f64) -> bool {
    match report.status {
        SolveStatus::Converged => true,
        SolveStatus::MaxIterations => report.violation <= accept_violation,
        _ => false,
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MpcConfig {
    pub weights: MpcWeights,
    /// Gimbal limit, deg.
    pub delta_max_deg: f64,
    pub thrust_min: f64,
    pub thrust_max: f64,
    pub solver: SqpOptions,
    /// Largest constraint violation of an iteration-limited solve still used.
    pub accept_violation: f64,
}

impl Default for MpcConfig {
    fn default() -> Self {
        Self {
            weights: MpcWeights::default(),
            delta_max_deg: 15.0,
            thrust_min: 5.0,
            thrust_max: 15.0,
            solver: SqpOptions { max_iter: 15, tol_kkt: 1e-5, ..Default::default() },
            accept_violation: 1e-4,
        }
    }
}

/// Receding-horizon controller with warm start and failure fallback.
#[derive(Debug, Clone)]
pub struct MpcController {
    pub config: MpcConfig,
    pub polytope: InputPolytope,
    pub params: VehicleParams,
    previous: Option<DVector<f64>>,
    last_u0: Option<Vec3>,
    failures: usize,
}

impl MpcController {
    pub fn new(config: MpcConfig, params: VehicleParams) -> Result<Self> {
        config.weights.validate()?;
        let polytope = build_input_polytope(config.delta_max_deg.to_radians(), config.thrust_min, config.thrust_max)?;
        Ok(Self { config, polytope, params, previous: None, last_u0: None, failures: 0 })
    }

    pub fn consecutive_failures(&self) -> usize {
        self.failures
    }

    /// One MPC tick.
    pub fn step(&mut self, x_hat: &VehicleState, w_hat: &DisturbanceVector, reference: Reference) -> Result<MpcOutput> {
        let start = Instant::now();
        let mut problem = MpcProblem::new(x_hat, w_hat, reference, &self.config.weights, &self.polytope, &self.params)?;
        let n = problem.n();
        if let Some(prev) = &self.previous {
            let shifted: Vec<Vec3> = (0..n).map(|i| problem.input(prev, (i + 1).min(n - 1))).collect();
            problem.set_warm_start(problem.rollout(&shifted));
        }
        let solved = solve_mpc(&problem, &self.config.solver);
        match solved {
            Ok((z, out)) if usable(&out.report, self.config.accept_violation) => {
                self.previous = Some(z);
                self.last_u0 = Some(out.u0.0);
                self.failures = 0;
                Ok(out)
            }
            other => {
                self.failures += 1;
                let report = match other {
                    Ok((_, out)) => out.report,
                    Err(e) => {
                        log::warn!("MPC solve error: {e}");
                        SolveReport {
                            status: SolveStatus::NumericalFailure,
                            iterations: 0,
                            kkt: f64::NAN,
                            violation: f64::NAN,
                            wall_time_s: start.elapsed().as_secs_f64(),
                            objective: f64::NAN,
                            merit_history: vec![],
                            penalty: 0.0,
                        }
                    }
                };
                let (u, q_sp) = match (self.failures >= 3, self.last_u0) {
                    (false, Some(u)) => (u, x_hat.q),
                    _ => {
                        self.previous = None;
                        let u = self.polytope.clamp(&problem.t_eq);
                        (u, level_attitude(&u))
                    }
                };
                Ok(MpcOutput {
                    u0: ControlInput(u),
                    q_sp,
                    thrust_x: u.x,
                    report,
                    fallback: true,
                    inputs: vec![u; n],
                    states: vec![],
                })
            }
        }
    }
}
