//! Free-final-time minimum-fuel guidance on a 3-DoF point-mass model.
//!
//! Time is mapped to pseudo-time `σ ∈ [0, 1]` and the dynamics are discretised by forward
//! Euler on `K` knots with derivatives scaled by `t_f`. The thrust rate is the control.
//! Decision vector: `[t_f, (p, v, T, T_dot, η)_0, …, (p, v, T, T_dot, η)_{K-1}]`.

pub mod audit;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::nlpsolver::{solve_nlp, NlpProblem, SolveReport, SqpOptions};
use crate::vehicle::VehicleState;
use crate::{GncError, Result, Vec3, GRAVITY};

pub use audit::{audit_solution, AuditReport};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Phase {
    Ascent,
    Descent,
}

/// Guidance problem parameters. Angles are in degrees. Defaults other than the vehicle
/// mass and the 3 m/s speed limit are engineering estimates.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GuidanceParams {
    /// Thrust-rate weight, s²/N.
    pub lambda_rate: f64,
    /// Velocity-slack weight.
    pub lambda_slack: f64,
    pub p_tol: f64,
    pub v_tol: f64,
    pub glide_slope_deg: f64,
    pub tilt_max_deg: f64,
    pub v_max: f64,
    pub thrust_min: f64,
    pub thrust_max: f64,
    pub thrust_rate_min: f64,
    pub thrust_rate_max: f64,
    pub knots: usize,
    pub phase: Phase,
    pub t_f_min: f64,
    pub t_f_max: f64,
    pub mass: f64,
    pub gravity: f64,
    pub solver: SqpOptions,
}

impl Default for GuidanceParams {
    fn default() -> Self {
        Self {
            lambda_rate: 0.1,
            lambda_slack: 100.0,
            p_tol: 0.2,
            v_tol: 0.2,
            glide_slope_deg: 30.0,
            tilt_max_deg: 30.0,
            v_max: 3.0,
            thrust_min: 5.0,
            thrust_max: 15.0,
            thrust_rate_min: 0.0,
            thrust_rate_max: 20.0,
            knots: 30,
            phase: Phase::Ascent,
            t_f_min: 1.0,
            t_f_max: 40.0,
            mass: 1.16,
            gravity: GRAVITY,
            solver: SqpOptions::default(),
        }
    }
}

impl GuidanceParams {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(GncError::InvalidParams(m.to_string()));
        if !(self.thrust_min >= 0.0 && self.thrust_min <= self.thrust_max) {
            return bad("require 0 <= thrust_min <= thrust_max");
        }
        if !(self.thrust_rate_min >= 0.0 && self.thrust_rate_min <= self.thrust_rate_max && self.thrust_rate_max > 0.0) {
            return bad("require 0 <= thrust_rate_min <= thrust_rate_max, thrust_rate_max > 0");
        }
        if !(0.0..90.0).contains(&self.glide_slope_deg) {
            return bad("glide slope half-angle must lie in [0, 90) deg");
        }
        if !(self.tilt_max_deg > 0.0 && self.tilt_max_deg <= 90.0) {
            return bad("tilt limit must lie in (0, 90] deg");
        }
        if self.knots < 2 {
            return bad("need at least two knots");
        }
        if !(self.t_f_min > 0.0 && self.t_f_min <= self.t_f_max) {
            return bad("require 0 < t_f_min <= t_f_max");
        }
        if !(self.p_tol > 0.0 && self.v_tol > 0.0 && self.v_max > 0.0 && self.mass > 0.0) {
            return bad("tolerances, v_max and mass must be positive");
        }
        if !(self.lambda_rate >= 0.0 && self.lambda_slack > 0.0) {
            return bad("weights must be nonnegative (slack weight positive)");
        }
        Ok(())
    }

    pub fn tan_glide(&self) -> f64 {
        self.glide_slope_deg.to_radians().tan()
    }

    pub fn cos_tilt(&self) -> f64 {
        self.tilt_max_deg.to_radians().cos()
    }

    fn gravity_vec(&self) -> Vec3 {
        Vec3::new(-self.gravity, 0.0, 0.0)
    }
}

/// Initial condition of a guidance request.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GuidanceStart {
    pub p: Vec3,
    pub v: Vec3,
    pub thrust: Vec3,
}

impl GuidanceStart {
    /// World-frame thrust of the current state estimate.
    pub fn from_state(x: &VehicleState) -> Self {
        Self { p: x.p, v: x.v, thrust: crate::quatkin::rotmat(&x.q) * x.thrust }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GuidanceTarget {
    pub p: Vec3,
    pub v: Vec3,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Knot {
    pub p: Vec3,
    pub v: Vec3,
    pub thrust: Vec3,
    pub thrust_rate: Vec3,
    pub slack: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct GuidanceSolution {
    pub t_f: f64,
    pub knots: Vec<Knot>,
    pub start: GuidanceStart,
    pub target: GuidanceTarget,
    pub phase: Phase,
    pub report: SolveReport,
}

const STRIDE: usize = 13;
/// Smoothing of the cost's thrust norm.
const COST_EPS: f64 = 1e-6;
/// Smoothing of norms inside constraints.
const CONSTRAINT_EPS: f64 = 1e-7;
/// Smoothing of the glide-slope cone's lateral norm. The smoothed cone is looser than the
/// exact one by at most `tan(γ)·CONE_EPS`.
const CONE_EPS: f64 = 1e-6;
/// Radius floor used for constraint curvature.
const CURVATURE_FLOOR: f64 = 1e-3;

#[derive(Debug, Clone, Copy)]
enum Ineq {
    Cone(usize),
    Speed(usize),
    ThrustMax(usize),
    ThrustMin(usize),
    Tilt(usize),
    RateMax(usize),
    RateMin(usize),
    TerminalPos,
    TerminalVel,
}

/// The transcribed guidance NLP.
#[derive(Debug, Clone)]
pub struct GuidanceProblem {
    pub start: GuidanceStart,
    pub target: GuidanceTarget,
    pub params: GuidanceParams,
    ineqs: Vec<Ineq>,
    dsigma: f64,
}

fn ip(k: usize) -> usize {
    1 + STRIDE * k
}
fn iv(k: usize) -> usize {
    ip(k) + 3
}
fn it(k: usize) -> usize {
    ip(k) + 6
}
fn ir(k: usize) -> usize {
    ip(k) + 9
}
fn ie(k: usize) -> usize {
    ip(k) + 12
}

fn v3(z: &DVector<f64>, i: usize) -> Vec3 {
    Vec3::new(z[i], z[i + 1], z[i + 2])
}

/// Value, gradient and curvature of `sqrt(|x|² + eps²)`; curvature uses a floored radius.
fn smooth_norm(x: &Vec3, eps: f64) -> (f64, Vec3, nalgebra::Matrix3<f64>) {
    smooth_norm_floored(x, eps, CURVATURE_FLOOR)
}

fn smooth_norm_floored(x: &Vec3, eps: f64, floor: f64) -> (f64, Vec3, nalgebra::Matrix3<f64>) {
    let s = (x.norm_squared() + eps * eps).sqrt();
    let sh = s.max(floor);
    let hess = (nalgebra::Matrix3::identity() - x * x.transpose() / (sh * sh)) / sh;
    (s, x / s, hess)
}

fn add_block(h: &mut DMatrix<f64>, i: usize, j: usize, m: &nalgebra::Matrix3<f64>, scale: f64) {
    for a in 0..3 {
        for b in 0..3 {
            h[(i + a, j + b)] += scale * m[(a, b)];
        }
    }
}

/// Lateral (e2, e3) components.
fn lateral(d: &Vec3) -> Vec3 {
    Vec3::new(0.0, d.y, d.z)
}

/// Terminal tolerance used when the request is to hold position.
const HOVER_TOL: f64 = 1e-5;

/// Start and target coincide with zero velocities: the request is to hold position. The
/// terminal balls are shrunk so the solver cannot trade the tolerance for fuel.
pub fn is_hover_request(start: &GuidanceStart, target: &GuidanceTarget) -> bool {
    (target.p - start.p).norm() < 1e-9 && start.v.norm() < 1e-9 && target.v.norm() < 1e-9
}

/// Build the NLP for one guidance request.
pub fn transcribe(start: GuidanceStart, target: GuidanceTarget, params: &GuidanceParams) -> Result<GuidanceProblem> {
    params.validate()?;
    let mut params = params.clone();
    if is_hover_request(&start, &target) {
        params.p_tol = params.p_tol.min(HOVER_TOL);
        params.v_tol = params.v_tol.min(HOVER_TOL);
    }
    let params = &params;
    let k_n = params.knots;
    let mut ineqs = Vec::new();
    for k in 0..k_n {
        let cone = match params.phase {
            Phase::Ascent => k > 0,
            Phase::Descent => k + 1 < k_n,
        };
        if cone {
            ineqs.push(Ineq::Cone(k));
        }
        ineqs.push(Ineq::Speed(k));
        ineqs.push(Ineq::ThrustMax(k));
        if params.thrust_min > 0.0 {
            ineqs.push(Ineq::ThrustMin(k));
        }
        ineqs.push(Ineq::Tilt(k));
        ineqs.push(Ineq::RateMax(k));
        if params.thrust_rate_min > 0.0 {
            ineqs.push(Ineq::RateMin(k));
        }
    }
    ineqs.push(Ineq::TerminalPos);
    ineqs.push(Ineq::TerminalVel);
    Ok(GuidanceProblem { start, target, params: params.clone(), ineqs, dsigma: 1.0 / (k_n - 1) as f64 })
}

impl GuidanceProblem {
    pub fn knots(&self) -> usize {
        self.params.knots
    }

    /// Straight-line warm start with hover thrust.
    pub fn warm_start(&self) -> DVector<f64> {
        let p = &self.params;
        let k_n = p.knots;
        let dist = (self.target.p - self.start.p).norm();
        let t_f = (dist / (0.5 * p.v_max)).clamp(p.t_f_min, p.t_f_max);
        let mut z = DVector::zeros(self.num_vars());
        z[0] = t_f;
        let vel = (self.target.p - self.start.p) / t_f;
        for k in 0..k_n {
            let s = k as f64 * self.dsigma;
            let pk = self.start.p + (self.target.p - self.start.p) * s;
            z.fixed_rows_mut::<3>(ip(k)).copy_from(&pk);
            let vk = if k == 0 { self.start.v } else { vel };
            z.fixed_rows_mut::<3>(iv(k)).copy_from(&vk);
            let tk = if k == 0 { self.start.thrust } else { Vec3::new(p.mass * p.gravity, 0.0, 0.0) };
            z.fixed_rows_mut::<3>(it(k)).copy_from(&tk);
            z[ie(k)] = (vk.norm() - p.v_max).max(0.0);
        }
        z
    }

    fn ineq_value(&self, c: Ineq, z: &DVector<f64>) -> f64 {
        let p = &self.params;
        match c {
            Ineq::Cone(k) => {
                let anchor = self.cone_anchor(z);
                let d = v3(z, ip(k)) - anchor;
                let l = lateral(&d);
                let (s, _, _) = smooth_norm(&l, CONE_EPS);
                p.tan_glide() * (s - CONE_EPS) - d.x
            }
            Ineq::Speed(k) => smooth_norm(&v3(z, iv(k)), CONSTRAINT_EPS).0 - p.v_max - z[ie(k)],
            Ineq::ThrustMax(k) => smooth_norm(&v3(z, it(k)), CONSTRAINT_EPS).0 - p.thrust_max,
            Ineq::ThrustMin(k) => p.thrust_min - v3(z, it(k)).norm(),
            Ineq::Tilt(k) => {
                let t = v3(z, it(k));
                p.cos_tilt() * t.norm() - t.x
            }
            Ineq::RateMax(k) => (v3(z, ir(k)).norm_squared() - p.thrust_rate_max.powi(2)) / (2.0 * p.thrust_rate_max),
            Ineq::RateMin(k) => (p.thrust_rate_min.powi(2) - v3(z, ir(k)).norm_squared()) / (2.0 * p.thrust_rate_min),
            Ineq::TerminalPos => {
                let d = v3(z, ip(p.knots - 1)) - self.target.p;
                (d.norm_squared() - p.p_tol * p.p_tol) / (2.0 * p.p_tol)
            }
            Ineq::TerminalVel => {
                let d = v3(z, iv(p.knots - 1)) - self.target.v;
                (d.norm_squared() - p.v_tol * p.v_tol) / (2.0 * p.v_tol)
            }
        }
    }

    fn cone_anchor(&self, z: &DVector<f64>) -> Vec3 {
        match self.params.phase {
            Phase::Ascent => self.start.p,
            Phase::Descent => v3(z, ip(self.params.knots - 1)),
        }
    }

    /// Gradient entries `(index, value)` of one inequality.
    fn ineq_gradient(&self, c: Ineq, z: &DVector<f64>, out: &mut Vec<(usize, f64)>) {
        out.clear();
        let p = &self.params;
        let push3 = |out: &mut Vec<(usize, f64)>, i: usize, g: Vec3| {
            for a in 0..3 {
                out.push((i + a, g[a]));
            }
        };
        match c {
            Ineq::Cone(k) => {
                let d = v3(z, ip(k)) - self.cone_anchor(z);
                let (_, gl, _) = smooth_norm(&lateral(&d), CONE_EPS);
                let g = Vec3::new(-1.0, p.tan_glide() * gl.y, p.tan_glide() * gl.z);
                push3(out, ip(k), g);
                if p.phase == Phase::Descent {
                    push3(out, ip(p.knots - 1), -g);
                }
            }
            Ineq::Speed(k) => {
                push3(out, iv(k), smooth_norm(&v3(z, iv(k)), CONSTRAINT_EPS).1);
                out.push((ie(k), -1.0));
            }
            Ineq::ThrustMax(k) => push3(out, it(k), smooth_norm(&v3(z, it(k)), CONSTRAINT_EPS).1),
            Ineq::ThrustMin(k) => {
                let t = v3(z, it(k));
                push3(out, it(k), -t / t.norm().max(1e-12));
            }
            Ineq::Tilt(k) => {
                let t = v3(z, it(k));
                let mut g = t / t.norm().max(1e-12) * p.cos_tilt();
                g.x -= 1.0;
                push3(out, it(k), g);
            }
            Ineq::RateMax(k) => push3(out, ir(k), v3(z, ir(k)) / p.thrust_rate_max),
            Ineq::RateMin(k) => push3(out, ir(k), -v3(z, ir(k)) / p.thrust_rate_min),
            Ineq::TerminalPos => {
                let k = p.knots - 1;
                push3(out, ip(k), (v3(z, ip(k)) - self.target.p) / p.p_tol);
            }
            Ineq::TerminalVel => {
                let k = p.knots - 1;
                push3(out, iv(k), (v3(z, iv(k)) - self.target.v) / p.v_tol);
            }
        }
    }

    fn ineq_hessian(&self, c: Ineq, z: &DVector<f64>, mu: f64, h: &mut DMatrix<f64>) {
        if mu == 0.0 {
            return;
        }
        let p = &self.params;
        let eye = nalgebra::Matrix3::<f64>::identity();
        match c {
            Ineq::Cone(k) => {
                let d = v3(z, ip(k)) - self.cone_anchor(z);
                let (_, _, hl) = smooth_norm_floored(&lateral(&d), CONE_EPS, 0.0);
                let mut m = hl * p.tan_glide();
                for a in 0..3 {
                    m[(0, a)] = 0.0;
                    m[(a, 0)] = 0.0;
                }
                add_block(h, ip(k), ip(k), &m, mu);
                if p.phase == Phase::Descent {
                    let kf = p.knots - 1;
                    add_block(h, ip(kf), ip(kf), &m, mu);
                    add_block(h, ip(k), ip(kf), &m, -mu);
                    add_block(h, ip(kf), ip(k), &m, -mu);
                }
            }
            Ineq::Speed(k) => add_block(h, iv(k), iv(k), &smooth_norm(&v3(z, iv(k)), CONSTRAINT_EPS).2, mu),
            Ineq::ThrustMax(k) => add_block(h, it(k), it(k), &smooth_norm(&v3(z, it(k)), CONSTRAINT_EPS).2, mu),
            Ineq::ThrustMin(k) => add_block(h, it(k), it(k), &smooth_norm(&v3(z, it(k)), 0.0).2, -mu),
            Ineq::Tilt(k) => add_block(h, it(k), it(k), &smooth_norm(&v3(z, it(k)), 0.0).2, mu * p.cos_tilt()),
            Ineq::RateMax(k) => add_block(h, ir(k), ir(k), &eye, mu / p.thrust_rate_max),
            Ineq::RateMin(k) => add_block(h, ir(k), ir(k), &eye, -mu / p.thrust_rate_min),
            Ineq::TerminalPos => {
                let k = p.knots - 1;
                add_block(h, ip(k), ip(k), &eye, mu / p.p_tol);
            }
            Ineq::TerminalVel => {
                let k = p.knots - 1;
                add_block(h, iv(k), iv(k), &eye, mu / p.v_tol);
            }
        }
    }

    /// Fuel counts on the Euler intervals only: the last knot's thrust drives no dynamics.
    fn fuel_weight(&self, k: usize) -> f64 {
        if k + 1 < self.params.knots {
            1.0
        } else {
            0.0
        }
    }

    fn knot_cost(&self, z: &DVector<f64>, k: usize) -> f64 {
        let p = &self.params;
        let s = smooth_norm(&v3(z, it(k)), COST_EPS).0 * self.fuel_weight(k);
        s + p.lambda_rate * v3(z, ir(k)).norm_squared() + p.lambda_slack * z[ie(k)].powi(2)
    }

    /// Decode a decision vector into a solution record.
    pub fn decode(&self, z: &DVector<f64>, report: SolveReport) -> GuidanceSolution {
        let knots = (0..self.params.knots)
            .map(|k| Knot {
                p: v3(z, ip(k)),
                v: v3(z, iv(k)),
                thrust: v3(z, it(k)),
                thrust_rate: v3(z, ir(k)),
                slack: z[ie(k)],
            })
            .collect();
        GuidanceSolution { t_f: z[0], knots, start: self.start, target: self.target, phase: self.params.phase, report }
    }
}

impl NlpProblem for GuidanceProblem {
    fn num_vars(&self) -> usize {
        1 + STRIDE * self.params.knots
    }

    fn num_eq(&self) -> usize {
        9 * self.params.knots
    }

    fn num_ineq(&self) -> usize {
        self.ineqs.len()
    }

    fn bounds(&self) -> (DVector<f64>, DVector<f64>) {
        let n = self.num_vars();
        let mut lo = DVector::from_element(n, f64::NEG_INFINITY);
        let mut hi = DVector::from_element(n, f64::INFINITY);
        lo[0] = self.params.t_f_min;
        hi[0] = self.params.t_f_max;
        for k in 0..self.params.knots {
            lo[ie(k)] = 0.0;
        }
        (lo, hi)
    }

    fn initial_guess(&self) -> DVector<f64> {
        self.warm_start()
    }

    fn cost(&self, z: &DVector<f64>) -> f64 {
        let sum: f64 = (0..self.params.knots).map(|k| self.knot_cost(z, k)).sum();
        sum * z[0] * self.dsigma
    }

    fn cost_gradient(&self, z: &DVector<f64>) -> DVector<f64> {
        let p = &self.params;
        let h = z[0] * self.dsigma;
        let mut g = DVector::zeros(self.num_vars());
        let mut sum = 0.0;
        for k in 0..p.knots {
            sum += self.knot_cost(z, k);
            let (_, gt, _) = smooth_norm(&v3(z, it(k)), COST_EPS);
            g.fixed_rows_mut::<3>(it(k)).copy_from(&(gt * (h * self.fuel_weight(k))));
            g.fixed_rows_mut::<3>(ir(k)).copy_from(&(v3(z, ir(k)) * (2.0 * p.lambda_rate * h)));
            g[ie(k)] = 2.0 * p.lambda_slack * h * z[ie(k)];
        }
        g[0] = sum * self.dsigma;
        g
    }

    fn equalities(&self, z: &DVector<f64>) -> DVector<f64> {
        let p = &self.params;
        let h = z[0] * self.dsigma;
        let grav = p.gravity_vec();
        let mut c = DVector::zeros(self.num_eq());
        c.fixed_rows_mut::<3>(0).copy_from(&(v3(z, ip(0)) - self.start.p));
        c.fixed_rows_mut::<3>(3).copy_from(&(v3(z, iv(0)) - self.start.v));
        c.fixed_rows_mut::<3>(6).copy_from(&(v3(z, it(0)) - self.start.thrust));
        for k in 0..p.knots - 1 {
            let r = 9 * (k + 1);
            let dp = v3(z, ip(k + 1)) - v3(z, ip(k)) - v3(z, iv(k)) * h;
            let dv = v3(z, iv(k + 1)) - v3(z, iv(k)) - (v3(z, it(k)) / p.mass + grav) * h;
            let dt = v3(z, it(k + 1)) - v3(z, it(k)) - v3(z, ir(k)) * h;
            c.fixed_rows_mut::<3>(r).copy_from(&dp);
            c.fixed_rows_mut::<3>(r + 3).copy_from(&dv);
            c.fixed_rows_mut::<3>(r + 6).copy_from(&dt);
        }
        c
    }

    fn equality_jacobian(&self, z: &DVector<f64>) -> DMatrix<f64> {
        let p = &self.params;
        let ds = self.dsigma;
        let h = z[0] * ds;
        let grav = p.gravity_vec();
        let mut j = DMatrix::zeros(self.num_eq(), self.num_vars());
        for a in 0..9 {
            j[(a, ip(0) + a)] = 1.0;
        }
        for k in 0..p.knots - 1 {
            let r = 9 * (k + 1);
            let acc = v3(z, it(k)) / p.mass + grav;
            for a in 0..3 {
                j[(r + a, ip(k + 1) + a)] = 1.0;
                j[(r + a, ip(k) + a)] = -1.0;
                j[(r + a, iv(k) + a)] = -h;
                j[(r + a, 0)] = -ds * z[iv(k) + a];

                j[(r + 3 + a, iv(k + 1) + a)] = 1.0;
                j[(r + 3 + a, iv(k) + a)] = -1.0;
                j[(r + 3 + a, it(k) + a)] = -h / p.mass;
                j[(r + 3 + a, 0)] = -ds * acc[a];

                j[(r + 6 + a, it(k + 1) + a)] = 1.0;
                j[(r + 6 + a, it(k) + a)] = -1.0;
                j[(r + 6 + a, ir(k) + a)] = -h;
                j[(r + 6 + a, 0)] = -ds * z[ir(k) + a];
            }
        }
        j
    }

    fn inequalities(&self, z: &DVector<f64>) -> DVector<f64> {
        DVector::from_iterator(self.ineqs.len(), self.ineqs.iter().map(|&c| self.ineq_value(c, z)))
    }

    fn inequality_jacobian(&self, z: &DVector<f64>) -> DMatrix<f64> {
        let mut j = DMatrix::zeros(self.ineqs.len(), self.num_vars());
        let mut buf = Vec::with_capacity(8);
        for (row, &c) in self.ineqs.iter().enumerate() {
            self.ineq_gradient(c, z, &mut buf);
            for &(i, v) in &buf {
                j[(row, i)] += v;
            }
        }
        j
    }

    fn lagrangian_hessian(&self, z: &DVector<f64>, lambda: &DVector<f64>, mu: &DVector<f64>) -> Option<DMatrix<f64>> {
        let p = &self.params;
        let n = self.num_vars();
        let ds = self.dsigma;
        let h = z[0] * ds;
        let mut hm = DMatrix::zeros(n, n);
        // cost
        for k in 0..p.knots {
            let (_, gt, ht) = smooth_norm_floored(&v3(z, it(k)), COST_EPS, 0.0);
            let fw = self.fuel_weight(k);
            add_block(&mut hm, it(k), it(k), &ht, h * fw);
            for a in 0..3 {
                hm[(ir(k) + a, ir(k) + a)] += 2.0 * p.lambda_rate * h;
                let ct = ds * gt[a] * fw;
                hm[(0, it(k) + a)] += ct;
                hm[(it(k) + a, 0)] += ct;
                let cr = ds * 2.0 * p.lambda_rate * z[ir(k) + a];
                hm[(0, ir(k) + a)] += cr;
                hm[(ir(k) + a, 0)] += cr;
            }
            hm[(ie(k), ie(k))] += 2.0 * p.lambda_slack * h;
            let ce = ds * 2.0 * p.lambda_slack * z[ie(k)];
            hm[(0, ie(k))] += ce;
            hm[(ie(k), 0)] += ce;
        }
        // dynamics: bilinear in t_f
        for k in 0..p.knots - 1 {
            let r = 9 * (k + 1);
            for a in 0..3 {
                let cv = -ds * lambda[r + a];
                hm[(0, iv(k) + a)] += cv;
                hm[(iv(k) + a, 0)] += cv;
                let ct = -ds * lambda[r + 3 + a] / p.mass;
                hm[(0, it(k) + a)] += ct;
                hm[(it(k) + a, 0)] += ct;
                let cr = -ds * lambda[r + 6 + a];
                hm[(0, ir(k) + a)] += cr;
                hm[(ir(k) + a, 0)] += cr;
            }
        }
        for (row, &c) in self.ineqs.iter().enumerate() {
            self.ineq_hessian(c, z, mu[row], &mut hm);
        }
        Some(hm)
    }

    fn dependent_vars(&self) -> Option<Vec<usize>> {
        let mut dep = Vec::with_capacity(self.num_eq());
        for k in 0..self.params.knots {
            dep.extend(ip(k)..ip(k) + 9);
        }
        Some(dep)
    }
}

/// Solve a guidance request from the straight-line warm start.
pub fn solve_guidance(start: GuidanceStart, target: GuidanceTarget, params: &GuidanceParams) -> Result<GuidanceSolution> {
    let problem = transcribe(start, target, params)?;
    let sol = solve_nlp(&problem, &params.solver)?;
    if !sol.report.converged() {
        return Err(GncError::GuidanceFailure(Box::new(sol.report)));
    }
    let out = problem.decode(&sol.z, sol.report);
    if out.t_f <= 0.0 {
        return Err(GncError::GuidanceFailure(Box::new(out.report)));
    }
    Ok(out)
}

/// Position and velocity set-points at time `t` after the trajectory start, by linear
/// interpolation between knots; clamped to the first/last knot outside `[0, t_f]`.
pub fn sample(traj: &GuidanceSolution, t: f64) -> (Vec3, Vec3) {
    let k_n = traj.knots.len();
    if t <= 0.0 || k_n == 1 {
        return (traj.knots[0].p, traj.knots[0].v);
    }
    if t >= traj.t_f {
        let last = &traj.knots[k_n - 1];
        return (last.p, last.v);
    }
    let s = t / traj.t_f * (k_n - 1) as f64;
    let k = (s.floor() as usize).min(k_n - 2);
    let a = s - k as f64;
    let (k0, k1) = (&traj.knots[k], &traj.knots[k + 1]);
    (k0.p * (1.0 - a) + k1.p * a, k0.v * (1.0 - a) + k1.v * a)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ReplanReason {
    PreTakeoff,
    NearEnd,
    TrackingError,
    TargetChanged,
}

impl ReplanReason {
    pub fn as_str(&self) -> &'static str {
        match self {
            Self::PreTakeoff => "pre-takeoff",
            Self::NearEnd => "near-end",
            Self::TrackingError => "tracking-error",
            Self::TargetChanged => "target-changed",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ReplanThresholds {
    /// Fraction of `t_f` after which a new solve is requested.
    pub near_end_fraction: f64,
    /// Position tracking error, m.
    pub tracking_error: f64,
    /// Distance between requested and planned targets counted as a change, m.
    pub target_change: f64,
}

impl Default for ReplanThresholds {
    fn default() -> Self {
        Self { near_end_fraction: 0.9, tracking_error: 0.5, target_change: 1e-3 }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ReplanDecision {
    pub replan: bool,
    pub reason: Option<ReplanReason>,
}

impl ReplanDecision {
    fn yes(r: ReplanReason) -> Self {
        Self { replan: true, reason: Some(r) }
    }
}

/// Decide whether a new guidance solve is needed. `traj` is `None` before the first solve
/// (pre-takeoff); `t` is the time since the trajectory started; `desired_target` is the
/// currently requested landing/arrival point.
pub fn replan_needed(
    traj: Option<&GuidanceSolution>,
    t: f64,
    x_hat: &VehicleState,
    desired_target: &Vec3,
    thresholds: &ReplanThresholds,
) -> ReplanDecision {
    let Some(traj) = traj else {
        return ReplanDecision::yes(ReplanReason::PreTakeoff);
    };
    if (traj.target.p - desired_target).norm() > thresholds.target_change {
        return ReplanDecision::yes(ReplanReason::TargetChanged);
    }
    if t > thresholds.near_end_fraction * traj.t_f {
        return ReplanDecision::yes(ReplanReason::NearEnd);
    }
    let (p_sp, _) = sample(traj, t);
    if (x_hat.p - p_sp).norm() > thresholds.tracking_error {
        return ReplanDecision::yes(ReplanReason::TrackingError);
    }
    ReplanDecision { replan: false, reason: None }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nlpsolver::SolveStatus;

    fn hover_start(p: Vec3, params: &GuidanceParams) -> GuidanceStart {
        GuidanceStart { p, v: Vec3::zeros(), thrust: Vec3::new(params.mass * params.gravity, 0.0, 0.0) }
    }

    fn fd_check<P: NlpProblem>(prob: &P, z: &DVector<f64>) {
        let n = prob.num_vars();
        let h = 1e-6;
        let g = prob.cost_gradient(z);
        let je = prob.equality_jacobian(z);
        let ji = prob.inequality_jacobian(z);
        for j in 0..n {
            let mut zp = z.clone();
            let mut zm = z.clone();
            zp[j] += h;
            zm[j] -= h;
            let fd = (prob.cost(&zp) - prob.cost(&zm)) / (2.0 * h);
            assert!((fd - g[j]).abs() < 1e-5 * (1.0 + fd.abs()), "cost grad {j}: {fd} vs {}", g[j]);
            let ce = (prob.equalities(&zp) - prob.equalities(&zm)) / (2.0 * h);
            assert!((ce - je.column(j)).amax() < 1e-5, "eq jac col {j}");
            let ci = (prob.inequalities(&zp) - prob.inequalities(&zm)) / (2.0 * h);
            assert!((ci - ji.column(j)).amax() < 1e-5, "ineq jac col {j}");
        }
    }

    fn perturbed_point(prob: &GuidanceProblem) -> DVector<f64> {
        let mut z = prob.warm_start();
        for i in 1..z.len() {
            z[i] += 0.1 * ((i * 7919) % 13) as f64 / 13.0 - 0.05 + 0.3;
        }
        z
    }

    #[test]
    fn decision_vector_size() {
        let params = GuidanceParams::default();
        let prob = transcribe(
            hover_start(Vec3::zeros(), &params),
            GuidanceTarget { p: Vec3::new(10.0, 0.0, 0.0), v: Vec3::zeros() },
            &params,
        )
        .unwrap();
        assert_eq!(prob.num_vars(), 391);
        assert_eq!(prob.num_eq(), 270);
    }

    #[test]
    fn ascent_has_no_descent_cone() {
        let params = GuidanceParams::default();
        let start = hover_start(Vec3::zeros(), &params);
        let target = GuidanceTarget { p: Vec3::new(10.0, 0.0, 0.0), v: Vec3::zeros() };
        let prob = transcribe(start, target, &params).unwrap();
        // all ascent cone rows are anchored at the start, none involve the last knot
        let z = perturbed_point(&prob);
        let ji = prob.inequality_jacobian(&z);
        let kf = params.knots - 1;
        for (row, c) in prob.ineqs.iter().enumerate() {
            if let Ineq::Cone(k) = c {
                assert!(*k > 0);
                if *k != kf {
                    assert_eq!(ji[(row, ip(kf))], 0.0);
                }
            }
        }
        let mut dsc = params.clone();
        dsc.phase = Phase::Descent;
        let prob = transcribe(start, target, &dsc).unwrap();
        assert!(prob.ineqs.iter().any(|c| matches!(c, Ineq::Cone(k) if *k == 0)));
    }

    #[test]
    fn zero_glide_slope_is_altitude_condition() {
        let params = GuidanceParams { glide_slope_deg: 0.0, ..Default::default() };
        let start = hover_start(Vec3::new(1.0, 2.0, 3.0), &params);
        let prob = transcribe(start, GuidanceTarget { p: Vec3::new(5.0, 0.0, 0.0), v: Vec3::zeros() }, &params).unwrap();
        let z = perturbed_point(&prob);
        for (row, c) in prob.ineqs.iter().enumerate() {
            if let Ineq::Cone(k) = c {
                let expect = -(z[ip(*k)] - start.p.x);
                assert!((prob.inequalities(&z)[row] - expect).abs() < 1e-15);
            }
        }
    }

    #[test]
    fn invalid_thrust_bounds_rejected() {
        let params = GuidanceParams { thrust_min: 20.0, ..Default::default() };
        let start = hover_start(Vec3::zeros(), &params);
        let r = transcribe(start, GuidanceTarget { p: Vec3::new(1.0, 0.0, 0.0), v: Vec3::zeros() }, &params);
        assert!(matches!(r, Err(GncError::InvalidParams(_))));
    }

    #[test]
    fn derivatives_match_finite_differences() {
        for phase in [Phase::Ascent, Phase::Descent] {
            let params = GuidanceParams { knots: 6, phase, thrust_rate_min: 0.5, ..Default::default() };
            let start = hover_start(Vec3::new(10.0, 0.0, 0.0), &params);
            let prob =
                transcribe(start, GuidanceTarget { p: Vec3::new(0.0, 5.0, 0.0), v: Vec3::zeros() }, &params).unwrap();
            let z = perturbed_point(&prob);
            fd_check(&prob, &z);
        }
    }

    #[test]
    fn hessian_matches_finite_differences() {
        let params = GuidanceParams { knots: 5, phase: Phase::Descent, ..Default::default() };
        let start = hover_start(Vec3::new(10.0, 0.0, 0.0), &params);
        let prob = transcribe(start, GuidanceTarget { p: Vec3::new(0.0, 5.0, 0.0), v: Vec3::zeros() }, &params).unwrap();
        let z = perturbed_point(&prob);
        let lambda = DVector::from_fn(prob.num_eq(), |i, _| ((i % 5) as f64 - 2.0) * 0.3);
        let mu = DVector::from_fn(prob.num_ineq(), |i, _| (i % 3) as f64 * 0.2);
        let grad_l = |z: &DVector<f64>| {
            prob.cost_gradient(z) + prob.equality_jacobian(z).tr_mul(&lambda) + prob.inequality_jacobian(z).tr_mul(&mu)
        };
        let hm = prob.lagrangian_hessian(&z, &lambda, &mu).unwrap();
        let h = 1e-6;
        for j in 0..prob.num_vars() {
            let mut zp = z.clone();
            let mut zm = z.clone();
            zp[j] += h;
            zm[j] -= h;
            let col = (grad_l(&zp) - grad_l(&zm)) / (2.0 * h);
            assert!((col - hm.column(j)).amax() < 1e-4, "hessian column {j}");
        }
    }

    #[test]
    fn ascent_to_ten_meters() {
        let params = GuidanceParams::default();
        let start = hover_start(Vec3::zeros(), &params);
        let target = GuidanceTarget { p: Vec3::new(10.0, 0.0, 0.0), v: Vec3::zeros() };
        let sol = solve_guidance(start, target, &params).unwrap();
        assert_eq!(sol.report.status, SolveStatus::Converged);
        let audit = audit_solution(&sol, &params);
        assert!(audit.max_violation <= 1e-6, "{audit:?}");
        let max_eta = sol.knots.iter().map(|k| k.slack).fold(0.0, f64::max);
        for k in &sol.knots {
            assert!(k.v.norm() <= params.v_max + k.slack + 1e-6);
            assert!(k.v.norm() <= 3.0 + max_eta + 1e-6);
        }
    }

    #[test]
    fn stationary_request_hovers() {
        let params = GuidanceParams::default();
        let start = hover_start(Vec3::new(2.0, 0.0, 0.0), &params);
        let target = GuidanceTarget { p: start.p, v: Vec3::zeros() };
        let sol = solve_guidance(start, target, &params).unwrap();
        let hover = params.mass * params.gravity;
        let rate_sum: f64 = sol.knots.iter().map(|k| k.thrust_rate.norm()).sum();
        assert!(rate_sum < 1e-2, "{rate_sum}");
        for k in &sol.knots {
            assert!((k.thrust - Vec3::new(hover, 0.0, 0.0)).norm() < 1e-3);
        }
    }

    #[test]
    fn sampling_rules() {
        let params = GuidanceParams::default();
        let start = hover_start(Vec3::zeros(), &params);
        let target = GuidanceTarget { p: Vec3::new(10.0, 0.0, 0.0), v: Vec3::zeros() };
        let prob = transcribe(start, target, &params).unwrap();
        let z = perturbed_point(&prob);
        let report = SolveReport {
            status: SolveStatus::Converged,
            iterations: 0,
            kkt: 0.0,
            violation: 0.0,
            wall_time_s: 0.0,
            objective: 0.0,
            merit_history: vec![],
            penalty: 1.0,
        };
        let traj = prob.decode(&z, report);
        assert_eq!(sample(&traj, 0.0), (traj.knots[0].p, traj.knots[0].v));
        let last = traj.knots.last().unwrap();
        assert_eq!(sample(&traj, traj.t_f + 3.0), (last.p, last.v));
        let dt = traj.t_f / (params.knots - 1) as f64;
        let (p, v) = sample(&traj, 3.5 * dt);
        assert!((p - (traj.knots[3].p + traj.knots[4].p) / 2.0).norm() < 1e-12);
        assert!((v - (traj.knots[3].v + traj.knots[4].v) / 2.0).norm() < 1e-12);

        let vp = crate::vehicle::VehicleParams::default();
        let mut x = VehicleState::hover(Vec3::zeros(), &vp);
        let th = ReplanThresholds::default();
        let tgt = target.p;
        assert_eq!(replan_needed(None, 0.0, &x, &tgt, &th).reason, Some(ReplanReason::PreTakeoff));
        assert_eq!(replan_needed(Some(&traj), 0.95 * traj.t_f, &x, &tgt, &th).reason, Some(ReplanReason::NearEnd));
        let (p_mid, _) = sample(&traj, 0.5 * traj.t_f);
        x.p = p_mid + Vec3::new(0.0, 1.0, 0.0);
        assert_eq!(replan_needed(Some(&traj), 0.5 * traj.t_f, &x, &tgt, &th).reason, Some(ReplanReason::TrackingError));
        x.p = p_mid;
        assert!(!replan_needed(Some(&traj), 0.5 * traj.t_f, &x, &tgt, &th).replan);
        let moved = tgt + Vec3::new(0.0, 1.0, 0.0);
        assert_eq!(replan_needed(Some(&traj), 0.5 * traj.t_f, &x, &moved, &th).reason, Some(ReplanReason::TargetChanged));
    }
}
