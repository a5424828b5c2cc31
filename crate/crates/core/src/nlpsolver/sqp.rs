//! Line-search SQP with an ℓ1 merit function.
//!
//! When the problem names one dependent variable per equality constraint, the QP
//! subproblem is solved in the reduced space of the remaining variables: the equality
//! Jacobian restricted to the dependent columns is eliminated (forward substitution when
//! it is lower triangular, LU otherwise), so only inequality constraints reach the
//! dual active-set solver.

use std::time::Instant;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use super::qp::{solve_qp_unchecked, QpProblem};
use crate::{GncError, Result};

/// Smooth nonlinear program `min f(z)` s.t. `c_eq(z) = 0`, `c_in(z) ≤ 0`, `lower ≤ z ≤ upper`.
pub trait NlpProblem {
    fn num_vars(&self) -> usize;
    fn num_eq(&self) -> usize;
    fn num_ineq(&self) -> usize;
    /// Variable bounds; entries may be infinite.
    fn bounds(&self) -> (DVector<f64>, DVector<f64>);
    fn initial_guess(&self) -> DVector<f64>;
    fn cost(&self, z: &DVector<f64>) -> f64;
    fn cost_gradient(&self, z: &DVector<f64>) -> DVector<f64>;
    fn equalities(&self, z: &DVector<f64>) -> DVector<f64>;
    fn equality_jacobian(&self, z: &DVector<f64>) -> DMatrix<f64>;
    fn inequalities(&self, z: &DVector<f64>) -> DVector<f64>;
    fn inequality_jacobian(&self, z: &DVector<f64>) -> DMatrix<f64>;

    /// Hessian of `f + λᵀc_eq + μᵀc_in`. `None` selects damped BFGS.
    fn lagrangian_hessian(&self, _z: &DVector<f64>, _lambda: &DVector<f64>, _mu: &DVector<f64>) -> Option<DMatrix<f64>> {
        None
    }

    /// One variable per equality row such that the equality Jacobian restricted to these
    /// columns is nonsingular. Enables the reduced-space QP.
    fn dependent_vars(&self) -> Option<Vec<usize>> {
        None
    }
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(default, deny_unknown_fields)]
pub struct SqpOptions {
    pub tol_kkt: f64,
    pub tol_feas: f64,
    pub max_iter: usize,
    pub armijo: f64,
    pub backtrack: f64,
    pub max_backtracks: usize,
    /// Try a second-order correction when the full step is rejected.
    pub second_order_correction: bool,
}

impl Default for SqpOptions {
    fn default() -> Self {
        Self {
            tol_kkt: 1e-6,
            tol_feas: 1e-6,
            max_iter: 100,
            armijo: 1e-4,
            backtrack: 0.5,
            max_backtracks: 30,
            second_order_correction: true,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SolveStatus {
    Converged,
    MaxIterations,
    InfeasibleQp,
    NumericalFailure,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SolveReport {
    pub status: SolveStatus,
    pub iterations: usize,
    /// Max of stationarity and complementarity residuals at the returned point.
    pub kkt: f64,
    /// Max constraint violation at the returned point.
    pub violation: f64,
    pub wall_time_s: f64,
    pub objective: f64,
    /// Merit before and after each accepted step, both under that step's penalty.
    pub merit_history: Vec<(f64, f64)>,
    pub penalty: f64,
}

impl SolveReport {
    pub fn converged(&self) -> bool {
        self.status == SolveStatus::Converged
    }
}

#[derive(Debug, Clone)]
pub struct NlpSolution {
    pub z: DVector<f64>,
    pub eq_duals: DVector<f64>,
    pub ineq_duals: DVector<f64>,
    pub lower_duals: DVector<f64>,
    pub upper_duals: DVector<f64>,
    pub report: SolveReport,
}

struct Eval {
    f: f64,
    g: DVector<f64>,
    ce: DVector<f64>,
    je: DMatrix<f64>,
    ci: DVector<f64>,
    ji: DMatrix<f64>,
}

fn evaluate<P: NlpProblem + ?Sized>(p: &P, z: &DVector<f64>) -> Result<Eval> {
    let (n, me, mi) = (p.num_vars(), p.num_eq(), p.num_ineq());
    let e = Eval {
        f: p.cost(z),
        g: p.cost_gradient(z),
        ce: p.equalities(z),
        je: p.equality_jacobian(z),
        ci: p.inequalities(z),
        ji: p.inequality_jacobian(z),
    };
    if e.g.len() != n || e.ce.len() != me || e.je.shape() != (me, n) || e.ci.len() != mi || e.ji.shape() != (mi, n) {
        return Err(GncError::InvalidArgument("NLP callback dimensions disagree with declared sizes".into()));
    }
    Ok(e)
}

fn trial_parts<P: NlpProblem + ?Sized>(p: &P, z: &DVector<f64>) -> (f64, DVector<f64>, DVector<f64>) {
    (p.cost(z), p.equalities(z), p.inequalities(z))
}

fn l1_violation(ce: &DVector<f64>, ci: &DVector<f64>) -> f64 {
    ce.iter().map(|v| v.abs()).sum::<f64>() + ci.iter().map(|v| v.max(0.0)).sum::<f64>()
}

fn max_violation(ce: &DVector<f64>, ci: &DVector<f64>, z: &DVector<f64>, lo: &DVector<f64>, hi: &DVector<f64>) -> f64 {
    let mut v = ce.amax();
    for c in ci.iter() {
        v = v.max(*c);
    }
    for i in 0..z.len() {
        v = v.max(lo[i] - z[i]).max(z[i] - hi[i]);
    }
    v.max(0.0)
}

/// Column-wise nonzero pattern of a dense matrix.
pub(crate) struct SparseCols {
    pub nrows: usize,
    pub cols: Vec<Vec<(usize, f64)>>,
}

impl SparseCols {
    pub fn from_dense(m: &DMatrix<f64>) -> Self {
        let cols = (0..m.ncols())
            .map(|j| m.column(j).iter().enumerate().filter(|(_, v)| **v != 0.0).map(|(i, v)| (i, *v)).collect())
            .collect();
        Self { nrows: m.nrows(), cols }
    }
}

enum DependentSolver {
    Lower { cols: SparseCols, diag: Vec<f64> },
    Lu {
        lu: nalgebra::LU<f64, nalgebra::Dyn, nalgebra::Dyn>,
        lu_t: nalgebra::LU<f64, nalgebra::Dyn, nalgebra::Dyn>,
    },
}

impl DependentSolver {
    fn new(a_d: &DMatrix<f64>) -> Result<Self> {
        let n = a_d.nrows();
        let cols = SparseCols::from_dense(a_d);
        let scale = a_d.amax().max(1e-300);
        let lower = cols.cols.iter().enumerate().all(|(k, c)| c.iter().all(|(i, _)| *i >= k));
        if lower {
            let diag: Vec<f64> = (0..n).map(|k| a_d[(k, k)]).collect();
            if diag.iter().all(|d| d.abs() > 1e-12 * scale) {
                return Ok(Self::Lower { cols, diag });
            }
        }
        let lu = a_d.clone().lu();
        if !lu.is_invertible() {
            return Err(GncError::Numerical("dependent-variable block of the equality Jacobian is singular".into()));
        }
        Ok(Self::Lu { lu, lu_t: a_d.transpose().lu() })
    }

    fn solve_in_place(&self, x: &mut DVector<f64>) {
        match self {
            Self::Lower { cols, diag } => {
                for k in 0..diag.len() {
                    let xk = x[k] / diag[k];
                    x[k] = xk;
                    if xk != 0.0 {
                        for &(i, v) in &cols.cols[k] {
                            if i > k {
                                x[i] -= v * xk;
                            }
                        }
                    }
                }
            }
            Self::Lu { lu, .. } => {
                lu.solve_mut(x);
            }
        }
    }

    fn solve_transpose(&self, rhs: &DVector<f64>) -> DVector<f64> {
        match self {
            Self::Lower { cols, diag } => {
                let mut x = rhs.clone();
                for k in (0..diag.len()).rev() {
                    let mut s = x[k];
                    for &(i, v) in &cols.cols[k] {
                        if i > k {
                            s -= v * x[i];
                        }
                    }
                    x[k] = s / diag[k];
                }
                x
            }
            Self::Lu { lu_t, .. } => {
                let mut x = rhs.clone();
                lu_t.solve_mut(&mut x);
                x
            }
        }
    }
}

/// Null-space basis `Z = [−A_D⁻¹A_I; I]` of the linearized equalities (dependent rows stored).
struct Reduction {
    dep: Vec<usize>,
    indep: Vec<usize>,
    /// position of each variable: Ok(dep position) or Err(indep position)
    slot: Vec<std::result::Result<usize, usize>>,
    solver: DependentSolver,
    zd: DMatrix<f64>,
}

impl Reduction {
    fn new(je: &DMatrix<f64>, dep: &[usize]) -> Result<Self> {
        let n = je.ncols();
        let mut slot = vec![Err(usize::MAX); n];
        for (r, &j) in dep.iter().enumerate() {
            slot[j] = Ok(r);
        }
        let mut indep = Vec::with_capacity(n - dep.len());
        for j in 0..n {
            if slot[j].is_err() {
                slot[j] = Err(indep.len());
                indep.push(j);
            }
        }
        let a_d = je.select_columns(dep.iter());
        let solver = DependentSolver::new(&a_d)?;
        let ne = dep.len();
        let ni = indep.len();
        let mut zd = DMatrix::zeros(ne, ni);
        for (c, &j) in indep.iter().enumerate() {
            let mut col: DVector<f64> = -je.column(j);
            if col.iter().any(|v| *v != 0.0) {
                solver.solve_in_place(&mut col);
                zd.set_column(c, &col);
            }
        }
        Ok(Self { dep: dep.to_vec(), indep, slot, solver, zd })
    }

    fn ni(&self) -> usize {
        self.indep.len()
    }

    /// `M Z` for a sparse `M` given by its columns.
    fn right_multiply(&self, m: &SparseCols) -> DMatrix<f64> {
        let ni = self.ni();
        let mut out = DMatrix::zeros(m.nrows, ni);
        for (j, col) in m.cols.iter().enumerate() {
            match self.slot[j] {
                Ok(r) => {
                    for &(i, v) in col {
                        for c in 0..ni {
                            out[(i, c)] += v * self.zd[(r, c)];
                        }
                    }
                }
                Err(c) => {
                    for &(i, v) in col {
                        out[(i, c)] += v;
                    }
                }
            }
        }
        out
    }

    /// `Zᵀ v`.
    fn project(&self, v: &DVector<f64>) -> DVector<f64> {
        let vd = DVector::from_iterator(self.dep.len(), self.dep.iter().map(|&j| v[j]));
        let mut out = self.zd.tr_mul(&vd);
        for (c, &j) in self.indep.iter().enumerate() {
            out[c] += v[j];
        }
        out
    }

    /// Particular step `d0` with `A_D d0_D = −c_e`, zero on independent variables.
    fn particular(&self, ce: &DVector<f64>, n: usize) -> DVector<f64> {
        let mut x = -ce;
        self.solver.solve_in_place(&mut x);
        let mut d0 = DVector::zeros(n);
        for (r, &j) in self.dep.iter().enumerate() {
            d0[j] = x[r];
        }
        d0
    }

    fn expand(&self, d0: &DVector<f64>, di: &DVector<f64>) -> DVector<f64> {
        let mut d = d0.clone();
        let dd = &self.zd * di;
        for (r, &j) in self.dep.iter().enumerate() {
            d[j] += dd[r];
        }
        for (c, &j) in self.indep.iter().enumerate() {
            d[j] += di[c];
        }
        d
    }
}

/// Eigenvalue mirroring: replace each eigenvalue by `max(|λ|, floor)`.
fn convexify(h: &DMatrix<f64>) -> DMatrix<f64> {
    let sym = (h + h.transpose()) * 0.5;
    if let Some(ch) = sym.clone().cholesky() {
        let d = ch.l_dirty().diagonal();
        let (mn, mx) = d.iter().fold((f64::INFINITY, 0.0f64), |(a, b), v| (a.min(v.abs()), b.max(v.abs())));
        if mn * mn > 1e-10 * mx * mx {
            return sym;
        }
    }
    let eig = sym.symmetric_eigen();
    let scale = eig.eigenvalues.amax().max(1.0);
    let floor = (1e-8 * scale).max(1e-8);
    let vals = eig.eigenvalues.map(|l| l.abs().max(floor));
    &eig.eigenvectors * DMatrix::from_diagonal(&vals) * eig.eigenvectors.transpose()
}

/// Result of one QP subproblem in the original coordinates.
struct Step {
    d: DVector<f64>,
    mu: DVector<f64>,
    nu_lo: DVector<f64>,
    nu_hi: DVector<f64>,
    /// ℓ1 norm of linearized constraint violation at `d`
    lin_violation: f64,
    elastic: bool,
}

/// QP data that does not depend on the constraint constants, so a second-order correction
/// can reuse it.
enum Subproblem {
    Reduced {
        red: Reduction,
        hr: DMatrix<f64>,
        b_sparse: SparseCols,
        /// general rows in reduced coordinates: inequalities then dependent-variable bounds
        a_r: DMatrix<f64>,
        ji_sparse: SparseCols,
        dep_bounds: Vec<(usize, bool)>,
    },
    Full {
        b: DMatrix<f64>,
    },
}

struct Ctx<'a> {
    lo: &'a DVector<f64>,
    hi: &'a DVector<f64>,
}

impl Subproblem {
    fn build(eval: &Eval, b: &DMatrix<f64>, dep: Option<&[usize]>, ctx: &Ctx) -> Result<Self> {
        let Some(dep) = dep else {
            return Ok(Self::Full { b: convexify(b) });
        };
        let red = Reduction::new(&eval.je, dep)?;
        let b_sparse = SparseCols::from_dense(b);
        let bz = red.right_multiply(&b_sparse);
        let bz_dep = bz.select_rows(red.dep.iter());
        let mut hr = red.zd.tr_mul(&bz_dep);
        for (c, &j) in red.indep.iter().enumerate() {
            let row = bz.row(j);
            for k in 0..red.ni() {
                hr[(c, k)] += row[k];
            }
        }
        let hr = convexify(&hr);

        let ji_sparse = SparseCols::from_dense(&eval.ji);
        let aiz = red.right_multiply(&ji_sparse);
        let mut dep_bounds = Vec::new();
        for &j in &red.dep {
            if ctx.lo[j].is_finite() {
                dep_bounds.push((j, false));
            }
            if ctx.hi[j].is_finite() {
                dep_bounds.push((j, true));
            }
        }
        let mi = eval.ci.len();
        let mut a_r = DMatrix::zeros(mi + dep_bounds.len(), red.ni());
        a_r.rows_mut(0, mi).copy_from(&aiz);
        for (k, &(j, upper)) in dep_bounds.iter().enumerate() {
            let r = red.slot[j].unwrap();
            let sign = if upper { 1.0 } else { -1.0 };
            for c in 0..red.ni() {
                a_r[(mi + k, c)] = sign * red.zd[(r, c)];
            }
        }
        Ok(Self::Reduced { red, hr, b_sparse, a_r, ji_sparse, dep_bounds })
    }

    /// Solve for constants `ce`, `ci` (the QP constraints are `ce + J_e d = 0`, `ci + J_i d ≤ 0`).
    fn solve(&self, eval: &Eval, ce: &DVector<f64>, ci: &DVector<f64>, z: &DVector<f64>, ctx: &Ctx, penalty: f64) -> Result<Step> {
        let n = z.len();
        match self {
            Self::Full { b } => {
                let lo = ctx.lo - z;
                let hi = ctx.hi - z;
                let qp = QpProblem::new(b.clone(), eval.g.clone())
                    .with_equalities(eval.je.clone(), -ce)
                    .with_inequalities(eval.ji.clone(), -ci)
                    .with_bounds(lo.clone(), hi.clone());
                let (feasible, sol) = solve_qp_unchecked(&qp)?;
                if feasible {
                    return Ok(Step {
                        d: sol.z,
                        mu: sol.ineq_duals,
                        nu_lo: sol.lower_duals,
                        nu_hi: sol.upper_duals,
                        lin_violation: 0.0,
                        elastic: false,
                    });
                }
                let (d, mu_all, nu_lo, nu_hi) = elastic_full(b, &eval.g, &eval.je, ce, &eval.ji, ci, &lo, &hi, penalty)?;
                let mu = mu_all.rows(eval.je.nrows(), ci.len()).into_owned();
                let lin = l1_violation(&(ce + &eval.je * &d), &(ci + &eval.ji * &d));
                Ok(Step { d, mu, nu_lo, nu_hi, lin_violation: lin, elastic: true })
            }
            Self::Reduced { red, hr, b_sparse, a_r, ji_sparse, dep_bounds } => {
                let d0 = red.particular(ce, n);
                // gradient of the model at d0
                let mut gd = eval.g.clone();
                for (j, col) in b_sparse.cols.iter().enumerate() {
                    let v = d0[j];
                    if v != 0.0 {
                        for &(i, b) in col {
                            gd[i] += b * v;
                        }
                    }
                }
                let gr = red.project(&gd);
                let mi = ci.len();
                let mut ai_d0 = DVector::<f64>::zeros(mi);
                for (j, col) in ji_sparse.cols.iter().enumerate() {
                    let v = d0[j];
                    if v != 0.0 {
                        for &(i, a) in col {
                            ai_d0[i] += a * v;
                        }
                    }
                }
                let mut rhs = DVector::zeros(a_r.nrows());
                for i in 0..mi {
                    rhs[i] = -ci[i] - ai_d0[i];
                }
                for (k, &(j, upper)) in dep_bounds.iter().enumerate() {
                    rhs[mi + k] = if upper { ctx.hi[j] - z[j] - d0[j] } else { -(ctx.lo[j] - z[j] - d0[j]) };
                }
                let ni = red.ni();
                let lo_i = DVector::from_iterator(ni, red.indep.iter().map(|&j| ctx.lo[j] - z[j]));
                let hi_i = DVector::from_iterator(ni, red.indep.iter().map(|&j| ctx.hi[j] - z[j]));
                let qp = QpProblem::new(hr.clone(), gr.clone())
                    .with_inequalities(a_r.clone(), rhs.clone())
                    .with_bounds(lo_i.clone(), hi_i.clone());
                let (feasible, sol) = solve_qp_unchecked(&qp)?;
                let (di, mu_r, nl, nh, lin, elastic) = if feasible {
                    (sol.z, sol.ineq_duals, sol.lower_duals, sol.upper_duals, 0.0, false)
                } else {
                    let empty = DMatrix::zeros(0, ni);
                    let (di, mu_all, nl, nh) =
                        elastic_full(hr, &gr, &empty, &DVector::zeros(0), a_r, &(-&rhs), &lo_i, &hi_i, penalty)?;
                    let resid = a_r * &di - &rhs;
                    let lin = resid.iter().map(|v| v.max(0.0)).sum();
                    (di, mu_all, nl, nh, lin, true)
                };
                let d = red.expand(&d0, &di);
                let mut mu = mu_r.rows(0, mi).into_owned();
                mu.iter_mut().for_each(|v| *v = v.max(0.0));
                let mut nu_lo = DVector::zeros(n);
                let mut nu_hi = DVector::zeros(n);
                for (c, &j) in red.indep.iter().enumerate() {
                    nu_lo[j] = nl[c];
                    nu_hi[j] = nh[c];
                }
                for (k, &(j, upper)) in dep_bounds.iter().enumerate() {
                    if upper {
                        nu_hi[j] = mu_r[mi + k];
                    } else {
                        nu_lo[j] = mu_r[mi + k];
                    }
                }
                Ok(Step { d, mu, nu_lo, nu_hi, lin_violation: lin, elastic })
            }
        }
    }

    /// Equality multipliers making the dependent components of the Lagrangian gradient vanish.
    fn equality_duals(&self, grad_rest: &DVector<f64>, je: &DMatrix<f64>) -> DVector<f64> {
        match self {
            Self::Reduced { red, .. } => {
                let rhs = DVector::from_iterator(red.dep.len(), red.dep.iter().map(|&j| -grad_rest[j]));
                red.solver.solve_transpose(&rhs)
            }
            Self::Full { .. } => {
                if je.nrows() == 0 {
                    return DVector::zeros(0);
                }
                // least squares J_eᵀ λ ≈ −grad
                let jt = je.transpose();
                let svd = jt.svd(true, true);
                svd.solve(&(-grad_rest), 1e-12).unwrap_or_else(|_| DVector::zeros(je.nrows()))
            }
        }
    }
}

/// Elastic QP: constraints relaxed by nonnegative slacks priced at `penalty` in ℓ1.
/// Returns `(d, duals of [eq rows; ineq rows], ν_lo, ν_hi)`.
#[allow(clippy::too_many_arguments)]
fn elastic_full(
    h: &DMatrix<f64>,
    g: &DVector<f64>,
    je: &DMatrix<f64>,
    ce: &DVector<f64>,
    ji: &DMatrix<f64>,
    ci: &DVector<f64>,
    lo: &DVector<f64>,
    hi: &DVector<f64>,
    penalty: f64,
) -> Result<(DVector<f64>, DVector<f64>, DVector<f64>, DVector<f64>)> {
    let n = g.len();
    let me = ce.len();
    let mi = ci.len();
    let ns = 2 * me + mi;
    let nt = n + ns;
    let delta = 1e-6;
    let mut hh = DMatrix::zeros(nt, nt);
    hh.view_mut((0, 0), (n, n)).copy_from(&convexify(h));
    for k in n..nt {
        hh[(k, k)] = delta;
    }
    let mut gg = DVector::zeros(nt);
    gg.rows_mut(0, n).copy_from(g);
    gg.rows_mut(n, ns).fill(penalty);
    let mut aeq = DMatrix::zeros(me, nt);
    for i in 0..me {
        for k in 0..n {
            aeq[(i, k)] = je[(i, k)];
        }
        aeq[(i, n + 2 * i)] = -1.0;
        aeq[(i, n + 2 * i + 1)] = 1.0;
    }
    let mut ain = DMatrix::zeros(mi, nt);
    for i in 0..mi {
        for k in 0..n {
            ain[(i, k)] = ji[(i, k)];
        }
        ain[(i, n + 2 * me + i)] = -1.0;
    }
    let mut lo2 = DVector::zeros(nt);
    let mut hi2 = DVector::from_element(nt, f64::INFINITY);
    lo2.rows_mut(0, n).copy_from(lo);
    hi2.rows_mut(0, n).copy_from(hi);
    let qp = QpProblem::new(hh, gg).with_equalities(aeq, -ce).with_inequalities(ain, -ci).with_bounds(lo2, hi2);
    let (feasible, sol) = solve_qp_unchecked(&qp)?;
    if !feasible {
        return Err(GncError::Numerical("elastic QP failed".into()));
    }
    let mut duals = DVector::zeros(me + mi);
    duals.rows_mut(0, me).copy_from(&sol.eq_duals);
    duals.rows_mut(me, mi).copy_from(&sol.ineq_duals);
    Ok((
        sol.z.rows(0, n).into_owned(),
        duals,
        sol.lower_duals.rows(0, n).into_owned(),
        sol.upper_duals.rows(0, n).into_owned(),
    ))
}

struct Kkt {
    stationarity: f64,
    complementarity: f64,
    lambda: DVector<f64>,
}

fn kkt_measure(
    eval: &Eval,
    sub: &Subproblem,
    step: &Step,
    z: &DVector<f64>,
    ctx: &Ctx,
) -> Kkt {
    let mut grad = &eval.g + eval.ji.tr_mul(&step.mu) - &step.nu_lo + &step.nu_hi;
    let lambda = sub.equality_duals(&grad, &eval.je);
    if !lambda.is_empty() {
        grad += eval.je.tr_mul(&lambda);
    }
    let mut comp = 0.0f64;
    for i in 0..eval.ci.len() {
        comp = comp.max((step.mu[i] * eval.ci[i]).abs());
    }
    for i in 0..z.len() {
        if step.nu_lo[i] != 0.0 {
            comp = comp.max((step.nu_lo[i] * (z[i] - ctx.lo[i])).abs());
        }
        if step.nu_hi[i] != 0.0 {
            comp = comp.max((step.nu_hi[i] * (ctx.hi[i] - z[i])).abs());
        }
    }
    Kkt { stationarity: grad.amax(), complementarity: comp, lambda }
}

fn lagrangian_gradient(eval: &Eval, lambda: &DVector<f64>, mu: &DVector<f64>) -> DVector<f64> {
    let mut g = &eval.g + eval.ji.tr_mul(mu);
    if !lambda.is_empty() {
        g += eval.je.tr_mul(lambda);
    }
    g
}

fn bfgs_update(b: &mut DMatrix<f64>, s: &DVector<f64>, y: &DVector<f64>) {
    let bs = &*b * s;
    let sbs = s.dot(&bs);
    if sbs <= 1e-300 {
        return;
    }
    let sy = s.dot(y);
    let r = if sy >= 0.2 * sbs {
        y.clone()
    } else {
        let theta = 0.8 * sbs / (sbs - sy);
        y * theta + &bs * (1.0 - theta)
    };
    let sr = s.dot(&r);
    if sr <= 1e-300 {
        return;
    }
    *b -= &bs * bs.transpose() / sbs;
    *b += &r * r.transpose() / sr;
}

/// Solve the NLP from `problem.initial_guess()` (clipped into the bounds).
pub fn solve_nlp<P: NlpProblem + ?Sized>(problem: &P, opts: &SqpOptions) -> Result<NlpSolution> {
    let z0 = problem.initial_guess();
    solve_nlp_from(problem, z0, opts)
}

/// Solve the NLP from an explicit starting point.
pub fn solve_nlp_from<P: NlpProblem + ?Sized>(problem: &P, z0: DVector<f64>, opts: &SqpOptions) -> Result<NlpSolution> {
    let start = Instant::now();
    let n = problem.num_vars();
    let (lo, hi) = problem.bounds();
    if z0.len() != n || lo.len() != n || hi.len() != n {
        return Err(GncError::InvalidArgument("initial guess or bounds have the wrong dimension".into()));
    }
    if (0..n).any(|i| lo[i] > hi[i]) {
        return Err(GncError::InvalidArgument("lower bound above upper bound".into()));
    }
    let dep = problem.dependent_vars();
    if let Some(d) = &dep {
        if d.len() != problem.num_eq() || d.iter().any(|&j| j >= n) {
            return Err(GncError::InvalidArgument("dependent variable list does not match the equalities".into()));
        }
    }
    let ctx = Ctx { lo: &lo, hi: &hi };
    let mut z = DVector::from_fn(n, |i, _| z0[i].clamp(lo[i], hi[i]));
    let me = problem.num_eq();
    let mi = problem.num_ineq();
    let mut lambda = DVector::zeros(me);
    let mut mu = DVector::zeros(mi);
    let mut nu_lo = DVector::zeros(n);
    let mut nu_hi = DVector::zeros(n);
    let mut bfgs = DMatrix::identity(n, n);
    let mut penalty: f64 = 1.0;
    let mut merit_history = Vec::new();
    let mut eval = evaluate(problem, &z)?;
    let mut last_kkt = f64::INFINITY;
    let mut status = SolveStatus::MaxIterations;
    let mut iterations = 0;
    let mut elastic_stalls = 0;

    while iterations < opts.max_iter {
        let hess = problem.lagrangian_hessian(&z, &lambda, &mu).unwrap_or_else(|| bfgs.clone());
        let sub = match Subproblem::build(&eval, &hess, dep.as_deref(), &ctx) {
            Ok(s) => s,
            Err(_) => {
                status = SolveStatus::NumericalFailure;
                break;
            }
        };
        let step = match sub.solve(&eval, &eval.ce, &eval.ci, &z, &ctx, penalty) {
            Ok(s) => s,
            Err(_) => {
                status = SolveStatus::NumericalFailure;
                break;
            }
        };
        let kkt = kkt_measure(&eval, &sub, &step, &z, &ctx);
        let viol = max_violation(&eval.ce, &eval.ci, &z, &lo, &hi);
        last_kkt = kkt.stationarity.max(kkt.complementarity);
        if !step.elastic {
            lambda = kkt.lambda.clone();
            mu = step.mu.clone();
            nu_lo = step.nu_lo.clone();
            nu_hi = step.nu_hi.clone();
        }
        if !step.elastic && last_kkt <= opts.tol_kkt && viol <= opts.tol_feas {
            status = SolveStatus::Converged;
            break;
        }
        iterations += 1;

        let mult_max = kkt.lambda.amax().max(step.mu.amax());
        if !step.elastic {
            // Powell's rule: follows the multipliers down as well as up
            let target = 1.5 * mult_max + 1e-3;
            penalty = if penalty < target { target.max(2.0 * penalty.min(target)) } else { target.max(0.5 * (penalty + target)) };
        }
        let v0 = l1_violation(&eval.ce, &eval.ci);
        let merit0 = eval.f + penalty * v0;
        let dir = eval.g.dot(&step.d) + penalty * (step.lin_violation - v0);
        let d_norm = step.d.amax();

        if step.elastic && (dir >= -1e-12 || d_norm < 1e-12) {
            elastic_stalls += 1;
            if elastic_stalls >= 2 || d_norm < 1e-12 {
                status = SolveStatus::InfeasibleQp;
                break;
            }
            penalty *= 10.0;
            continue;
        }
        if dir >= 0.0 {
            if d_norm < 1e-14 * z.amax().max(1.0) {
                // no progress possible at machine precision
                status = if viol <= opts.tol_feas { SolveStatus::MaxIterations } else { SolveStatus::NumericalFailure };
                break;
            }
            penalty *= 2.0;
        }

        let merit_at = |zt: &DVector<f64>| {
            let (f, ce, ci) = trial_parts(problem, zt);
            f + penalty * l1_violation(&ce, &ci)
        };
        let clip = |v: DVector<f64>| DVector::from_fn(n, |i, _| v[i].clamp(lo[i], hi[i]));
        let mut accepted: Option<(DVector<f64>, f64)> = None;

        let z_full = clip(&z + &step.d);
        let m_full = merit_at(&z_full);
        if m_full.is_finite() && m_full <= merit0 + opts.armijo * dir {
            accepted = Some((z_full.clone(), m_full));
        } else if opts.second_order_correction {
            let (_, ce_t, ci_t) = trial_parts(problem, &z_full);
            let ce_s = &ce_t - &eval.je * &step.d;
            let ci_s = &ci_t - &eval.ji * &step.d;
            if let Ok(soc) = sub.solve(&eval, &ce_s, &ci_s, &z, &ctx, penalty) {
                if !soc.elastic {
                    let z_soc = clip(&z + &soc.d);
                    let m_soc = merit_at(&z_soc);
                    if m_soc.is_finite() && m_soc <= merit0 + opts.armijo * dir {
                        accepted = Some((z_soc, m_soc));
                    }
                }
            }
        }
        if accepted.is_none() {
            let mut alpha = 1.0;
            for _ in 0..opts.max_backtracks {
                alpha *= opts.backtrack;
                let zt = clip(&z + &step.d * alpha);
                let mt = merit_at(&zt);
                if mt.is_finite() && mt <= merit0 + opts.armijo * alpha * dir {
                    accepted = Some((zt, mt));
                    break;
                }
            }
        }
        let Some((z_new, m_new)) = accepted else {
            status = if step.elastic { SolveStatus::InfeasibleQp } else { SolveStatus::NumericalFailure };
            break;
        };
        merit_history.push((merit0, m_new));
        let eval_new = evaluate(problem, &z_new)?;
        if problem.lagrangian_hessian(&z_new, &lambda, &mu).is_none() {
            let lam = if step.elastic { lambda.clone() } else { kkt.lambda.clone() };
            let y = lagrangian_gradient(&eval_new, &lam, &step.mu) - lagrangian_gradient(&eval, &lam, &step.mu);
            bfgs_update(&mut bfgs, &(&z_new - &z), &y);
        }
        if !step.elastic {
            elastic_stalls = 0;
        }
        z = z_new;
        eval = eval_new;
    }

    let violation = max_violation(&eval.ce, &eval.ci, &z, &lo, &hi);
    let report = SolveReport {
        status,
        iterations,
        kkt: last_kkt,
        violation,
        wall_time_s: start.elapsed().as_secs_f64(),
        objective: eval.f,
        merit_history,
        penalty,
    };
    Ok(NlpSolution { z, eq_duals: lambda, ineq_duals: mu, lower_duals: nu_lo, upper_duals: nu_hi, report })
}

#[cfg(test)]
mod tests {
    use super::*;

    struct Rosenbrock;
    impl NlpProblem for Rosenbrock {
        fn num_vars(&self) -> usize { 2 }
        fn num_eq(&self) -> usize { 0 }
        fn num_ineq(&self) -> usize { 0 }
        fn bounds(&self) -> (DVector<f64>, DVector<f64>) {
            (DVector::from_element(2, f64::NEG_INFINITY), DVector::from_element(2, f64::INFINITY))
        }
        fn initial_guess(&self) -> DVector<f64> { DVector::from_vec(vec![-1.2, 1.0]) }
        fn cost(&self, z: &DVector<f64>) -> f64 { 100.0 * (z[1] - z[0] * z[0]).powi(2) + (1.0 - z[0]).powi(2) }
        fn cost_gradient(&self, z: &DVector<f64>) -> DVector<f64> {
            DVector::from_vec(vec![
                -400.0 * z[0] * (z[1] - z[0] * z[0]) - 2.0 * (1.0 - z[0]),
                200.0 * (z[1] - z[0] * z[0]),
            ])
        }
        fn equalities(&self, _: &DVector<f64>) -> DVector<f64> { DVector::zeros(0) }
        fn equality_jacobian(&self, _: &DVector<f64>) -> DMatrix<f64> { DMatrix::zeros(0, 2) }
        fn inequalities(&self, _: &DVector<f64>) -> DVector<f64> { DVector::zeros(0) }
        fn inequality_jacobian(&self, _: &DVector<f64>) -> DMatrix<f64> { DMatrix::zeros(0, 2) }
    }

    struct RosenbrockExact;
    impl NlpProblem for RosenbrockExact {
        fn num_vars(&self) -> usize { 2 }
        fn num_eq(&self) -> usize { 0 }
        fn num_ineq(&self) -> usize { 0 }
        fn bounds(&self) -> (DVector<f64>, DVector<f64>) { Rosenbrock.bounds() }
        fn initial_guess(&self) -> DVector<f64> { Rosenbrock.initial_guess() }
        fn cost(&self, z: &DVector<f64>) -> f64 { Rosenbrock.cost(z) }
        fn cost_gradient(&self, z: &DVector<f64>) -> DVector<f64> { Rosenbrock.cost_gradient(z) }
        fn equalities(&self, z: &DVector<f64>) -> DVector<f64> { Rosenbrock.equalities(z) }
        fn equality_jacobian(&self, z: &DVector<f64>) -> DMatrix<f64> { Rosenbrock.equality_jacobian(z) }
        fn inequalities(&self, z: &DVector<f64>) -> DVector<f64> { Rosenbrock.inequalities(z) }
        fn inequality_jacobian(&self, z: &DVector<f64>) -> DMatrix<f64> { Rosenbrock.inequality_jacobian(z) }
        fn lagrangian_hessian(&self, z: &DVector<f64>, _: &DVector<f64>, _: &DVector<f64>) -> Option<DMatrix<f64>> {
            Some(DMatrix::from_row_slice(2, 2, &[
                1200.0 * z[0] * z[0] - 400.0 * z[1] + 2.0, -400.0 * z[0],
                -400.0 * z[0], 200.0,
            ]))
        }
    }

    /// min ‖z‖² s.t. z0 + z1 = 1, optional dependent-variable hint.
    struct LineProblem {
        reduced: bool,
    }
    impl NlpProblem for LineProblem {
        fn num_vars(&self) -> usize { 2 }
        fn num_eq(&self) -> usize { 1 }
        fn num_ineq(&self) -> usize { 0 }
        fn bounds(&self) -> (DVector<f64>, DVector<f64>) { Rosenbrock.bounds() }
        fn initial_guess(&self) -> DVector<f64> { DVector::from_vec(vec![3.0, -1.0]) }
        fn cost(&self, z: &DVector<f64>) -> f64 { z.norm_squared() }
        fn cost_gradient(&self, z: &DVector<f64>) -> DVector<f64> { z * 2.0 }
        fn equalities(&self, z: &DVector<f64>) -> DVector<f64> { DVector::from_element(1, z[0] + z[1] - 1.0) }
        fn equality_jacobian(&self, _: &DVector<f64>) -> DMatrix<f64> { DMatrix::from_row_slice(1, 2, &[1.0, 1.0]) }
        fn inequalities(&self, _: &DVector<f64>) -> DVector<f64> { DVector::zeros(0) }
        fn inequality_jacobian(&self, _: &DVector<f64>) -> DMatrix<f64> { DMatrix::zeros(0, 2) }
        fn dependent_vars(&self) -> Option<Vec<usize>> { self.reduced.then(|| vec![1]) }
    }

    /// min (z0−2)² + (z1−1)² s.t. z0² − z1 ≤ 0, z0 + z1 ≤ 2 (Hock–Schittkowski style).
    struct Disk;
    impl NlpProblem for Disk {
        fn num_vars(&self) -> usize { 2 }
        fn num_eq(&self) -> usize { 0 }
        fn num_ineq(&self) -> usize { 2 }
        fn bounds(&self) -> (DVector<f64>, DVector<f64>) { Rosenbrock.bounds() }
        fn initial_guess(&self) -> DVector<f64> { DVector::from_vec(vec![2.0, 2.0]) }
        fn cost(&self, z: &DVector<f64>) -> f64 { (z[0] - 2.0).powi(2) + (z[1] - 1.0).powi(2) }
        fn cost_gradient(&self, z: &DVector<f64>) -> DVector<f64> {
            DVector::from_vec(vec![2.0 * (z[0] - 2.0), 2.0 * (z[1] - 1.0)])
        }
        fn equalities(&self, _: &DVector<f64>) -> DVector<f64> { DVector::zeros(0) }
        fn equality_jacobian(&self, _: &DVector<f64>) -> DMatrix<f64> { DMatrix::zeros(0, 2) }
        fn inequalities(&self, z: &DVector<f64>) -> DVector<f64> {
            DVector::from_vec(vec![z[0] * z[0] - z[1], z[0] + z[1] - 2.0])
        }
        fn inequality_jacobian(&self, z: &DVector<f64>) -> DMatrix<f64> {
            DMatrix::from_row_slice(2, 2, &[2.0 * z[0], -1.0, 1.0, 1.0])
        }
    }

    #[test]
    fn rosenbrock_bfgs() {
        let sol = solve_nlp(&Rosenbrock, &SqpOptions::default()).unwrap();
        assert_eq!(sol.report.status, SolveStatus::Converged);
        assert!((sol.z[0] - 1.0).abs() < 1e-6 && (sol.z[1] - 1.0).abs() < 1e-6, "{}", sol.z);
    }

    #[test]
    fn rosenbrock_exact_hessian() {
        let sol = solve_nlp(&RosenbrockExact, &SqpOptions::default()).unwrap();
        assert_eq!(sol.report.status, SolveStatus::Converged);
        assert!((sol.z[0] - 1.0).abs() < 1e-6 && (sol.z[1] - 1.0).abs() < 1e-6);
    }

    #[test]
    fn equality_constrained_both_paths() {
        for reduced in [false, true] {
            let p = LineProblem { reduced };
            let sol = solve_nlp(&p, &SqpOptions::default()).unwrap();
            assert_eq!(sol.report.status, SolveStatus::Converged);
            assert!((sol.z[0] - 0.5).abs() < 1e-8 && (sol.z[1] - 0.5).abs() < 1e-8);
            assert!((sol.eq_duals[0] + 1.0).abs() < 1e-6);
        }
    }

    #[test]
    fn inequality_constrained() {
        let sol = solve_nlp(&Disk, &SqpOptions::default()).unwrap();
        assert_eq!(sol.report.status, SolveStatus::Converged);
        // optimum on z0 + z1 = 2 and z0² = z1: z0 = 1
        assert!((sol.z[0] - 1.0).abs() < 1e-6 && (sol.z[1] - 1.0).abs() < 1e-6, "{}", sol.z);
        let g = Disk.cost_gradient(&sol.z) + Disk.inequality_jacobian(&sol.z).tr_mul(&sol.ineq_duals);
        assert!(g.amax() < 1e-5);
        for (a, b) in &sol.report.merit_history {
            assert!(b <= a);
        }
    }

    #[test]
    fn infeasible_problem_reported() {
        struct Bad;
        impl NlpProblem for Bad {
            fn num_vars(&self) -> usize { 1 }
            fn num_eq(&self) -> usize { 0 }
            fn num_ineq(&self) -> usize { 2 }
            fn bounds(&self) -> (DVector<f64>, DVector<f64>) {
                (DVector::from_element(1, f64::NEG_INFINITY), DVector::from_element(1, f64::INFINITY))
            }
            fn initial_guess(&self) -> DVector<f64> { DVector::zeros(1) }
            fn cost(&self, z: &DVector<f64>) -> f64 { z[0] * z[0] }
            fn cost_gradient(&self, z: &DVector<f64>) -> DVector<f64> { z * 2.0 }
            fn equalities(&self, _: &DVector<f64>) -> DVector<f64> { DVector::zeros(0) }
            fn equality_jacobian(&self, _: &DVector<f64>) -> DMatrix<f64> { DMatrix::zeros(0, 1) }
            fn inequalities(&self, z: &DVector<f64>) -> DVector<f64> { DVector::from_vec(vec![1.0 - z[0], z[0] + 1.0]) }
            fn inequality_jacobian(&self, _: &DVector<f64>) -> DMatrix<f64> { DMatrix::from_row_slice(2, 1, &[-1.0, 1.0]) }
        }
        let sol = solve_nlp(&Bad, &SqpOptions::default()).unwrap();
        assert_eq!(sol.report.status, SolveStatus::InfeasibleQp);
    }

    #[test]
    fn dimension_mismatch_is_an_error() {
        assert!(solve_nlp_from(&Rosenbrock, DVector::zeros(3), &SqpOptions::default()).is_err());
    }
}
