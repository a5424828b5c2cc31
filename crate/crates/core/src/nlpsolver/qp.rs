//! Dense strictly convex QP by the Goldfarb–Idnani dual active-set method.
//!
//! Solves `min ½ zᵀHz + gᵀz` subject to `A_eq z = b_eq`, `A_in z ≤ b_in`, `lower ≤ z ≤ upper`.

use nalgebra::{DMatrix, DVector};

use crate::{GncError, Result};

#[derive(Debug, Clone)]
pub struct QpProblem {
    pub hessian: DMatrix<f64>,
    pub gradient: DVector<f64>,
    pub eq_matrix: DMatrix<f64>,
    pub eq_rhs: DVector<f64>,
    pub ineq_matrix: DMatrix<f64>,
    pub ineq_rhs: DVector<f64>,
    /// Entries may be `-inf`.
    pub lower: DVector<f64>,
    /// Entries may be `+inf`.
    pub upper: DVector<f64>,
}

impl QpProblem {
    /// Unconstrained problem of dimension `n`.
    pub fn new(hessian: DMatrix<f64>, gradient: DVector<f64>) -> Self {
        let n = gradient.len();
        Self {
            hessian,
            gradient,
            eq_matrix: DMatrix::zeros(0, n),
            eq_rhs: DVector::zeros(0),
            ineq_matrix: DMatrix::zeros(0, n),
            ineq_rhs: DVector::zeros(0),
            lower: DVector::from_element(n, f64::NEG_INFINITY),
            upper: DVector::from_element(n, f64::INFINITY),
        }
    }

    pub fn with_equalities(mut self, a: DMatrix<f64>, b: DVector<f64>) -> Self {
        self.eq_matrix = a;
        self.eq_rhs = b;
        self
    }

    pub fn with_inequalities(mut self, a: DMatrix<f64>, b: DVector<f64>) -> Self {
        self.ineq_matrix = a;
        self.ineq_rhs = b;
        self
    }

    pub fn with_bounds(mut self, lower: DVector<f64>, upper: DVector<f64>) -> Self {
        self.lower = lower;
        self.upper = upper;
        self
    }

    fn validate(&self) -> Result<()> {
        let n = self.gradient.len();
        let ok = self.hessian.shape() == (n, n)
            && self.eq_matrix.ncols() == n
            && self.eq_matrix.nrows() == self.eq_rhs.len()
            && self.ineq_matrix.ncols() == n
            && self.ineq_matrix.nrows() == self.ineq_rhs.len()
            && self.lower.len() == n
            && self.upper.len() == n;
        if !ok {
            return Err(GncError::InvalidArgument("inconsistent QP dimensions".into()));
        }
        if self.lower.iter().zip(self.upper.iter()).any(|(l, u)| l > u) {
            return Err(GncError::InvalidArgument("lower bound above upper bound".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
pub struct QpSolution {
    pub z: DVector<f64>,
    /// Multipliers of `A_eq z − b_eq = 0` in `Hz + g + A_eqᵀλ + A_inᵀμ − ν_lo + ν_up = 0`.
    pub eq_duals: DVector<f64>,
    pub ineq_duals: DVector<f64>,
    pub lower_duals: DVector<f64>,
    pub upper_duals: DVector<f64>,
    pub objective: f64,
    pub iterations: usize,
    /// Diagonal shift that was added to make the Hessian factorizable.
    pub regularization: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub enum QpOutcome {
    Optimal,
    Infeasible,
}

/// Add `εI` with ε growing tenfold from 1e-8 until the Cholesky factorization succeeds.
pub(crate) fn regularized_cholesky(h: &DMatrix<f64>) -> Result<(nalgebra::Cholesky<f64, nalgebra::Dyn>, f64)> {
    let sym = (h + h.transpose()) * 0.5;
    if let Some(c) = sym.clone().cholesky() {
        return Ok((c, 0.0));
    }
    let mut eps = 1e-8;
    let scale = sym.amax().max(1.0);
    while eps < 1e12 * scale {
        let mut m = sym.clone();
        for i in 0..m.nrows() {
            m[(i, i)] += eps;
        }
        if let Some(c) = m.cholesky() {
            return Ok((c, eps));
        }
        eps *= 10.0;
    }
    Err(GncError::Numerical("QP Hessian could not be regularized".into()))
}

/// Constraint in Goldfarb–Idnani form `nᵀz + c ≥ 0` (or `= 0`).
struct GiConstraints {
    normals: DMatrix<f64>,
    offsets: DVector<f64>,
}

struct GiResult {
    x: DVector<f64>,
    /// multiplier per constraint column (zero if inactive)
    u: DVector<f64>,
    iterations: usize,
    feasible: bool,
}

/// Dual active-set core operating on a factorized Hessian `G = L Lᵀ`.
struct GoldfarbIdnani {
    n: usize,
    j: DMatrix<f64>,
    r: DMatrix<f64>,
    r_norm: f64,
    iq: usize,
}

impl GoldfarbIdnani {
    fn compute_d(&self, np: &DVector<f64>) -> DVector<f64> {
        self.j.tr_mul(np)
    }

    fn update_z(&self, d: &DVector<f64>) -> DVector<f64> {
        let mut z = DVector::zeros(self.n);
        for jcol in self.iq..self.n {
            let dj = d[jcol];
            if dj != 0.0 {
                z.axpy(dj, &self.j.column(jcol), 1.0);
            }
        }
        z
    }

    fn update_r(&self, d: &DVector<f64>) -> DVector<f64> {
        let mut r = DVector::zeros(self.iq);
        for i in (0..self.iq).rev() {
            let mut sum = 0.0;
            for k in i + 1..self.iq {
                sum += self.r[(i, k)] * r[k];
            }
            r[i] = (d[i] - sum) / self.r[(i, i)];
        }
        r
    }

    fn add_constraint(&mut self, d: &mut DVector<f64>) -> bool {
        let n = self.n;
        let mut jj = n - 1;
        while jj > self.iq {
            let mut cc = d[jj - 1];
            let mut ss = d[jj];
            let h = cc.hypot(ss);
            if h != 0.0 {
                d[jj] = 0.0;
                ss /= h;
                cc /= h;
                if cc < 0.0 {
                    cc = -cc;
                    ss = -ss;
                    d[jj - 1] = -h;
                } else {
                    d[jj - 1] = h;
                }
                let xny = ss / (1.0 + cc);
                for k in 0..n {
                    let t1 = self.j[(k, jj - 1)];
                    let t2 = self.j[(k, jj)];
                    let a = t1 * cc + t2 * ss;
                    self.j[(k, jj - 1)] = a;
                    self.j[(k, jj)] = xny * (t1 + a) - t2;
                }
            }
            jj -= 1;
        }
        self.iq += 1;
        for i in 0..self.iq {
            self.r[(i, self.iq - 1)] = d[i];
        }
        let diag = d[self.iq - 1].abs();
        if diag <= f64::EPSILON * self.r_norm {
            return false;
        }
        self.r_norm = self.r_norm.max(diag);
        true
    }

    /// Remove active constraint `l` (a constraint index) from the working set. `active[iq]`
    /// and `u[iq]` hold the pending constraint and are shifted along.
    fn delete_constraint(&mut self, active: &mut [usize], u: &mut DVector<f64>, p: usize, l: usize) {
        let n = self.n;
        let mut qq = None;
        for i in p..self.iq {
            if active[i] == l {
                qq = Some(i);
                break;
            }
        }
        let Some(qq) = qq else { return };
        for i in qq..self.iq - 1 {
            active[i] = active[i + 1];
            u[i] = u[i + 1];
            for k in 0..n {
                self.r[(k, i)] = self.r[(k, i + 1)];
            }
        }
        active[self.iq - 1] = active[self.iq];
        u[self.iq - 1] = u[self.iq];
        active[self.iq] = 0;
        u[self.iq] = 0.0;
        for k in 0..self.iq {
            self.r[(k, self.iq - 1)] = 0.0;
        }
        self.iq -= 1;
        if self.iq == 0 {
            return;
        }
        for jj in qq..self.iq {
            let mut cc = self.r[(jj, jj)];
            let mut ss = self.r[(jj + 1, jj)];
            let h = cc.hypot(ss);
            if h == 0.0 {
                continue;
            }
            cc /= h;
            ss /= h;
            self.r[(jj + 1, jj)] = 0.0;
            if cc < 0.0 {
                self.r[(jj, jj)] = -h;
                cc = -cc;
                ss = -ss;
            } else {
                self.r[(jj, jj)] = h;
            }
            let xny = ss / (1.0 + cc);
            for k in jj + 1..self.iq {
                let t1 = self.r[(jj, k)];
                let t2 = self.r[(jj + 1, k)];
                let a = t1 * cc + t2 * ss;
                self.r[(jj, k)] = a;
                self.r[(jj + 1, k)] = xny * (t1 + a) - t2;
            }
            for k in 0..n {
                let t1 = self.j[(k, jj)];
                let t2 = self.j[(k, jj + 1)];
                let a = t1 * cc + t2 * ss;
                self.j[(k, jj)] = a;
                self.j[(k, jj + 1)] = xny * (a + t1) - t2;
            }
        }
    }
}

fn goldfarb_idnani(
    chol: &nalgebra::Cholesky<f64, nalgebra::Dyn>,
    g0: &DVector<f64>,
    eq: &GiConstraints,
    ineq: &GiConstraints,
    max_iter: usize,
) -> Result<GiResult> {
    let n = g0.len();
    let p = eq.normals.ncols();
    let m = ineq.normals.ncols();
    let l = chol.l();
    let lt_inv = l
        .transpose()
        .solve_upper_triangular(&DMatrix::identity(n, n))
        .ok_or_else(|| GncError::Numerical("singular Cholesky factor".into()))?;
    let c1 = chol.l().diagonal().map(|v| v * v).sum();
    let c2 = lt_inv.trace().abs();

    let mut gi = GoldfarbIdnani { n, j: lt_inv, r: DMatrix::zeros(n, n + 1), r_norm: 1.0, iq: 0 };
    let mut x = -chol.solve(g0);
    let mut u = DVector::zeros(n + 1);
    let mut active = vec![0usize; n + 1];
    let mut iterations = 0;

    // equality constraints enter first with unrestricted sign
    for i in 0..p {
        let np: DVector<f64> = eq.normals.column(i).into();
        let mut d = gi.compute_d(&np);
        let z = gi.update_z(&d);
        let r = gi.update_r(&d);
        let zn = z.dot(&np);
        let t2 = if z.dot(&z).abs() > f64::EPSILON { (-np.dot(&x) - eq.offsets[i]) / zn } else { 0.0 };
        x.axpy(t2, &z, 1.0);
        u[gi.iq] = t2;
        for k in 0..gi.iq {
            u[k] -= t2 * r[k];
        }
        active[gi.iq] = m + i;
        if !gi.add_constraint(&mut d) {
            return Err(GncError::Numerical("linearly dependent equality constraints".into()));
        }
    }

    let tol = 1e-12;
    let mut in_active = vec![false; m];
    let mut excluded = vec![false; m];
    let mut s = DVector::zeros(m);

    'outer: loop {
        iterations += 1;
        if iterations > max_iter {
            return Err(GncError::Numerical("QP iteration limit reached".into()));
        }
        let mut psi = 0.0;
        for i in 0..m {
            let v = ineq.normals.column(i).dot(&x) + ineq.offsets[i];
            s[i] = v;
            psi += v.min(0.0);
        }
        excluded.iter_mut().for_each(|e| *e = false);
        if psi.abs() <= (m as f64) * f64::EPSILON * c1 * c2 * 100.0 {
            break;
        }
        let u_old = u.clone();
        let active_old = active.clone();
        let x_old = x.clone();
        let iq_old = gi.iq;

        'select: loop {
            let mut ss = 0.0;
            let mut ip = usize::MAX;
            for i in 0..m {
                let scale = 1.0 + ineq.offsets[i].abs();
                if s[i] < ss && s[i] < -tol * scale && !in_active[i] && !excluded[i] {
                    ss = s[i];
                    ip = i;
                }
            }
            if ip == usize::MAX {
                break 'outer;
            }
            let np: DVector<f64> = ineq.normals.column(ip).into();
            u[gi.iq] = 0.0;
            active[gi.iq] = ip;

            loop {
                iterations += 1;
                if iterations > max_iter {
                    return Err(GncError::Numerical("QP iteration limit reached".into()));
                }
                let mut d = gi.compute_d(&np);
                let z = gi.update_z(&d);
                let r = gi.update_r(&d);

                // dual step bound from active inequalities
                let mut t1 = f64::INFINITY;
                let mut drop = usize::MAX;
                for k in p..gi.iq {
                    if r[k] > 0.0 {
                        let ratio = u[k] / r[k];
                        if ratio < t1 {
                            t1 = ratio;
                            drop = active[k];
                        }
                    }
                }
                let zz = z.dot(&z);
                let t2 = if zz.abs() > f64::EPSILON { -s[ip] / z.dot(&np) } else { f64::INFINITY };
                let t = t1.min(t2);
                if !t.is_finite() {
                    return Ok(GiResult { x, u: collect_u(&u, &active, gi.iq, m, p), iterations, feasible: false });
                }
                if !t2.is_finite() {
                    // step in dual space only
                    for k in 0..gi.iq {
                        u[k] -= t * r[k];
                    }
                    u[gi.iq] += t;
                    in_active[drop] = false;
                    gi.delete_constraint(&mut active, &mut u, p, drop);
                    continue;
                }
                x.axpy(t, &z, 1.0);
                for k in 0..gi.iq {
                    u[k] -= t * r[k];
                }
                u[gi.iq] += t;
                if (t - t2).abs() <= f64::EPSILON * t2.abs().max(1.0) {
                    // full step: constraint becomes active
                    if !gi.add_constraint(&mut d) {
                        excluded[ip] = true;
                        gi.delete_constraint(&mut active, &mut u, p, ip);
                        // restore state saved at the start of this outer iteration
                        u.copy_from(&u_old);
                        active.copy_from_slice(&active_old);
                        x.copy_from(&x_old);
                        gi.iq = gi.iq.min(iq_old);
                        in_active.iter_mut().for_each(|a| *a = false);
                        for k in p..gi.iq {
                            in_active[active[k]] = true;
                        }
                        continue 'select;
                    }
                    in_active[ip] = true;
                    continue 'outer;
                }
                // partial step: drop the blocking constraint
                in_active[drop] = false;
                gi.delete_constraint(&mut active, &mut u, p, drop);
                s[ip] = np.dot(&x) + ineq.offsets[ip];
            }
        }
    }
    Ok(GiResult { x, u: collect_u(&u, &active, gi.iq, m, p), iterations, feasible: true })
}

/// Scatter working-set multipliers to a vector of length `m + p` (inequalities first).
fn collect_u(u: &DVector<f64>, active: &[usize], iq: usize, m: usize, p: usize) -> DVector<f64> {
    let mut out = DVector::zeros(m + p);
    for k in 0..iq {
        out[active[k]] = u[k];
    }
    out
}

/// Default iteration cap for the dual active-set loop.
fn iteration_cap(n: usize, m: usize) -> usize {
    50 * (n + m) + 100
}

/// Inequalities in the `A z ≤ b` sense with optional simple bounds folded in.
struct StackedInequalities {
    gi: GiConstraints,
    /// (row kind, index): 0 general, 1 lower bound, 2 upper bound
    origin: Vec<(u8, usize)>,
}

fn stack_inequalities(qp: &QpProblem) -> StackedInequalities {
    let n = qp.gradient.len();
    let mut origin = Vec::new();
    for i in 0..qp.ineq_matrix.nrows() {
        origin.push((0u8, i));
    }
    for i in 0..n {
        if qp.lower[i].is_finite() {
            origin.push((1, i));
        }
        if qp.upper[i].is_finite() {
            origin.push((2, i));
        }
    }
    let m = origin.len();
    let mut normals = DMatrix::zeros(n, m);
    let mut offsets = DVector::zeros(m);
    for (col, &(kind, i)) in origin.iter().enumerate() {
        match kind {
            0 => {
                // A z ≤ b  ⇔  −aᵀz + b ≥ 0
                for k in 0..n {
                    normals[(k, col)] = -qp.ineq_matrix[(i, k)];
                }
                offsets[col] = qp.ineq_rhs[i];
            }
            1 => {
                normals[(i, col)] = 1.0;
                offsets[col] = -qp.lower[i];
            }
            _ => {
                normals[(i, col)] = -1.0;
                offsets[col] = qp.upper[i];
            }
        }
    }
    StackedInequalities { gi: GiConstraints { normals, offsets }, origin }
}

/// Solve the QP. Returns `(Infeasible, best-effort solution)` when the constraints admit no
/// point, as confirmed by a slack-relaxed problem.
pub fn solve_qp(qp: &QpProblem) -> Result<(QpOutcome, QpSolution)> {
    let (feasible, sol) = solve_qp_unchecked(qp)?;
    if feasible {
        return Ok((QpOutcome::Optimal, sol));
    }
    if minimum_violation(qp)? > 1e-9 {
        return Ok((QpOutcome::Infeasible, sol));
    }
    Err(GncError::Numerical("QP reported infeasible but a slack-relaxed solve is feasible".into()))
}

/// Dual active-set solve without the slack-relaxed confirmation of infeasibility.
pub(crate) fn solve_qp_unchecked(qp: &QpProblem) -> Result<(bool, QpSolution)> {
    qp.validate()?;
    let n = qp.gradient.len();
    let (chol, reg) = regularized_cholesky(&qp.hessian)?;
    let stacked = stack_inequalities(qp);
    let eq = GiConstraints {
        normals: qp.eq_matrix.transpose(),
        offsets: -&qp.eq_rhs,
    };
    let m = stacked.origin.len();
    let res = goldfarb_idnani(&chol, &qp.gradient, &eq, &stacked.gi, iteration_cap(n, m + eq.normals.ncols()))?;

    Ok((res.feasible, unpack(qp, &stacked, res.x, &res.u, res.iterations, reg)))
}

fn unpack(
    qp: &QpProblem,
    stacked: &StackedInequalities,
    z: DVector<f64>,
    u: &DVector<f64>,
    iterations: usize,
    regularization: f64,
) -> QpSolution {
    let n = qp.gradient.len();
    let m = stacked.origin.len();
    let mut ineq_duals = DVector::zeros(qp.ineq_matrix.nrows());
    let mut lower_duals = DVector::zeros(n);
    let mut upper_duals = DVector::zeros(n);
    for (col, &(kind, i)) in stacked.origin.iter().enumerate() {
        match kind {
            0 => ineq_duals[i] = u[col],
            1 => lower_duals[i] = u[col],
            _ => upper_duals[i] = u[col],
        }
    }
    let eq_duals = DVector::from_fn(qp.eq_rhs.len(), |i, _| -u[m + i]);
    let objective = 0.5 * z.dot(&(&qp.hessian * &z)) + qp.gradient.dot(&z);
    QpSolution { z, eq_duals, ineq_duals, lower_duals, upper_duals, objective, iterations, regularization }
}

/// Smallest total ℓ1 constraint violation, from the slack-relaxed problem
/// `min Σs + δ(‖z‖² + ‖s‖²)/2` s.t. relaxed constraints, `s ≥ 0`.
pub fn minimum_violation(qp: &QpProblem) -> Result<f64> {
    let n = qp.gradient.len();
    let me = qp.eq_rhs.len();
    let mi = qp.ineq_rhs.len();
    let nb_l: Vec<usize> = (0..n).filter(|&i| qp.lower[i].is_finite()).collect();
    let nb_u: Vec<usize> = (0..n).filter(|&i| qp.upper[i].is_finite()).collect();
    let ns = 2 * me + mi + nb_l.len() + nb_u.len();
    let nt = n + ns;
    let delta = 1e-10;
    let h = DMatrix::from_diagonal_element(nt, nt, delta);
    let mut g = DVector::zeros(nt);
    g.rows_mut(n, ns).fill(1.0);
    let mut a = DMatrix::zeros(ns + ns, nt);
    let mut b = DVector::zeros(ns + ns);
    let mut row = 0;
    let mut slack = n;
    for i in 0..me {
        for sign in [1.0, -1.0] {
            for k in 0..n {
                a[(row, k)] = sign * qp.eq_matrix[(i, k)];
            }
            a[(row, slack)] = -1.0;
            b[row] = sign * qp.eq_rhs[i];
            row += 1;
            slack += 1;
        }
    }
    for i in 0..mi {
        for k in 0..n {
            a[(row, k)] = qp.ineq_matrix[(i, k)];
        }
        a[(row, slack)] = -1.0;
        b[row] = qp.ineq_rhs[i];
        row += 1;
        slack += 1;
    }
    for &i in &nb_l {
        a[(row, i)] = -1.0;
        a[(row, slack)] = -1.0;
        b[row] = -qp.lower[i];
        row += 1;
        slack += 1;
    }
    for &i in &nb_u {
        a[(row, i)] = 1.0;
        a[(row, slack)] = -1.0;
        b[row] = qp.upper[i];
        row += 1;
        slack += 1;
    }
    for s in 0..ns {
        a[(row, n + s)] = -1.0;
        row += 1;
    }
    let relaxed = QpProblem::new(h, g).with_inequalities(a, b);
    let stacked = stack_inequalities(&relaxed);
    let (chol, _) = regularized_cholesky(&relaxed.hessian)?;
    let eq = GiConstraints { normals: DMatrix::zeros(nt, 0), offsets: DVector::zeros(0) };
    let res = goldfarb_idnani(&chol, &relaxed.gradient, &eq, &stacked.gi, iteration_cap(nt, ns * 2))?;
    Ok(res.x.rows(n, ns).iter().map(|v| v.max(0.0)).sum())
}
