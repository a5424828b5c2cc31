//! Propeller-pair maps from duty cycles to thrust magnitude and roll torque.

use nalgebra::{DMatrix, DVector, Matrix2, Vector2};
use serde::{Deserialize, Serialize};

use crate::{GncError, Result};

/// Duty cycles are normalised as `s = (τ_DC − 1500 μs) / 500 μs` before entering the cubic.
pub const DC_CENTER: f64 = 1500.0;
pub const DC_SCALE: f64 = 500.0;

pub const N_COEFF: usize = 10;
pub const NEWTON_MAX_ITER: usize = 20;
pub const NEWTON_TOL: f64 = 1e-6;
/// Newton keeps iterating past the acceptance tolerance down to this residual.
const NEWTON_POLISH: f64 = 1e-10;

/// One bench measurement.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BenchSample {
    pub dc1_us: f64,
    pub dc2_us: f64,
    pub thrust_n: f64,
    pub torque_nm: f64,
}

/// Monomials `1, s1, s2, s1², s1 s2, s2², s1³, s1² s2, s1 s2², s2³`.
fn basis(dc1: f64, dc2: f64) -> [f64; N_COEFF] {
    let x = (dc1 - DC_CENTER) / DC_SCALE;
    let y = (dc2 - DC_CENTER) / DC_SCALE;
    [1.0, x, y, x * x, x * y, y * y, x * x * x, x * x * y, x * y * y, y * y * y]
}

/// Partials of the basis with respect to the raw duty cycles.
fn basis_grad(dc1: f64, dc2: f64) -> ([f64; N_COEFF], [f64; N_COEFF]) {
    let x = (dc1 - DC_CENTER) / DC_SCALE;
    let y = (dc2 - DC_CENTER) / DC_SCALE;
    let k = 1.0 / DC_SCALE;
    (
        [0.0, k, 0.0, 2.0 * x * k, y * k, 0.0, 3.0 * x * x * k, 2.0 * x * y * k, y * y * k, 0.0],
        [0.0, 0.0, k, 0.0, x * k, 2.0 * y * k, 0.0, x * x * k, 2.0 * x * y * k, 3.0 * y * y * k],
    )
}

fn dot(a: &[f64; N_COEFF], b: &[f64; N_COEFF]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Fitted thrust and torque surfaces with their admissible duty-cycle box.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MotorMaps {
    pub thrust: [f64; N_COEFF],
    pub torque: [f64; N_COEFF],
    pub dc_min: f64,
    pub dc_max: f64,
}

impl MotorMaps {
    pub fn thrust_at(&self, dc1: f64, dc2: f64) -> f64 {
        dot(&self.thrust, &basis(dc1, dc2))
    }

    pub fn torque_at(&self, dc1: f64, dc2: f64) -> f64 {
        dot(&self.torque, &basis(dc1, dc2))
    }

    /// Jacobian of `(‖T‖, τ_x)` with respect to `(τ_DC1, τ_DC2)`.
    pub fn jacobian(&self, dc1: f64, dc2: f64) -> Matrix2<f64> {
        let (g1, g2) = basis_grad(dc1, dc2);
        Matrix2::new(dot(&self.thrust, &g1), dot(&self.thrust, &g2), dot(&self.torque, &g1), dot(&self.torque, &g2))
    }

    /// Strict monotonicity of both surfaces in each command, checked on a dense grid.
    /// Thrust must rise with both commands, torque must rise with one and fall with the other.
    pub fn check_monotonic(&self) -> Result<()> {
        let n = 40;
        let mut signs: [Option<f64>; 4] = [None; 4];
        for i in 0..=n {
            for j in 0..=n {
                let d1 = self.dc_min + (self.dc_max - self.dc_min) * i as f64 / n as f64;
                let d2 = self.dc_min + (self.dc_max - self.dc_min) * j as f64 / n as f64;
                let jac = self.jacobian(d1, d2);
                let partials = [jac[(0, 0)], jac[(0, 1)], jac[(1, 0)], jac[(1, 1)]];
                for (k, &p) in partials.iter().enumerate() {
                    let sign = p.signum();
                    if p == 0.0 || signs[k].is_some_and(|s| s != sign) {
                        return Err(GncError::FitFailure(format!(
                            "{} map is not strictly monotonic in command {} near ({d1:.0}, {d2:.0}) us",
                            if k < 2 { "thrust" } else { "torque" },
                            k % 2 + 1
                        )));
                    }
                    signs[k] = Some(sign);
                }
            }
        }
        if signs[0] != Some(1.0) || signs[1] != Some(1.0) {
            return Err(GncError::FitFailure("thrust map decreases with duty cycle".into()));
        }
        if signs[2] == signs[3] {
            return Err(GncError::FitFailure("torque map does not separate the two propellers".into()));
        }
        Ok(())
    }

    /// Duty cycles producing thrust magnitude `thrust` and roll torque `torque`.
    pub fn motor_commands(&self, torque: f64, thrust: f64) -> Result<(f64, f64)> {
        let (d, res) = self.newton(torque, thrust);
        if res <= NEWTON_TOL {
            Ok((d.x, d.y))
        } else {
            Err(GncError::AllocationFailure {
                step: 4,
                reason: format!(
                    "no duty cycles in [{}, {}] us reach thrust {thrust:.4} N and torque {torque:.5} N·m (residual {res:.3e})",
                    self.dc_min, self.dc_max
                ),
            })
        }
    }

    /// As [`Self::motor_commands`] but returns the best clamped command when the target is
    /// outside the image, prioritising thrust over roll torque.
    pub fn motor_commands_clamped(&self, torque: f64, thrust: f64) -> (f64, f64) {
        if let Ok(d) = self.motor_commands(torque, thrust) {
            return d;
        }
        let t_lo = self.thrust_at(self.dc_min, self.dc_min);
        let t_hi = self.thrust_at(self.dc_max, self.dc_max);
        let thrust = thrust.clamp(t_lo, t_hi);
        // bisection on torque towards zero keeps the thrust target feasible
        let (mut lo, mut hi) = (0.0, 1.0);
        let mut best = self.newton(0.0, thrust).0;
        for _ in 0..30 {
            let mid = 0.5 * (lo + hi);
            let (d, res) = self.newton(torque * mid, thrust);
            if res <= NEWTON_TOL {
                lo = mid;
                best = d;
            } else {
                hi = mid;
            }
        }
        (best.x, best.y)
    }

    fn newton(&self, torque: f64, thrust: f64) -> (Vector2<f64>, f64) {
        let target = Vector2::new(thrust, torque);
        let eval = |d: &Vector2<f64>| Vector2::new(self.thrust_at(d.x, d.y), self.torque_at(d.x, d.y)) - target;
        let mut d = self.nearest_grid_point(&target);
        let mut r = eval(&d);
        for _ in 0..NEWTON_MAX_ITER {
            if r.amax() <= NEWTON_POLISH {
                break;
            }
            let Some(jinv) = self.jacobian(d.x, d.y).try_inverse() else { break };
            let step = jinv * r;
            // backtrack on the clamped step
            let mut alpha = 1.0;
            let norm0 = r.norm();
            loop {
                let cand = (d - step * alpha).map(|v| v.clamp(self.dc_min, self.dc_max));
                let rc = eval(&cand);
                if rc.norm() < norm0 || alpha < 1e-3 {
                    d = cand;
                    r = rc;
                    break;
                }
                alpha *= 0.5;
            }
        }
        (d, r.amax())
    }

    fn nearest_grid_point(&self, target: &Vector2<f64>) -> Vector2<f64> {
        let n = 16;
        let t_scale = self.thrust_at(self.dc_max, self.dc_max).abs().max(1e-9);
        let q_scale = self.torque_at(self.dc_max, self.dc_min).abs().max(self.torque_at(self.dc_min, self.dc_max).abs()).max(1e-12);
        let mut best = (f64::INFINITY, Vector2::repeat(0.5 * (self.dc_min + self.dc_max)));
        for i in 0..=n {
            for j in 0..=n {
                let d1 = self.dc_min + (self.dc_max - self.dc_min) * i as f64 / n as f64;
                let d2 = self.dc_min + (self.dc_max - self.dc_min) * j as f64 / n as f64;
                let e = ((self.thrust_at(d1, d2) - target.x) / t_scale).powi(2)
                    + ((self.torque_at(d1, d2) - target.y) / q_scale).powi(2);
                if e < best.0 {
                    best = (e, Vector2::new(d1, d2));
                }
            }
        }
        best.1
    }
}

/// Least-squares fit of both cubic surfaces. The admissible box is the span of the bench grid.
pub fn fit_motor_maps(bench: &[BenchSample]) -> Result<MotorMaps> {
    if bench.len() < N_COEFF {
        return Err(GncError::FitFailure(format!("need at least {N_COEFF} bench samples, got {}", bench.len())));
    }
    if bench.iter().any(|s| ![s.dc1_us, s.dc2_us, s.thrust_n, s.torque_nm].iter().all(|v| v.is_finite())) {
        return Err(GncError::FitFailure("bench data contains non-finite values".into()));
    }
    let m = bench.len();
    let a = DMatrix::from_fn(m, N_COEFF, |i, k| basis(bench[i].dc1_us, bench[i].dc2_us)[k]);
    let svd = a.clone().svd(true, true);
    let smax = svd.singular_values.max();
    let smin = svd.singular_values.min();
    if !(smin > 1e-10 * smax) {
        return Err(GncError::FitFailure(format!(
            "bench grid does not determine a cubic surface (singular values {smin:.3e}..{smax:.3e})"
        )));
    }
    let solve = |rhs: DVector<f64>| -> Result<[f64; N_COEFF]> {
        let x = svd.solve(&rhs, 0.0).map_err(|e| GncError::FitFailure(e.to_string()))?;
        Ok(std::array::from_fn(|k| x[k]))
    };
    let thrust = solve(DVector::from_iterator(m, bench.iter().map(|s| s.thrust_n)))?;
    let torque = solve(DVector::from_iterator(m, bench.iter().map(|s| s.torque_nm)))?;
    let dc_min = bench.iter().map(|s| s.dc1_us.min(s.dc2_us)).fold(f64::INFINITY, f64::min);
    let dc_max = bench.iter().map(|s| s.dc1_us.max(s.dc2_us)).fold(f64::NEG_INFINITY, f64::max);
    let maps = MotorMaps { thrust, torque, dc_min, dc_max };
    maps.check_monotonic()?;
    Ok(maps)
}

/// Synthetic propeller used in place of the load-cell rig: per-motor thrust
/// `k (τ − 1000)² (1 + 0.1 (τ − 1000)/900)`, roll torque proportional to the thrust difference.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SyntheticPropeller {
    /// Thrust of one motor at 1900 μs, N.
    pub max_thrust: f64,
    /// Roll torque per newton of thrust difference, m.
    pub torque_ratio: f64,
    /// Scales the second motor, 1.0 for a matched pair.
    pub imbalance: f64,
}

impl Default for SyntheticPropeller {
    fn default() -> Self {
        Self { max_thrust: 11.0, torque_ratio: 0.01, imbalance: 1.0 }
    }
}

impl SyntheticPropeller {
    fn motor(&self, dc: f64) -> f64 {
        let k = self.max_thrust / (900.0 * 900.0 * 1.1);
        let x = dc - 1000.0;
        k * x * x * (1.0 + 0.1 * x / 900.0)
    }

    pub fn thrust(&self, dc1: f64, dc2: f64) -> f64 {
        self.motor(dc1) + self.imbalance * self.motor(dc2)
    }

    pub fn torque(&self, dc1: f64, dc2: f64) -> f64 {
        self.torque_ratio * (self.motor(dc1) - self.imbalance * self.motor(dc2))
    }

    /// Bench table on a square grid, `step_us` apart.
    pub fn bench(&self, dc_min: f64, dc_max: f64, step_us: f64) -> Vec<BenchSample> {
        let n = ((dc_max - dc_min) / step_us).round() as usize;
        let mut out = Vec::with_capacity((n + 1) * (n + 1));
        for i in 0..=n {
            for j in 0..=n {
                let dc1 = dc_min + step_us * i as f64;
                let dc2 = dc_min + step_us * j as f64;
                out.push(BenchSample { dc1_us: dc1, dc2_us: dc2, thrust_n: self.thrust(dc1, dc2), torque_nm: self.torque(dc1, dc2) });
            }
        }
        out
    }
}

/// Maps fitted to the default synthetic propeller on the 1100..1900 μs grid.
pub fn default_motor_maps() -> MotorMaps {
    fit_motor_maps(&SyntheticPropeller::default().bench(1100.0, 1900.0, 100.0)).expect("synthetic bench data fits")
}
