//! Offline audit of a flight log.

use serde::Serialize;

use super::log::{Event, LogRow};
use super::scenario::Scenario;
use crate::guidance::{audit_solution, GuidanceParams};

#[derive(Debug, Clone, Serialize)]
pub struct CheckItem {
    pub name: String,
    pub passed: bool,
    pub detail: String,
}

#[derive(Debug, Clone, Default, Serialize)]
pub struct CheckReport {
    pub items: Vec<CheckItem>,
}

impl CheckReport {
    fn push(&mut self, name: &str, passed: bool, detail: String) {
        self.items.push(CheckItem { name: name.into(), passed, detail });
    }

    pub fn passed(&self) -> bool {
        self.items.iter().all(|i| i.passed)
    }
}

pub const QUAT_TOL: f64 = 1e-9;
pub const PSD_TOL: f64 = -1e-10;
pub const INPUT_TOL: f64 = 1e-8;
pub const GUIDANCE_TOL: f64 = 1e-6;

/// Re-run the log invariants, plus the guidance constraint audit when events are supplied.
pub fn check_flight(rows: &[LogRow], events: Option<&[Event]>, scenario: &Scenario) -> CheckReport {
    let mut rep = CheckReport::default();

    let bad_t = rows.windows(2).position(|w| !(w[1].t > w[0].t));
    rep.push("monotonic-time", bad_t.is_none(), match bad_t {
        Some(i) => format!("row {} does not advance time", i + 1),
        None => format!("{} rows", rows.len()),
    });

    let finite = |r: &LogRow| {
        r.truth.iter().chain(r.estimate.iter()).chain(r.w_hat.iter()).all(|v| v.is_finite())
            && [r.p_sp, r.v_sp, r.u, r.torque].iter().all(|v| v.iter().all(|x| x.is_finite()))
            && r.q_sp.iter().all(|v| v.is_finite())
            && [r.thrust_x, r.phi1, r.phi2, r.dc1_us, r.dc2_us, r.voltage, r.thrust_gain].iter().all(|v| v.is_finite())
    };
    let bad = rows.iter().position(|r| !finite(r));
    rep.push("finite", bad.is_none(), bad.map_or("all values finite".into(), |i| format!("non-finite value in row {i}")));

    let qerr = rows
        .iter()
        .map(|r| r.quat_norm_err.max((r.truth.fixed_rows::<4>(6).norm() - 1.0).abs()))
        .fold(0.0, f64::max);
    rep.push("quaternion-norm", qerr <= QUAT_TOL, format!("max |‖q‖ − 1| = {qerr:.3e}"));

    let eig = rows.iter().map(|r| r.min_cov_eig).fold(f64::INFINITY, f64::min);
    rep.push("covariance-psd", eig >= PSD_TOL, format!("min eigenvalue {eig:.3e}"));

    let att = scenario.rates.attitude_hz / scenario.rates.mpc_hz;
    let rate = scenario.rates.rate_hz / scenario.rates.mpc_hz;
    let off = rows.iter().skip(1).position(|r| r.att_ticks != att || r.rate_ticks != rate);
    rep.push("rate-fidelity", off.is_none(), match off {
        Some(i) => {
            let r = &rows[i + 1];
            format!("row {}: {} attitude / {} rate ticks, expected {att} / {rate}", i + 1, r.att_ticks, r.rate_ticks)
        }
        None => format!("{att} attitude and {rate} rate ticks per MPC tick"),
    });

    let uv = rows.iter().map(|r| r.u_violation).fold(0.0, f64::max);
    rep.push("input-constraints", uv <= INPUT_TOL, format!("max polytope violation {uv:.3e}"));

    if let Some(events) = events {
        let mut worst: f64 = 0.0;
        let mut count = 0;
        let mut max_slack: f64 = 0.0;
        for e in events {
            if let Event::Guidance { solution, .. } = e {
                let params = GuidanceParams { phase: solution.phase, ..scenario.guidance.clone() };
                let a = audit_solution(solution, &params);
                worst = worst.max(a.max_violation);
                max_slack = solution.knots.iter().map(|k| k.slack).fold(max_slack, f64::max);
                count += 1;
                if !(solution.t_f > 0.0) {
                    worst = f64::INFINITY;
                }
            }
        }
        rep.push("guidance-audit", worst <= GUIDANCE_TOL, format!("{count} solutions, worst violation {worst:.3e}"));
        if count > 0 {
            let v_max = scenario.guidance.v_max;
            let speed = rows.iter().map(|r| r.velocity().norm()).fold(0.0, f64::max);
            let bound = (v_max + max_slack).max(1.1 * v_max);
            rep.push("soft-speed", speed <= bound, format!("peak speed {speed:.3} m/s, bound {bound:.3} m/s"));
        }
        let pre = events
            .iter()
            .filter(|e| matches!(e, Event::Guidance { reason, .. } if reason == "pre-takeoff"))
            .count();
        if count > 0 {
            rep.push("pre-takeoff", pre == 1, format!("{pre} pre-takeoff solves"));
        }
    }
    rep
}
